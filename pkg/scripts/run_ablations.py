#!/usr/bin/env python3
"""Run the pinned directional ablation study and print its table.

Usage: python3 scripts/run_ablations.py [--seeds 0,1,2,3,4]

Three directions are reported: adapter-based continual learning versus a
head-only baseline on a class-incremental stream, forgetting with the
interference penalty on versus off, and the scale-and-shift warmup on
versus off on a domain-shifted stream. With the default seeds this is
the same measurement the acceptance test gates on.
"""

import argparse
from dataclasses import replace

from tinycl.study import StudyConfig, format_report, run_study


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--seeds", default=None,
                        help="comma-separated seed list (default: the pinned study seeds)")
    args = parser.parse_args()

    cfg = StudyConfig()
    if args.seeds is not None:
        cfg = replace(cfg, seeds=tuple(int(s) for s in args.seeds.split(",")))

    def progress(outcome):
        print(f"seed {outcome.seed}: adapter {outcome.a_adapter:.3f} "
              f"head-only {outcome.a_classifier:.3f} gap {outcome.gap:+.3f} | "
              f"F penalty-on {outcome.f_adapter:.3f} off {outcome.f_no_penalty:.3f} | "
              f"domain warm {outcome.a_dil_warm:.3f} cold {outcome.a_dil_cold:.3f}",
              flush=True)

    report = run_study(cfg, progress=progress)
    print()
    print(format_report(report))
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
