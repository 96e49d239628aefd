"""Command-line front end.

Subcommands: ``run`` (execute one experiment and write artifacts),
``compare`` (aggregate finished run directories into a method table),
``flops`` (analytic cost breakdown for a config), ``gradcheck``
(gradient verification sweep), ``check`` (re-derive summary.kv from
matrix.csv + config.kv and diff). Exit codes: 0 success, 1 config
error, 2 runtime error.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import metrics
from .config import load_config
from .errors import ConfigError
from .gradsuite import run_gradient_check_suite
from .runner import execute, flops_forward, parse_kv, recheck_summary

# config keys that must agree for runs to be comparable
_STREAM_KEYS = ("mode", "stream.", "backbone.")


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="tinycl",
        description="Desk-scale continual-learning laboratory over a tiny transformer.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="execute one experiment from a config file")
    p.add_argument("config", help="path to a key = value config file")

    p = sub.add_parser("compare", help="aggregate run directories into a method table")
    p.add_argument("dirs", nargs="+", help="run directories written by `run`")

    p = sub.add_parser("flops", help="print the analytic FLOP breakdown for a config")
    p.add_argument("config")

    p = sub.add_parser("gradcheck", help="verify gradients against finite differences")
    p.add_argument("--seed", type=int, default=7)

    p = sub.add_parser("check", help="re-derive summary.kv from artifacts and diff")
    p.add_argument("dir")
    return parser


def cmd_run(path: str) -> int:
    cfg = load_config(path)
    art = execute(cfg)
    print(f"run complete: {art.out_dir}")
    for k in ("a_n", "f_n", "bwt", "fwt", "param_fraction"):
        if art.summary.get(k) is not None:
            print(f"  {k} = {art.summary[k]:.6f}")
    return 0


def _comparable_slice(config_kv: dict[str, str]) -> dict[str, str]:
    return {k: v for k, v in config_kv.items()
            if any(k == key or k.startswith(key) for key in _STREAM_KEYS)}


def cmd_compare(dirs: list[str]) -> int:
    rows = []
    reference = None
    for d in dirs:
        run_dir = Path(d)
        summary = parse_kv((run_dir / "summary.kv").read_text(encoding="utf-8"))
        config_kv = parse_kv((run_dir / "config.kv").read_text(encoding="utf-8"))
        sliced = _comparable_slice(config_kv)
        if reference is None:
            reference = sliced
        elif sliced != reference:
            raise ConfigError(f"run {d} has a different stream/backbone config than {dirs[0]}")
        rows.append(summary)

    by_method: dict[str, list[dict[str, str]]] = {}
    for s in rows:
        by_method.setdefault(s["method"], []).append(s)

    cols = ["a_n", "f_n", "bwt", "fwt"]
    header = ["method", "runs"]
    for c in cols:
        header += [f"{c}_mean", f"{c}_std"]
    header += ["param_trainable", "param_fraction", "flops_forward"]
    print(",".join(header))
    for method in sorted(by_method):
        group = by_method[method]
        out = [method, str(len(group))]
        for c in cols:
            vals = np.array([float(s[c]) for s in group if c in s])
            if vals.size:
                out += [f"{vals.mean():.6f}", f"{vals.std(ddof=0):.6f}"]
            else:
                out += ["", ""]
        out.append(group[0]["param_trainable"])
        out.append(f"{float(group[0]['param_fraction']):.6f}")
        out.append(group[0]["flops_forward"])
        print(",".join(out))
    return 0


def cmd_flops(path: str) -> int:
    cfg = load_config(path)
    bd = flops_forward(cfg)
    for name, f in bd.items:
        print(f"flops.{name} = {f}")
    print(f"flops.total = {bd.total}")

    adapter = (len(cfg.attach_layers()), cfg.adapter.m_proj + cfg.adapter.m_mlp)
    ratio = metrics.flop_ratio(cfg.backbone, cfg.stream.n_tasks * cfg.stream.classes_per_task,
                               adapter, pool_size=cfg.prompt.pool_size,
                               top_k=cfg.prompt.top_k, prompt_len=cfg.prompt.prompt_len)
    print(f"two_pass_over_single = {ratio:.4f}")
    return 0


def cmd_gradcheck(seed: int) -> int:
    results = run_gradient_check_suite(seed)
    ok = True
    for r in results:
        status = "pass" if r.passed else "FAIL"
        print(f"{r.name}: max_rel_err={r.max_rel_err:.3g} {status}")
        ok = ok and r.passed
    print(f"gradcheck: {'all passed' if ok else 'FAILURES'} ({len(results)} checks)")
    return 0 if ok else 2


def cmd_check(d: str) -> int:
    stored, fresh = recheck_summary(Path(d))
    if stored == fresh:
        print(f"{d}: summary.kv matches recomputation")
        return 0
    print(f"{d}: summary.kv does NOT match recomputation", file=sys.stderr)
    for a, b in zip(stored.splitlines(), fresh.splitlines()):
        if a != b:
            print(f"  stored:   {a}\n  computed: {b}", file=sys.stderr)
    return 2


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code in (0, None) else 1
    try:
        if args.command == "run":
            return cmd_run(args.config)
        if args.command == "compare":
            return cmd_compare(args.dirs)
        if args.command == "flops":
            return cmd_flops(args.config)
        if args.command == "gradcheck":
            return cmd_gradcheck(args.seed)
        if args.command == "check":
            return cmd_check(args.dir)
        raise ConfigError(f"unknown command {args.command!r}")
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - boundary: map anything to exit 2
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
