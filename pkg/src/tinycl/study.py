"""Directional ablation study at desk scale.

Three comparisons over a fixed seed set, each about a direction rather
than an absolute number: (a) adapter-based continual learning versus
tuning only the classifier head on the same class-incremental stream,
(b) forgetting with the cross-task interference penalty on versus off,
and (c) final accuracy with the scale-and-shift warmup on versus off on
a domain-shifted stream. Every hyperparameter is pinned here so the
study is one deterministic artifact; change a value and the recorded
aggregates in the test gate no longer apply.

The class-incremental arms share one pretrained backbone per seed, and
the paired runs (penalty on/off, warmup on/off) reuse the same stream
and RNG so each comparison differs in exactly one switch.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np
from threadpoolctl import threadpool_limits

from .backbone import Backbone, BackboneConfig, pretrain_upstream
from .baselines import classifier_only_train
from .datagen import (default_domains, make_cil_stream, make_dil_stream,
                      make_probe, make_upstream)
from .metrics import a_n, f_n
from .protocol import run_continual
from .tensor import RngStream


@dataclass(frozen=True)
class StudyConfig:
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
    backbone: BackboneConfig = field(
        default_factory=lambda: BackboneConfig(dim=48, depth=4))
    pretrain_epochs: int = 2
    # class-incremental arm
    cil_tasks: int = 5
    cil_classes_per_task: int = 4
    cil_per_class: int = 100
    cil_probe_n: int = 512
    cil_phase0_epochs: int = 4
    cil_task_epochs: int = 24
    cil_lr: float = 1e-2
    # domain-incremental arm
    dil_domains: int = 3
    dil_classes: int = 4
    dil_per_class: int = 80
    dil_phase0_epochs: int = 4
    dil_task_epochs: int = 10
    dil_lr: float = 1e-2


@dataclass
class SeedOutcome:
    seed: int
    a_adapter: float       # adapters with interference penalty on
    a_no_penalty: float    # same run, penalty off
    a_classifier: float    # head-only baseline
    f_adapter: float
    f_no_penalty: float
    a_dil_warm: float      # domain stream, scale-and-shift warmup on
    a_dil_cold: float      # domain stream, warmup ablated to identity

    @property
    def gap(self) -> float:
        return self.a_adapter - self.a_classifier


@dataclass
class StudyReport:
    outcomes: list[SeedOutcome]
    elapsed_s: float

    @property
    def mean_gap(self) -> float:
        return float(np.mean([o.gap for o in self.outcomes]))

    @property
    def forgetting_wins(self) -> int:
        """Seeds where the penalty strictly reduced forgetting."""
        return sum(o.f_no_penalty > o.f_adapter for o in self.outcomes)

    @property
    def mean_warmup_diff(self) -> float:
        return float(np.mean([o.a_dil_warm - o.a_dil_cold for o in self.outcomes]))


def _pretrained(cfg: StudyConfig, seed: int) -> Backbone:
    return pretrain_upstream(cfg.backbone, make_upstream(seed),
                             cfg.pretrain_epochs, RngStream(seed).child("pre"))


def run_seed(cfg: StudyConfig, seed: int) -> SeedOutcome:
    backbone = _pretrained(cfg, seed)

    stream = make_cil_stream(seed, n_tasks=cfg.cil_tasks,
                             classes_per_task=cfg.cil_classes_per_task,
                             per_class=cfg.cil_per_class,
                             size=cfg.backbone.image_size)
    probe = make_probe(seed, n=cfg.cil_probe_n, size=cfg.backbone.image_size)
    r_pen = run_continual(backbone, stream, RngStream(seed).child("cada"),
                          phase0_epochs=cfg.cil_phase0_epochs,
                          task_epochs=cfg.cil_task_epochs, lr=cfg.cil_lr,
                          probe=probe)
    r_off = run_continual(backbone, stream, RngStream(seed).child("cada"),
                          phase0_epochs=cfg.cil_phase0_epochs,
                          task_epochs=cfg.cil_task_epochs, lr=cfg.cil_lr,
                          delta=0.0, probe=probe)
    r_clf = classifier_only_train(backbone, stream, RngStream(seed).child("clf"),
                                  epochs=cfg.cil_task_epochs, lr=cfg.cil_lr,
                                  probe=probe)

    dil = make_dil_stream(seed, default_domains(cfg.dil_domains),
                          n_classes=cfg.dil_classes,
                          per_class=cfg.dil_per_class,
                          size=cfg.backbone.image_size)
    r_warm = run_continual(backbone, dil, RngStream(seed).child("dil"),
                           phase0_epochs=cfg.dil_phase0_epochs,
                           task_epochs=cfg.dil_task_epochs, lr=cfg.dil_lr)
    r_cold = run_continual(backbone, dil, RngStream(seed).child("dil"),
                           ablate_ss=True,
                           task_epochs=cfg.dil_task_epochs, lr=cfg.dil_lr)

    return SeedOutcome(seed=seed,
                       a_adapter=a_n(r_pen.matrix),
                       a_no_penalty=a_n(r_off.matrix),
                       a_classifier=a_n(r_clf.matrix),
                       f_adapter=f_n(r_pen.matrix),
                       f_no_penalty=f_n(r_off.matrix),
                       a_dil_warm=a_n(r_warm.matrix),
                       a_dil_cold=a_n(r_cold.matrix))


def run_study(cfg: StudyConfig | None = None, progress=None) -> StudyReport:
    cfg = cfg or StudyConfig()
    outcomes = []
    start = time.perf_counter()
    with threadpool_limits(limits=1):
        for seed in cfg.seeds:
            outcomes.append(run_seed(cfg, seed))
            if progress is not None:
                progress(outcomes[-1])
    return StudyReport(outcomes, time.perf_counter() - start)


def format_report(report: StudyReport) -> str:
    lines = ["seed  A_adapter  A_no_pen  A_head  gap      F_pen   F_off   A_warm  A_cold"]
    for o in report.outcomes:
        lines.append(f"{o.seed:<4d}  {o.a_adapter:9.3f}  {o.a_no_penalty:8.3f}  "
                     f"{o.a_classifier:6.3f}  {o.gap:+7.3f}  {o.f_adapter:6.3f}  "
                     f"{o.f_no_penalty:6.3f}  {o.a_dil_warm:6.3f}  {o.a_dil_cold:6.3f}")
    lines.append(f"mean adapter-vs-head gap: {report.mean_gap:+.3f}")
    lines.append(f"penalty reduced forgetting in {report.forgetting_wins}/{len(report.outcomes)} seeds")
    lines.append(f"mean warmup effect on domain stream: {report.mean_warmup_diff:+.3f}")
    lines.append(f"elapsed: {report.elapsed_s:.0f}s")
    return "\n".join(lines)
