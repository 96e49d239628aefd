"""Experiment execution: build data, pretrain, dispatch a method, write artifacts.

A run directory receives four files: ``config.kv`` (the resolved config),
``matrix.csv`` (accuracy matrix plus superdiagonal pre-training entries),
``summary.kv`` (all reported scalars), and ``model.bin``/``model.idx``
(checkpoint). Summary scalars are computed from the CSV's own rounded
values, so they are exactly re-derivable from the artifacts alone.

BLAS threading is pinned to one thread for the duration of a run, which
keeps artifact bytes identical regardless of ambient thread settings.
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path

from threadpoolctl import threadpool_limits

from . import metrics
from .backbone import Backbone, ensure_disjoint_upstream, pretrain_upstream
from .baselines import classifier_only_train, full_finetune_train, prompt_pool_train
from .checkpoint import save_checkpoint
from .config import ExperimentConfig, serialize_config
from .datagen import (default_domains, make_cil_stream, make_dil_stream,
                      make_probe, make_upstream)
from .errors import ConfigError
from .metrics import AccuracyMatrix, matrix_from_csv, matrix_to_csv
from .protocol import RunResult, run_continual
from .streams import TaskStream
from .tensor import RngStream

ENV_OUT_ROOT = "TINYCL_OUT"


def build_stream(cfg: ExperimentConfig) -> TaskStream:
    s = cfg.stream
    size = cfg.backbone.image_size
    if cfg.mode == "cil":
        return make_cil_stream(cfg.stream_seed(), n_tasks=s.n_tasks,
                               classes_per_task=s.classes_per_task,
                               per_class=s.per_class, size=size,
                               shuffle_seed=s.shuffle_seed)
    return make_dil_stream(cfg.stream_seed(), default_domains(s.n_tasks),
                           n_classes=s.classes_per_task, per_class=s.per_class,
                           size=size)


def pretrain_backbone(cfg: ExperimentConfig, stream: TaskStream | None = None) -> Backbone:
    upstream = make_upstream(cfg.stream_seed(), n_classes=cfg.backbone.upstream_classes,
                             size=cfg.backbone.image_size)
    if stream is not None:
        ensure_disjoint_upstream(upstream.labels, stream)
    return pretrain_upstream(cfg.backbone, upstream, cfg.train.pretrain_epochs,
                             RngStream(cfg.seed).child("pretrain"),
                             lr=cfg.train.pretrain_lr)


def dispatch(cfg: ExperimentConfig, backbone: Backbone, stream: TaskStream) -> RunResult:
    rng = RngStream(cfg.seed).child("run")
    method = cfg.effective_method()
    t = cfg.train
    probe = make_probe(cfg.stream_seed(), size=cfg.backbone.image_size)
    if method == "cada":
        return run_continual(
            backbone, stream, rng,
            attach_layers=cfg.attach_layers(),
            middle_split=(cfg.adapter.m_proj, cfg.adapter.m_mlp),
            lam=cfg.adapter.lam, delta=cfg.effective_delta(),
            phase0_epochs=t.phase0_epochs, task_epochs=t.task_epochs,
            lr=t.lr, phase0_lr=t.phase0_lr, batch_size=t.batch_size,
            ablate_ss=(cfg.ablate == "ss"), eval_batch=t.eval_batch, probe=probe)
    if method == "classifier_only":
        return classifier_only_train(backbone, stream, rng, epochs=t.task_epochs,
                                     lr=t.lr, batch_size=t.batch_size,
                                     eval_batch=t.eval_batch, probe=probe)
    if method == "prompt_pool":
        p = cfg.prompt
        return prompt_pool_train(backbone, stream, rng, pool_size=p.pool_size,
                                 prompt_len=p.prompt_len, top_k=p.top_k,
                                 pull_coef=p.pull_coef, epochs=t.task_epochs,
                                 lr=t.lr, batch_size=t.batch_size,
                                 eval_batch=t.eval_batch, probe=probe)
    if method == "full_ft":
        return full_finetune_train(backbone, stream, rng, epochs=t.task_epochs,
                                   lr=t.lr, batch_size=t.batch_size,
                                   eval_batch=t.eval_batch, probe=probe)
    raise ConfigError(f"unknown method {method!r}")


# -- reported scalars ---------------------------------------------------------


def total_classes(cfg: ExperimentConfig) -> int:
    if cfg.mode == "cil":
        return cfg.stream.n_tasks * cfg.stream.classes_per_task
    return cfg.stream.classes_per_task


def chance_vector(cfg: ExperimentConfig) -> list[float]:
    """Chance accuracy when task j's pre-training eval runs, per task."""
    cpt = cfg.stream.classes_per_task
    if cfg.mode == "cil":
        return [1.0 / (cpt * j) for j in range(1, cfg.stream.n_tasks + 1)]
    return [1.0 / cpt] * cfg.stream.n_tasks


def param_counts(cfg: ExperimentConfig) -> tuple[int, int]:
    """(trainable, total) for the configured method, closed form."""
    bb = metrics.backbone_param_count(cfg.backbone)
    head = metrics.head_param_count(cfg.backbone.dim, total_classes(cfg))
    method = cfg.effective_method()
    if method == "cada":
        trainable = metrics.adapter_param_count(
            cfg.backbone.dim, len(cfg.attach_layers()),
            cfg.adapter.m_proj + cfg.adapter.m_mlp) + head
    elif method == "classifier_only":
        trainable = head
    elif method == "prompt_pool":
        p = cfg.prompt
        d = cfg.backbone.dim
        trainable = p.pool_size * d + p.pool_size * p.prompt_len * d + head
    else:  # full_ft: everything trains, so trainable == total
        trainable = bb + head
        return trainable, trainable
    return trainable, bb + trainable


def flops_forward(cfg: ExperimentConfig) -> metrics.FlopBreakdown:
    k = total_classes(cfg)
    method = cfg.effective_method()
    if method == "cada":
        adapter = (len(cfg.attach_layers()), cfg.adapter.m_proj + cfg.adapter.m_mlp)
        return metrics.forward_flops(cfg.backbone, k, adapter=adapter)
    if method == "prompt_pool":
        p = cfg.prompt
        return metrics.twopass_flops(cfg.backbone, k, p.pool_size, p.top_k, p.prompt_len)
    return metrics.forward_flops(cfg.backbone, k)


def summarize(cfg: ExperimentConfig, matrix: AccuracyMatrix,
              pre_train: list[float | None]) -> dict[str, object]:
    trainable, total = param_counts(cfg)
    have_pre = all(v is not None for v in pre_train[1:])
    out: dict[str, object] = {
        "method": cfg.effective_method(),
        "mode": cfg.mode,
        "seed": cfg.seed,
        "n_tasks": matrix.n_tasks,
        "a_n": metrics.a_n(matrix),
        "f_n": metrics.f_n(matrix),
        "bwt": metrics.bwt(matrix),
        "fwt": metrics.fwt(pre_train, chance_vector(cfg)) if have_pre else None,
        "param_trainable": trainable,
        "param_total": total,
        "param_fraction": trainable / total,
        "flops_forward": flops_forward(cfg).total,
    }
    return out


def render_kv(values: dict[str, object]) -> str:
    lines = []
    for k, v in values.items():
        if v is None:
            continue
        if isinstance(v, float):
            lines.append(f"{k} = {v:.10g}")
        else:
            lines.append(f"{k} = {v}")
    return "\n".join(lines) + "\n"


def parse_kv(text: str) -> dict[str, str]:
    out = {}
    for line in text.splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        k, _, v = line.partition("=")
        out[k.strip()] = v.strip()
    return out


# -- run directory ---------------------------------------------------------------


@dataclass
class RunArtifacts:
    out_dir: Path
    summary: dict[str, object]
    result: RunResult


def resolve_out_dir(cfg: ExperimentConfig) -> Path:
    if cfg.out_dir is not None:
        return Path(cfg.out_dir)
    root = os.environ.get(ENV_OUT_ROOT, "runs")
    tag = cfg.ablate if cfg.ablate else "none"
    return Path(root) / f"{cfg.method}-{cfg.mode}-ablate_{tag}-seed{cfg.seed}"


def execute(cfg: ExperimentConfig) -> RunArtifacts:
    """Run one experiment end to end and write its artifact directory."""
    with threadpool_limits(limits=1):
        stream = build_stream(cfg)
        backbone = pretrain_backbone(cfg, stream)
        result = dispatch(cfg, backbone, stream)

    csv_text = matrix_to_csv(result.matrix, result.pre_train)
    # summary scalars derive from the CSV's rounded values on purpose:
    # anyone holding the artifacts can reproduce summary.kv bit for bit
    parsed_matrix, parsed_pre = matrix_from_csv(csv_text)
    summary = summarize(cfg, parsed_matrix, parsed_pre)

    out_dir = resolve_out_dir(cfg)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config.kv").write_text(serialize_config(cfg), encoding="utf-8")
    (out_dir / "matrix.csv").write_text(csv_text, encoding="utf-8")
    (out_dir / "summary.kv").write_text(render_kv(summary), encoding="utf-8")
    if result.named_params:
        save_checkpoint(out_dir / "model.bin",
                        [(name, t.data, not t.requires_grad)
                         for name, t in result.named_params])
    return RunArtifacts(out_dir, summary, result)


def recheck_summary(run_dir: Path) -> tuple[str, str]:
    """Recompute summary.kv from matrix.csv + config.kv; return (stored, fresh)."""
    from .config import parse_config
    cfg = parse_config((run_dir / "config.kv").read_text(encoding="utf-8"))
    matrix, pre_train = matrix_from_csv((run_dir / "matrix.csv").read_text(encoding="utf-8"))
    fresh = render_kv(summarize(cfg, matrix, pre_train))
    stored = (run_dir / "summary.kv").read_text(encoding="utf-8")
    return stored, fresh
