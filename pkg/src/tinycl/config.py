"""Experiment configuration: plain ``key = value`` text, dotted keys.

An empty file is a complete config (every field has a default). Unknown
keys, bad types, and out-of-range values are rejected with the offending
line number. ``serialize_config`` emits a canonical sorted form that
round-trips through ``parse_config``.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

from .backbone import BackboneConfig
from .errors import ConfigError

METHODS = ("cada", "prompt_pool", "classifier_only", "full_ft")
MODES = ("cil", "dil")
ABLATIONS = ("ss", "or_loss", "cal")


@dataclass(frozen=True)
class AdapterConfig:
    attach_layers: tuple[int, ...] | None = None  # None: scale with depth
    m_proj: int = 40
    m_mlp: int = 20
    lam: float = 0.1
    delta: float = 1.0


@dataclass(frozen=True)
class StreamConfig:
    n_tasks: int = 5
    classes_per_task: int = 4
    per_class: int = 250
    seed: int | None = None        # None: follow the run seed
    shuffle_seed: int | None = None


@dataclass(frozen=True)
class TrainConfig:
    pretrain_epochs: int = 4
    pretrain_lr: float = 2e-3
    phase0_epochs: int = 5
    phase0_lr: float = 5e-3
    task_epochs: int = 20
    lr: float = 5e-3
    batch_size: int = 32
    eval_batch: int = 256


@dataclass(frozen=True)
class PromptConfig:
    pool_size: int = 10
    prompt_len: int = 1
    top_k: int = 2
    pull_coef: float = 0.5


@dataclass(frozen=True)
class ExperimentConfig:
    method: str = "cada"
    mode: str = "cil"
    ablate: str | None = None
    seed: int = 0
    out_dir: str | None = None
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    adapter: AdapterConfig = field(default_factory=AdapterConfig)
    stream: StreamConfig = field(default_factory=StreamConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    prompt: PromptConfig = field(default_factory=PromptConfig)

    def stream_seed(self) -> int:
        return self.seed if self.stream.seed is None else self.stream.seed

    def effective_method(self) -> str:
        """Ablating the adapter layers degenerates into classifier-only."""
        return "classifier_only" if self.ablate == "cal" else self.method

    def effective_delta(self) -> float:
        return 0.0 if self.ablate == "or_loss" else self.adapter.delta

    def attach_layers(self) -> list[int]:
        if self.adapter.attach_layers is not None:
            return list(self.adapter.attach_layers)
        return self.backbone.default_attach_layers()


# -- parsing -------------------------------------------------------------------


def _parse_int(raw: str) -> int:
    return int(raw, 10)


def _parse_float(raw: str) -> float:
    return float(raw)


def _parse_str(raw: str) -> str:
    return raw


def _parse_int_list(raw: str) -> tuple[int, ...]:
    return tuple(int(p.strip(), 10) for p in raw.split(",") if p.strip())


def _positive(v):
    if v <= 0:
        raise ValueError("must be positive")
    return v


def _nonnegative(v):
    if v < 0:
        raise ValueError("must be >= 0")
    return v


def _choice(options):
    def check(v):
        if v not in options:
            raise ValueError(f"must be one of {', '.join(options)}")
        return v
    return check


def _identity(v):
    return v


# key -> (section, field, parse, validate)
_SCHEMA = {
    "method": (None, "method", _parse_str, _choice(METHODS)),
    "mode": (None, "mode", _parse_str, _choice(MODES)),
    "ablate": (None, "ablate", _parse_str, _choice(ABLATIONS)),
    "seed": (None, "seed", _parse_int, _nonnegative),
    "out_dir": (None, "out_dir", _parse_str, _identity),
    "backbone.image_size": ("backbone", "image_size", _parse_int, _positive),
    "backbone.patch_size": ("backbone", "patch_size", _parse_int, _positive),
    "backbone.dim": ("backbone", "dim", _parse_int, _positive),
    "backbone.depth": ("backbone", "depth", _parse_int, _positive),
    "backbone.heads": ("backbone", "heads", _parse_int, _positive),
    "backbone.mlp_ratio": ("backbone", "mlp_ratio", _parse_int, _positive),
    "backbone.upstream_classes": ("backbone", "upstream_classes", _parse_int, _positive),
    "adapter.attach_layers": ("adapter", "attach_layers", _parse_int_list, _identity),
    "adapter.m_proj": ("adapter", "m_proj", _parse_int, _nonnegative),
    "adapter.m_mlp": ("adapter", "m_mlp", _parse_int, _nonnegative),
    "adapter.lambda": ("adapter", "lam", _parse_float, _identity),
    "adapter.delta": ("adapter", "delta", _parse_float, _identity),
    "stream.n_tasks": ("stream", "n_tasks", _parse_int, _positive),
    "stream.classes_per_task": ("stream", "classes_per_task", _parse_int, _positive),
    "stream.per_class": ("stream", "per_class", _parse_int, _positive),
    "stream.seed": ("stream", "seed", _parse_int, _nonnegative),
    "stream.shuffle_seed": ("stream", "shuffle_seed", _parse_int, _nonnegative),
    "train.pretrain_epochs": ("train", "pretrain_epochs", _parse_int, _nonnegative),
    "train.pretrain_lr": ("train", "pretrain_lr", _parse_float, _positive),
    "train.phase0_epochs": ("train", "phase0_epochs", _parse_int, _nonnegative),
    "train.phase0_lr": ("train", "phase0_lr", _parse_float, _positive),
    "train.task_epochs": ("train", "task_epochs", _parse_int, _positive),
    "train.lr": ("train", "lr", _parse_float, _positive),
    "train.batch_size": ("train", "batch_size", _parse_int, _positive),
    "train.eval_batch": ("train", "eval_batch", _parse_int, _positive),
    "prompt.pool_size": ("prompt", "pool_size", _parse_int, _positive),
    "prompt.prompt_len": ("prompt", "prompt_len", _parse_int, _nonnegative),
    "prompt.top_k": ("prompt", "top_k", _parse_int, _positive),
    "prompt.pull_coef": ("prompt", "pull_coef", _parse_float, _identity),
}

_SECTIONS = {"backbone": BackboneConfig, "adapter": AdapterConfig,
             "stream": StreamConfig, "train": TrainConfig, "prompt": PromptConfig}


def parse_config(text: str) -> ExperimentConfig:
    top: dict = {}
    sections: dict[str, dict] = {name: {} for name in _SECTIONS}
    for line_no, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError("expected 'key = value'", line_no, raw)
        key, _, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if key not in _SCHEMA:
            raise ConfigError(f"unknown key {key!r}", line_no, raw)
        section, attr, parse, validate = _SCHEMA[key]
        try:
            parsed = validate(parse(value))
        except ValueError as exc:
            raise ConfigError(f"bad value for {key!r}: {exc}", line_no, raw) from None
        if section is None:
            top[attr] = parsed
        else:
            sections[section][attr] = parsed

    try:
        cfg = ExperimentConfig(
            **top,
            backbone=BackboneConfig(**sections["backbone"]),
            adapter=AdapterConfig(**sections["adapter"]),
            stream=StreamConfig(**sections["stream"]),
            train=TrainConfig(**sections["train"]),
            prompt=PromptConfig(**sections["prompt"]),
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    _cross_validate(cfg)
    return cfg


def _cross_validate(cfg: ExperimentConfig):
    for layer in cfg.attach_layers():
        if not (0 <= layer < cfg.backbone.depth):
            raise ConfigError(f"attach layer {layer} outside backbone depth {cfg.backbone.depth}")
    if len(set(cfg.attach_layers())) != len(cfg.attach_layers()):
        raise ConfigError(f"duplicate attach layers {cfg.attach_layers()}")
    if cfg.prompt.top_k > cfg.prompt.pool_size:
        raise ConfigError(f"prompt.top_k {cfg.prompt.top_k} exceeds pool size {cfg.prompt.pool_size}")
    if cfg.method in ("cada",) and cfg.ablate != "cal":
        per_proj = cfg.adapter.m_proj // cfg.stream.n_tasks
        per_mlp = cfg.adapter.m_mlp // cfg.stream.n_tasks
        if per_proj < 1 or per_mlp < 1:
            raise ConfigError(
                f"middle widths ({cfg.adapter.m_proj}, {cfg.adapter.m_mlp}) cannot cover "
                f"{cfg.stream.n_tasks} tasks at >= 1 column each")


def load_config(path) -> ExperimentConfig:
    try:
        with open(path, encoding="utf-8") as fh:
            return parse_config(fh.read())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None


# -- canonical serialization ---------------------------------------------------


def _format_value(v) -> str:
    if isinstance(v, tuple):
        return ",".join(str(x) for x in v)
    if isinstance(v, float):
        return f"{v:.10g}"
    return str(v)


def serialize_config(cfg: ExperimentConfig) -> str:
    """Sorted ``key = value`` lines; omits unset optional keys."""
    values: dict[str, object] = {}
    for key, (section, attr, _, _) in _SCHEMA.items():
        obj = cfg if section is None else getattr(cfg, section)
        v = getattr(obj, attr)
        if v is None:
            continue
        values[key] = v
    return "".join(f"{k} = {_format_value(values[k])}\n" for k in sorted(values))


def with_overrides(cfg: ExperimentConfig, **top_level) -> ExperimentConfig:
    return replace(cfg, **top_level)


def default_key_table() -> list[tuple[str, str]]:
    """(key, default) rows for documentation; unset optionals show '-'."""
    rows = []
    defaults = ExperimentConfig()
    for key, (section, attr, _, _) in sorted(_SCHEMA.items()):
        obj = defaults if section is None else getattr(defaults, section)
        v = getattr(obj, attr)
        rows.append((key, "-" if v is None else _format_value(v)))
    return rows
