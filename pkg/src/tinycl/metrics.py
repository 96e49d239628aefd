"""Accuracy-matrix bookkeeping and every reported quantity.

The accuracy matrix R is lower triangular: R[i][j] is test accuracy on
task j after training through task i (1-based, j <= i). Forward transfer
additionally needs each task's accuracy measured just before training it;
the protocol records that separately and the CSV form stores it on the
superdiagonal.

Parameter and FLOP figures are closed-form, never measured: FLOPs count
2*m*n*k per matmul on a single image; elementwise work is excluded.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .backbone import BackboneConfig
from .errors import ShapeError


@dataclass
class AccuracyMatrix:
    """Lower-triangular accuracy records, rows[i-1][j-1] = R[i][j]."""

    rows: list[list[float]]

    def __post_init__(self):
        for i, row in enumerate(self.rows, start=1):
            if len(row) != i:
                raise ShapeError(f"row {i} has {len(row)} entries, expected {i}")
            for v in row:
                if not (0.0 <= v <= 1.0):
                    raise ShapeError(f"accuracy {v} outside [0, 1]")

    @property
    def n_tasks(self) -> int:
        return len(self.rows)

    def acc(self, i: int, j: int) -> float:
        """R[i][j], 1-based, j <= i."""
        if not (1 <= j <= i <= self.n_tasks):
            raise ShapeError(f"R[{i}][{j}] is not a lower-triangular entry")
        return self.rows[i - 1][j - 1]


def a_n(matrix: AccuracyMatrix) -> float:
    """Final-row average accuracy over all tasks."""
    last = matrix.rows[-1]
    return sum(last) / len(last)


def f_n(matrix: AccuracyMatrix) -> float:
    """Average drop from each task's best pre-final accuracy to its final one."""
    t = matrix.n_tasks
    if t < 2:
        raise ShapeError("forgetting needs at least 2 tasks")
    total = 0.0
    for j in range(1, t):
        best = max(matrix.acc(i, j) for i in range(j, t))
        total += best - matrix.acc(t, j)
    return total / (t - 1)


def bwt(matrix: AccuracyMatrix) -> float:
    """Average final-row accuracy change relative to just-after-training."""
    t = matrix.n_tasks
    if t < 2:
        raise ShapeError("backward transfer needs at least 2 tasks")
    total = sum(matrix.acc(t, j) - matrix.acc(j, j) for j in range(1, t))
    return total / (t - 1)


def fwt(pre_train: list[float | None], chance: list[float]) -> float:
    """Average pre-training accuracy above chance, tasks 2..T.

    ``pre_train[j-1]`` is accuracy on task j before training it;
    ``chance[j-1]`` is the matching chance baseline. Index 0 is ignored.
    """
    t = len(pre_train)
    if t < 2 or len(chance) != t:
        raise ShapeError("forward transfer needs pre-training evals for tasks 2..T")
    total = 0.0
    for j in range(2, t + 1):
        if pre_train[j - 1] is None:
            raise ShapeError(f"missing pre-training evaluation for task {j}")
        total += pre_train[j - 1] - chance[j - 1]
    return total / (t - 1)


@dataclass
class MetricsReport:
    a_n: float
    f_n: float
    bwt: float
    fwt: float | None
    param_trainable: int
    param_total: int
    flops_forward: int

    def __post_init__(self):
        if self.param_trainable > self.param_total:
            raise ShapeError("trainable parameter count exceeds total")


# -- analytic parameter counting ------------------------------------------


def backbone_param_count(cfg: BackboneConfig) -> int:
    d, hidden = cfg.dim, cfg.mlp_hidden
    patch_in = cfg.patch_size**2 * 3
    per_block = (2 * d            # ln1
                 + d * 3 * d + 3 * d
                 + d * d + d      # proj
                 + 2 * d          # ln2
                 + d * hidden + hidden
                 + hidden * d + d)
    return (patch_in * d + d      # patch embed
            + d                   # cls
            + cfg.seq_len * d     # pos
            + cfg.depth * per_block
            + 2 * d)              # final norm


def adapter_param_count(dim: int, n_attach: int, middle_total: int,
                        include_ss: bool = True) -> int:
    """All per-task blocks at full budget: 2*D*m per layer, plus 2*D per S&S."""
    cal = n_attach * 2 * dim * middle_total
    ss = n_attach * 2 * (2 * dim) if include_ss else 0
    return cal + ss


def head_param_count(dim: int, n_classes: int) -> int:
    return dim * n_classes + n_classes


def count_trainable(backbone_cfg: BackboneConfig, n_attach: int, middle_total: int,
                    n_classes: int, include_ss: bool = True) -> tuple[int, int, float]:
    """(trainable, total, fraction) with the frozen backbone in the total."""
    trainable = adapter_param_count(backbone_cfg.dim, n_attach, middle_total, include_ss) \
        + head_param_count(backbone_cfg.dim, n_classes)
    total = backbone_param_count(backbone_cfg) + trainable
    return trainable, total, trainable / total


# -- analytic FLOP counting -------------------------------------------------


@dataclass
class FlopBreakdown:
    items: list[tuple[str, int]] = field(default_factory=list)

    def add(self, name: str, flops: int):
        self.items.append((name, int(flops)))

    @property
    def total(self) -> int:
        return sum(f for _, f in self.items)


def forward_flops(cfg: BackboneConfig, n_classes: int,
                  adapter: tuple[int, int] | None = None,
                  extra_tokens: int = 0) -> FlopBreakdown:
    """Matmul FLOPs of one image through the backbone plus head.

    ``adapter`` is (n_attach_layers, middle_total); ``extra_tokens`` models
    inserted prompt tokens, which lengthen every block's sequence.
    """
    d, hidden = cfg.dim, cfg.mlp_hidden
    n = cfg.seq_len + extra_tokens
    patch_in = cfg.patch_size**2 * 3
    bd = FlopBreakdown()
    bd.add("patch_embed", 2 * cfg.n_patches * patch_in * d)
    bd.add("qkv", cfg.depth * 2 * n * d * 3 * d)
    bd.add("attn_scores", cfg.depth * 2 * n * n * d)
    bd.add("attn_values", cfg.depth * 2 * n * n * d)
    bd.add("attn_proj", cfg.depth * 2 * n * d * d)
    bd.add("mlp", cfg.depth * 2 * (2 * n * d * hidden))
    if adapter is not None:
        n_attach, m_total = adapter
        bd.add("adapter", n_attach * 4 * n * d * m_total)
    bd.add("head", 2 * d * n_classes)
    return bd


def twopass_flops(cfg: BackboneConfig, n_classes: int, pool_size: int,
                  top_k: int, prompt_len: int) -> FlopBreakdown:
    """Query pass at full backbone cost, then a prompted pass plus matching."""
    bd = FlopBreakdown()
    for name, f in forward_flops(cfg, n_classes=0).items:
        if name != "head":
            bd.add(f"query.{name}", f)
    bd.add("key_match", 2 * pool_size * cfg.dim)
    for name, f in forward_flops(cfg, n_classes, extra_tokens=top_k * prompt_len).items:
        bd.add(f"main.{name}", f)
    return bd


def flop_ratio(cfg: BackboneConfig, n_classes: int, adapter: tuple[int, int],
               pool_size: int = 10, top_k: int = 5, prompt_len: int = 1) -> float:
    """Two-pass cost over adapter single-pass cost at the same backbone."""
    two = twopass_flops(cfg, n_classes, pool_size, top_k, prompt_len).total
    one = forward_flops(cfg, n_classes, adapter=adapter).total
    return two / one


def vitb_like_config() -> BackboneConfig:
    """Reference geometry for the analytic parameter and FLOP checks."""
    return BackboneConfig(image_size=224, patch_size=16, dim=768, depth=12,
                          heads=12, mlp_ratio=4, upstream_classes=0)


# -- canonical CSV form ------------------------------------------------------

# fixed cell format keeps run outputs byte-comparable
_CELL = "{:.6f}"


def matrix_to_csv(matrix: AccuracyMatrix, pre_train: list[float | None] | None = None) -> str:
    """Render R as CSV; pre-training evals sit on the superdiagonal.

    Row i holds R[i][1..i]; cell (i, i+1) holds task i+1's accuracy just
    before training it. Everything else above the diagonal is empty.
    """
    t = matrix.n_tasks
    if pre_train is not None and len(pre_train) != t:
        raise ShapeError(f"pre_train length {len(pre_train)} != {t} tasks")
    lines = ["after_task," + ",".join(f"task_{j}" for j in range(1, t + 1))]
    for i in range(1, t + 1):
        cells = [_CELL.format(matrix.acc(i, j)) for j in range(1, i + 1)]
        rest = [""] * (t - i)
        if pre_train is not None and i < t and pre_train[i] is not None:
            rest[0] = _CELL.format(pre_train[i])
        lines.append(f"{i}," + ",".join(cells + rest))
    return "\n".join(lines) + "\n"


def matrix_from_csv(text: str) -> tuple[AccuracyMatrix, list[float | None]]:
    """Inverse of matrix_to_csv; returns (matrix, pre_train)."""
    lines = [ln for ln in text.splitlines() if ln.strip()]
    header = lines[0].split(",")
    t = len(header) - 1
    if header[0] != "after_task" or len(lines) != t + 1:
        raise ShapeError("malformed accuracy-matrix CSV")
    rows: list[list[float]] = []
    pre_train: list[float | None] = [None] * t
    for i, ln in enumerate(lines[1:], start=1):
        cells = ln.split(",")
        if len(cells) != t + 1 or int(cells[0]) != i:
            raise ShapeError(f"malformed matrix row {i}")
        rows.append([float(c) for c in cells[1:i + 1]])
        if i < t and cells[i + 1] != "":
            pre_train[i] = float(cells[i + 1])
    return AccuracyMatrix(rows), pre_train
