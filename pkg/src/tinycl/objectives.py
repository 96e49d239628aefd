"""Training objectives: masked cross-entropy plus a cross-task
interference penalty on newly added adapter directions.

Masking replaces logits of classes outside the current task with a huge
negative constant via multiply-and-add, so those columns contribute
exactly zero probability and exactly zero gradient, without putting a
literal infinity into the graph.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ShapeError
from .tensor import Tensor

# half of most-negative-finite float32: survives max-subtraction untouched
MASK_FILL = float(np.finfo(np.float32).min) / 2.0


def cross_entropy(logits: Tensor, label_cols: np.ndarray) -> Tensor:
    """Mean cross-entropy; labels are column indices into the logits."""
    b, k = logits.shape
    label_cols = np.asarray(label_cols, dtype=np.int64)
    if label_cols.shape != (b,):
        raise ShapeError(f"labels shape {label_cols.shape} does not match batch {b}")
    if label_cols.min() < 0 or label_cols.max() >= k:
        raise ShapeError(f"label column out of range for {k} logits")
    onehot = np.zeros((b, k), dtype=logits.dtype)
    onehot[np.arange(b), label_cols] = 1.0
    lse = T.logsumexp(logits, axis=1)
    picked = T.tensor_sum(T.mul(logits, Tensor(onehot)), axis=1)
    return T.mean(lse - picked)


def masked_cross_entropy(logits: Tensor, label_cols: np.ndarray,
                         current_cols: np.ndarray) -> Tensor:
    """Cross-entropy restricted to the current task's logit columns."""
    b, k = logits.shape
    mask = np.zeros(k, dtype=logits.dtype)
    mask[np.asarray(current_cols, dtype=np.int64)] = 1.0
    if mask.sum() == 0:
        raise ShapeError("empty current-task column set")
    labels = np.asarray(label_cols, dtype=np.int64)
    if not np.all(mask[labels] == 1.0):
        raise ShapeError("training label outside the current-task column set")
    fill = Tensor((MASK_FILL * (1.0 - mask)).astype(logits.dtype))
    masked = T.mul(logits, Tensor(mask)) + fill
    return cross_entropy(masked, labels)


def orthogonal_loss(adapters) -> Tensor | None:
    """Frobenius overlap of the newest block with all earlier blocks.

    None when no site has an earlier block to interfere with (first task).
    """
    terms = []
    for site in adapters.current_task_sites():
        if len(site.blocks) < 2:
            continue
        new = site.blocks[-1]
        prev_dp = Tensor(np.concatenate([b.w_dp.data for b in site.blocks[:-1]], axis=1))
        prev_up = Tensor(np.concatenate([b.w_up.data for b in site.blocks[:-1]], axis=0))
        cross_dp = T.matmul(T.transpose(new.w_dp, (1, 0)), prev_dp)
        cross_up = T.matmul(new.w_up, T.transpose(prev_up, (1, 0)))
        terms.append(T.frobenius_norm(cross_dp) + T.frobenius_norm(cross_up))
    if not terms:
        return None
    total = terms[0]
    for term in terms[1:]:
        total = total + term
    return total


@dataclass
class LossBreakdown:
    ce: Tensor
    or_loss: Tensor | None
    total: Tensor

    @property
    def ce_value(self) -> float:
        return float(self.ce.data)

    @property
    def or_value(self) -> float:
        return 0.0 if self.or_loss is None else float(self.or_loss.data)

    @property
    def total_value(self) -> float:
        return float(self.total.data)


def total_loss(logits: Tensor, label_cols: np.ndarray, current_cols: np.ndarray,
               adapters=None, delta: float = 1.0) -> LossBreakdown:
    """Masked cross-entropy plus delta times the interference penalty."""
    ce = masked_cross_entropy(logits, label_cols, current_cols)
    or_term = None
    if adapters is not None and delta != 0.0:
        or_term = orthogonal_loss(adapters)
    total = ce if or_term is None else ce + T.scale(or_term, delta)
    return LossBreakdown(ce, or_term, total)
