"""Comparison methods.

Three reference points against the single-pass adapter method:

- a deliberately minimal key-query prompt pool that needs two backbone
  passes per batch (one to build the query, one with prompts inserted);
- classifier-only tuning on frozen features;
- naive full fine-tuning of an unfrozen backbone copy.

All three reuse the protocol's head, stream auditing, and result shapes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .backbone import Backbone
from .errors import ProtocolError, ShapeError
from .objectives import masked_cross_entropy
from .optim import Adam
from .metrics import AccuracyMatrix
from .protocol import Head, RunResult
from .streams import TaskStream
from .tensor import RngStream, Tensor


@dataclass
class PromptPool:
    keys: Tensor     # (M, D)
    prompts: Tensor  # (M, L_p, D)
    top_k: int

    def __post_init__(self):
        m = self.keys.shape[0]
        if not (1 <= self.top_k <= m):
            raise ShapeError(f"top_k {self.top_k} outside [1, {m}]")
        if self.prompts.shape[0] != m:
            raise ShapeError("keys and prompts disagree on pool size")

    @classmethod
    def create(cls, pool_size: int, prompt_len: int, dim: int, top_k: int,
               rng: RngStream) -> "PromptPool":
        bound = 1.0 / math.sqrt(dim)
        keys = Tensor(rng.uniform(-bound, bound, (pool_size, dim)), requires_grad=True)
        prompts = Tensor(rng.uniform(-bound, bound, (pool_size, prompt_len, dim)),
                         requires_grad=True)
        return cls(keys, prompts, top_k)

    @property
    def pool_size(self) -> int:
        return self.keys.shape[0]

    @property
    def prompt_len(self) -> int:
        return self.prompts.shape[1]

    def trainable_params(self) -> list[Tensor]:
        return [t for t in (self.keys, self.prompts) if t.requires_grad]


def _cosine_rows(keys: np.ndarray, query: np.ndarray) -> np.ndarray:
    qn = np.linalg.norm(query)
    if qn == 0.0:
        raise ShapeError("zero query vector")
    kn = np.linalg.norm(keys, axis=1)
    kn = np.where(kn == 0.0, 1.0, kn)
    return (keys @ query) / (kn * qn)


def select_prompts(pool: PromptPool, query: np.ndarray) -> list[int]:
    """Top-k key indices by cosine similarity; ties go to the lowest index."""
    sims = _cosine_rows(pool.keys.data, np.asarray(query, dtype=np.float64))
    order = np.argsort(-sims, kind="stable")
    return [int(i) for i in order[:pool.top_k]]


def select_prompts_batch(pool: PromptPool, queries: np.ndarray) -> np.ndarray:
    return np.stack([select_prompts(pool, q) for q in queries]).astype(np.int64)


def twopass_features(backbone: Backbone, pool: PromptPool, images: np.ndarray,
                     max_seq: int | None = None):
    """Query pass, prompt selection, prompted pass. Two traversals per call.

    Returns (features, selected indices (B, k), query features as ndarray).
    """
    if not backbone.frozen:
        raise ProtocolError("prompt baseline requires a frozen backbone")
    if max_seq is None:
        max_seq = 2 * backbone.config.seq_len
    extra = pool.top_k * pool.prompt_len
    if backbone.config.seq_len + extra > max_seq:
        raise ShapeError(f"prompted sequence {backbone.config.seq_len + extra} exceeds max {max_seq}")

    with T.no_grad():
        queries = backbone.query_features(images)
    q_np = queries.data.astype(np.float64)
    sel = select_prompts_batch(pool, q_np)

    b = images.shape[0]
    d = backbone.config.dim
    flat = T.reshape(pool.prompts, (pool.pool_size, pool.prompt_len * d))
    chosen = T.index_select0(flat, sel.reshape(-1))
    tokens = T.reshape(chosen, (b, pool.top_k * pool.prompt_len, d))
    feats = backbone.forward_features(images, extra_tokens=tokens)
    return feats, sel, q_np


def forward_twopass(backbone: Backbone, pool: PromptPool, head: Head,
                    images: np.ndarray, max_seq: int | None = None):
    """Two-pass forward through the head; see twopass_features."""
    feats, sel, q_np = twopass_features(backbone, pool, images, max_seq)
    return head.logits(feats), sel, q_np


def pull_loss(pool: PromptPool, sel: np.ndarray, queries: np.ndarray) -> Tensor:
    """Mean (1 - cosine) between each query and its selected keys."""
    k = sel.shape[1]
    keys_sel = T.index_select0(pool.keys, sel.reshape(-1))
    q_rep = np.repeat(queries, k, axis=0).astype(pool.keys.dtype)
    cos = T.row_cosine(q_rep, keys_sel)
    ones = Tensor(np.ones(cos.shape, dtype=cos.dtype))
    return T.mean(ones - cos)


# -- shared loop pieces -------------------------------------------------------


def _columns(head: Head, y: np.ndarray) -> np.ndarray:
    return np.array([head.column_of[int(c)] for c in y], dtype=np.int64)


def _grow_head(head: Head, stream: TaskStream, t: int, rng: RngStream) -> np.ndarray:
    """Append the task's slice (CIL) or ensure the shared one (DIL)."""
    if stream.mode == "cil":
        head.append_slice(t, sorted(stream.label_set(t)), rng)
        return np.array([head.column_of[c] for c in stream.label_set(t)], dtype=np.int64)
    if not head.slices:
        head.append_slice(1, sorted(stream.label_set(1)), rng)
    return np.arange(head.n_columns, dtype=np.int64)


def _head_accuracy(head: Head, feats: np.ndarray, y: np.ndarray) -> float:
    with T.no_grad():
        logits = head.logits(Tensor(feats))
    ids = np.array(head.class_ids(), dtype=np.int64)
    return float((ids[np.argmax(logits.data, axis=1)] == y).mean())


# -- classifier-only ------------------------------------------------------------


def classifier_only_train(backbone: Backbone, stream: TaskStream, rng: RngStream, *,
                          epochs: int = 20, lr: float = 5e-3, batch_size: int = 32,
                          eval_batch: int = 256, probe: np.ndarray | None = None) -> RunResult:
    """Head-only tuning on frozen features; backbone and adapters absent
    from the gradient set (features are computed once per split)."""
    if not backbone.frozen:
        raise ProtocolError("classifier-only baseline requires a frozen backbone")
    head = Head(backbone.config.dim)

    def features(x: np.ndarray) -> np.ndarray:
        out = []
        with T.no_grad():
            for s in range(0, len(x), eval_batch):
                out.append(backbone.forward_features(x[s:s + eval_batch]).data.copy())
        return np.concatenate(out)

    probe_feats = None if probe is None else features(probe)
    test_feats: dict[int, tuple[np.ndarray, np.ndarray]] = {}
    rows, pre_train, chance = [], [], []
    for t in range(1, stream.n_tasks + 1):
        current_cols = _grow_head(head, stream, t, rng.child(f"head/t{t}"))
        tx, ty = stream.test_arrays(t)
        test_feats[t] = (features(tx), ty)
        pre_train.append(_head_accuracy(head, *test_feats[t]))
        chance.append(1.0 / head.n_columns)

        with stream.training(t) as audit:
            x, y = stream.train_arrays(t)
            fx = features(x)
            cols = _columns(head, y)
            opt = Adam(head.trainable_params(), lr=lr)
            shuffle = rng.child(f"shuffle/t{t}")
            steps_per = max(1, math.ceil(len(fx) / batch_size))
            step = 0
            for _ in range(epochs):
                order = shuffle.permutation(len(fx))
                for s in range(0, len(fx), batch_size):
                    batch = order[s:s + batch_size]
                    opt.set_cosine_lr(step, epochs * steps_per)
                    opt.zero_grad()
                    logits = head.logits(Tensor(fx[batch]))
                    loss = masked_cross_entropy(logits, cols[batch], current_cols)
                    loss.backward()
                    opt.step()
                    step += 1
            if audit.old_task_train_reads():
                raise ProtocolError(f"task {t} training read earlier tasks' train data")
        if stream.mode == "cil":
            head.freeze_task(t)
            head.calibrate(fx if probe_feats is None else probe_feats,
                           current_task=t,
                           current_features=None if probe_feats is None else fx)
        rows.append([_head_accuracy(head, *test_feats[j]) for j in range(1, t + 1)])
    return RunResult(AccuracyMatrix(rows), pre_train, chance, model=None, audit=stream.audit,
                     named_params=head.named_params())


# -- full fine-tune ---------------------------------------------------------------


def full_finetune_train(backbone: Backbone, stream: TaskStream, rng: RngStream, *,
                        epochs: int = 4, lr: float = 1e-3, batch_size: int = 32,
                        eval_batch: int = 256, probe: np.ndarray | None = None) -> RunResult:
    """Everything unfrozen on a copy; the canonical forgetting reference."""
    net = backbone.unfrozen_copy()
    head = Head(net.config.dim)

    def accuracy(j: int) -> float:
        x, y = stream.test_arrays(j)
        ids = np.array(head.class_ids(), dtype=np.int64)
        correct = 0
        with T.no_grad():
            for s in range(0, len(x), eval_batch):
                logits = head.logits(net.forward_features(x[s:s + eval_batch]))
                correct += int((ids[np.argmax(logits.data, axis=1)] == y[s:s + eval_batch]).sum())
        return correct / len(x)

    rows, pre_train, chance = [], [], []
    for t in range(1, stream.n_tasks + 1):
        current_cols = _grow_head(head, stream, t, rng.child(f"head/t{t}"))
        pre_train.append(accuracy(t))
        chance.append(1.0 / head.n_columns)

        with stream.training(t) as audit:
            x, y = stream.train_arrays(t)
            cols = _columns(head, y)
            opt = Adam(net.trainable_params() + head.trainable_params(), lr=lr)
            shuffle = rng.child(f"shuffle/t{t}")
            steps_per = max(1, math.ceil(len(x) / batch_size))
            step = 0
            for _ in range(epochs):
                order = shuffle.permutation(len(x))
                for s in range(0, len(x), batch_size):
                    batch = order[s:s + batch_size]
                    opt.set_cosine_lr(step, epochs * steps_per)
                    opt.zero_grad()
                    logits = head.logits(net.forward_features(x[batch]))
                    loss = masked_cross_entropy(logits, cols[batch], current_cols)
                    loss.backward()
                    opt.step()
                    step += 1
            if audit.old_task_train_reads():
                raise ProtocolError(f"task {t} training read earlier tasks' train data")
            if stream.mode == "cil":
                def feats(arr: np.ndarray) -> np.ndarray:
                    parts = []
                    with T.no_grad():
                        for s in range(0, len(arr), eval_batch):
                            parts.append(net.forward_features(arr[s:s + eval_batch]).data)
                    return np.concatenate(parts)
                ref = x if probe is None else probe
                cur = None if probe is None else feats(x)
                head.calibrate(feats(ref), current_task=t, current_features=cur)
        rows.append([accuracy(j) for j in range(1, t + 1)])
    return RunResult(AccuracyMatrix(rows), pre_train, chance, model=None, audit=stream.audit,
                     named_params=net.param_items() + head.named_params())


# -- prompt pool -------------------------------------------------------------------


def prompt_pool_train(backbone: Backbone, stream: TaskStream, rng: RngStream, *,
                      pool_size: int = 10, prompt_len: int = 1, top_k: int = 2,
                      pull_coef: float = 0.5, epochs: int = 20, lr: float = 5e-3,
                      batch_size: int = 32, eval_batch: int = 256,
                      probe: np.ndarray | None = None) -> RunResult:
    """Two-pass key-query prompt baseline over the same protocol loop."""
    if not backbone.frozen:
        raise ProtocolError("prompt baseline requires a frozen backbone")
    pool = PromptPool.create(pool_size, prompt_len, backbone.config.dim, top_k,
                             rng.child("pool"))
    head = Head(backbone.config.dim)

    def accuracy(j: int) -> float:
        x, y = stream.test_arrays(j)
        ids = np.array(head.class_ids(), dtype=np.int64)
        correct = 0
        with T.no_grad():
            for s in range(0, len(x), eval_batch):
                logits, _, _ = forward_twopass(backbone, pool, head, x[s:s + eval_batch])
                correct += int((ids[np.argmax(logits.data, axis=1)] == y[s:s + eval_batch]).sum())
        return correct / len(x)

    rows, pre_train, chance = [], [], []
    for t in range(1, stream.n_tasks + 1):
        current_cols = _grow_head(head, stream, t, rng.child(f"head/t{t}"))
        pre_train.append(accuracy(t))
        chance.append(1.0 / head.n_columns)

        with stream.training(t) as audit:
            x, y = stream.train_arrays(t)
            cols = _columns(head, y)
            opt = Adam(pool.trainable_params() + head.trainable_params(), lr=lr)
            shuffle = rng.child(f"shuffle/t{t}")
            steps_per = max(1, math.ceil(len(x) / batch_size))
            step = 0
            for _ in range(epochs):
                order = shuffle.permutation(len(x))
                for s in range(0, len(x), batch_size):
                    batch = order[s:s + batch_size]
                    opt.set_cosine_lr(step, epochs * steps_per)
                    opt.zero_grad()
                    logits, sel, queries = forward_twopass(backbone, pool, head, x[batch])
                    loss = masked_cross_entropy(logits, cols[batch], current_cols)
                    if pull_coef != 0.0:
                        loss = loss + T.scale(pull_loss(pool, sel, queries), pull_coef)
                    loss.backward()
                    opt.step()
                    step += 1
            if audit.old_task_train_reads():
                raise ProtocolError(f"task {t} training read earlier tasks' train data")
            if stream.mode == "cil":
                def feats(arr: np.ndarray) -> np.ndarray:
                    parts = []
                    with T.no_grad():
                        for s in range(0, len(arr), eval_batch):
                            f, _, _ = twopass_features(backbone, pool, arr[s:s + eval_batch])
                            parts.append(f.data)
                    return np.concatenate(parts)
                ref = x if probe is None else probe
                cur = None if probe is None else feats(x)
                head.calibrate(feats(ref), current_task=t, current_features=cur)
        if stream.mode == "cil":
            head.freeze_task(t)
        rows.append([accuracy(j) for j in range(1, t + 1)])
    return RunResult(AccuracyMatrix(rows), pre_train, chance, model=None, audit=stream.audit,
                     named_params=[("pool.keys", pool.keys), ("pool.prompts", pool.prompts)]
                     + head.named_params())
