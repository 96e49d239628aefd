"""Continual-learning orchestration.

Order of operations per run: an optional scale-and-shift warmup on the
first task's data (after which those modules are frozen for good), then
for each task in order: expand adapter capacity, append a head slice,
record the task's accuracy before training it (forward-transfer entry),
train on that task's data only, freeze, and evaluate on every task seen.

Training reads go through the stream's access auditor; a read of an
earlier task's train split during task t is a protocol violation, which
keeps the whole pipeline rehearsal-free by construction rather than by
promise.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .adapters import AdapterSet
from .backbone import Backbone
from .errors import ProtocolError, ShapeError
from .objectives import total_loss
from .optim import Adam
from .metrics import AccuracyMatrix
from .streams import AccessAudit, TaskStream
from .tensor import RngStream, Tensor


# Floor on the per-column logit spread used to standardize a head slice
# against the reference batch; guards against division blow-up on
# degenerate columns. See Head.calibrate.
CALIBRATION_MIN_SPREAD = 1e-3


@dataclass
class HeadSlice:
    task: int
    class_ids: tuple[int, ...]
    w: Tensor  # (D, k)
    b: Tensor  # (k,)
    # per-column logit calibration bookkeeping, not trained; see Head.calibrate
    gain: np.ndarray | None = None
    shift: np.ndarray | None = None

    def freeze(self):
        for t in (self.w, self.b):
            t.requires_grad = False
            t.grad = None


class Head:
    """Per-task logit slices over a growing class set.

    CIL appends one slice per task and freezes past slices; DIL keeps a
    single shared slice that stays trainable across domains.
    """

    def __init__(self, dim: int):
        self.dim = dim
        self.slices: list[HeadSlice] = []
        self.column_of: dict[int, int] = {}

    def append_slice(self, task: int, class_ids: list[int], rng: RngStream, dtype=np.float32):
        for c in class_ids:
            if c in self.column_of:
                raise ProtocolError(f"class {c} already has a head column")
        k = len(class_ids)
        bound = 1.0 / math.sqrt(self.dim)
        w = Tensor(rng.uniform(-bound, bound, (self.dim, k), dtype=dtype), requires_grad=True)
        b = Tensor(np.zeros(k, dtype=dtype), requires_grad=True)
        base = self.n_columns
        for i, c in enumerate(class_ids):
            self.column_of[c] = base + i
        self.slices.append(HeadSlice(task, tuple(class_ids), w, b))

    @property
    def n_columns(self) -> int:
        return sum(len(s.class_ids) for s in self.slices)

    def class_ids(self) -> list[int]:
        out = []
        for s in self.slices:
            out.extend(s.class_ids)
        return out

    def logits(self, features: Tensor) -> Tensor:
        if not self.slices:
            raise ProtocolError("head has no slices yet")
        parts = []
        for s in self.slices:
            raw = T.matmul(features, s.w) + s.b
            if s.gain is not None:
                raw = T.mul(raw, Tensor(s.gain.astype(raw.dtype))) + Tensor(
                    s.shift.astype(raw.dtype))
            parts.append(raw)
        return parts[0] if len(parts) == 1 else T.concat(parts, axis=1)

    def freeze_task(self, task: int):
        for s in self.slices:
            if s.task == task:
                s.freeze()

    def slice_columns(self, task: int) -> list[int]:
        for s in self.slices:
            if s.task == task:
                return [self.column_of[c] for c in s.class_ids]
        raise ProtocolError(f"no head slice for task {task}")

    def calibrate(self, reference_features: np.ndarray,
                  current_task: int | None = None,
                  current_features: np.ndarray | None = None):
        """Standardize every logit column against its slice's null content.

        The masked loss determines a slice's columns only up to a positive
        rescale and a shared shift: within-slice argmax is invariant to
        both, but cross-slice argmax at inference is not, and slices trained
        later tend to end with systematically larger logits. Every column is
        therefore normalized to zero mean and unit spread on content that is
        not its slice's own: the fixed reference batch, plus, for slices
        other than ``current_task``, the current task's features (foreign to
        them, and the freshest sample of what newly added capacity does to
        their responses). On null content every calibrated column is then on
        the same footing, so each slice's best guess is a max over equally
        scaled scores and no slice outranks another by logit scale alone; a
        slice wins routing exactly to the extent some column responds above
        its null level, i.e. to the extent its features separate its classes
        from the rest of the world. Recomputing after each task keeps old
        slices' baselines in step with feature drift; no past task's data is
        ever touched.
        """
        for s in self.slices:
            ref = reference_features
            if current_features is not None and s.task != current_task:
                ref = np.concatenate([reference_features, current_features])
            cols = ref @ s.w.data + s.b.data
            spread = np.maximum(cols.std(axis=0), CALIBRATION_MIN_SPREAD)
            s.gain = (1.0 / spread).astype(np.float32)
            s.shift = (-s.gain * cols.mean(axis=0)).astype(np.float32)

    def trainable_params(self) -> list[Tensor]:
        out = []
        for s in self.slices:
            for t in (s.w, s.b):
                if t.requires_grad:
                    out.append(t)
        return out

    def named_params(self) -> list[tuple[str, Tensor]]:
        out = []
        for s in self.slices:
            out.append((f"head.t{s.task}.w", s.w))
            out.append((f"head.t{s.task}.b", s.b))
            k = len(s.class_ids)
            gain = np.ones(k, dtype=np.float32) if s.gain is None else s.gain
            shift = np.zeros(k, dtype=np.float32) if s.shift is None else s.shift
            out.append((f"head.t{s.task}.calib",
                        Tensor(np.concatenate([gain, shift]))))
        return out


class ContinualModel:
    """Frozen backbone + extensible adapters + growing head."""

    def __init__(self, backbone: Backbone, adapters: AdapterSet | None, mode: str):
        if not backbone.frozen:
            raise ProtocolError("backbone must be frozen before continual training")
        if mode not in ("cil", "dil"):
            raise ShapeError(f"mode must be 'cil' or 'dil', got {mode!r}")
        self.backbone = backbone
        self.adapters = adapters
        self.head = Head(backbone.config.dim)
        self.mode = mode
        self.trained_tasks = 0

    def forward(self, images: np.ndarray) -> Tensor:
        feats = self.backbone.forward_features(images, self.adapters)
        return self.head.logits(feats)

    def named_params(self) -> list[tuple[str, Tensor]]:
        out = list(self.backbone.param_items())
        if self.adapters is not None:
            out.extend(self.adapters.named_params())
        out.extend(self.head.named_params())
        return out


@dataclass
class RunResult:
    matrix: AccuracyMatrix
    pre_train: list[float | None]
    chance: list[float]
    model: "ContinualModel | None"
    audit: AccessAudit | None = None
    named_params: list[tuple[str, Tensor]] | None = None


# -- phase 0 -----------------------------------------------------------------


def phase0_train_ss(model: ContinualModel, stream: TaskStream, epochs: int,
                    rng: RngStream, lr: float = 5e-3, batch_size: int = 32) -> ContinualModel:
    """Warm up scale-and-shift on the first task through a throwaway head.

    Must run before any capacity expansion. Freezes every scale-and-shift
    module afterward; the temporary head never leaves this function.
    """
    ada = model.adapters
    if ada is None:
        raise ProtocolError("scale-and-shift warmup needs adapter sites")
    if ada.task_count > 0:
        raise ProtocolError("scale-and-shift warmup must precede any expansion")
    if ada.ss_frozen():
        raise ProtocolError("scale-and-shift modules are already frozen")

    classes = sorted(stream.label_set(1))
    col = {c: i for i, c in enumerate(classes)}
    dim = model.backbone.config.dim
    bound = 1.0 / math.sqrt(dim)
    tmp_w = Tensor(rng.child("tmp-head").uniform(-bound, bound, (dim, len(classes))), requires_grad=True)
    tmp_b = Tensor(np.zeros(len(classes), dtype=np.float32), requires_grad=True)

    ss_params = [t for site in ada.sites.values() for t in (site.ss.alpha, site.ss.beta)]
    opt = Adam(ss_params + [tmp_w, tmp_b], lr=lr)
    shuffle = rng.child("shuffle")

    with stream.training(1):
        x, y = stream.train_arrays(1)
        cols = np.array([col[int(c)] for c in y], dtype=np.int64)
        steps_per = max(1, math.ceil(len(x) / batch_size))
        total_steps = epochs * steps_per
        step = 0
        for _ in range(epochs):
            order = shuffle.permutation(len(x))
            for s in range(0, len(x), batch_size):
                batch = order[s:s + batch_size]
                opt.set_cosine_lr(step, total_steps)
                opt.zero_grad()
                feats = model.backbone.forward_features(x[batch], ada)
                logits = T.matmul(feats, tmp_w) + tmp_b
                loss = total_loss(logits, cols[batch], np.arange(len(classes)), adapters=None).total
                loss.backward()
                opt.step()
                step += 1

    ada.freeze_ss()
    return model


def freeze_ss_identity(model: ContinualModel) -> ContinualModel:
    """Ablation path: skip the warmup, freeze scale-and-shift at identity."""
    if model.adapters is None:
        raise ProtocolError("no adapter sites to freeze")
    if model.adapters.task_count > 0:
        raise ProtocolError("scale-and-shift must be settled before any expansion")
    model.adapters.freeze_ss()
    return model


# -- per-task training ---------------------------------------------------------


def train_task(model: ContinualModel, stream: TaskStream, t: int, epochs: int,
               rng: RngStream, lr: float = 5e-3, batch_size: int = 32,
               delta: float = 1.0, probe: np.ndarray | None = None) -> tuple[float, float]:
    """Expand, train on task t only, freeze. Returns (pre_train_acc, chance).

    The pre-training accuracy is measured right after expansion and head
    growth, so the forward-transfer entry reflects transferred features
    under a fresh untouched head slice. ``probe`` is the reference batch for
    head-slice calibration; without one, the slice is standardized on its
    own training features, which fixes logit growth but not the own-versus-
    foreign response level.
    """
    if t != model.trained_tasks + 1:
        raise ProtocolError(f"tasks must be trained in order: expected {model.trained_tasks + 1}, got {t}")
    ada = model.adapters
    if ada is None:
        raise ProtocolError("adapter-based training needs adapter sites")
    if not ada.ss_frozen():
        raise ProtocolError("run the scale-and-shift warmup (or its ablation) before task 1")

    ada.expand_for_task(rng.child(f"expand/t{t}"))
    if model.mode == "cil":
        model.head.append_slice(t, sorted(stream.label_set(t)), rng.child(f"head/t{t}"))
        current_cols = np.array([model.head.column_of[c] for c in stream.label_set(t)], dtype=np.int64)
    else:
        if not model.head.slices:
            model.head.append_slice(1, sorted(stream.label_set(1)), rng.child("head/shared"))
        current_cols = np.arange(model.head.n_columns, dtype=np.int64)

    pre_acc = evaluate_task(model, stream, t)
    chance = 1.0 / model.head.n_columns

    params = ada.trainable_params() + model.head.trainable_params()
    opt = Adam(params, lr=lr)
    shuffle = rng.child(f"shuffle/t{t}")

    with stream.training(t) as audit:
        x, y = stream.train_arrays(t)
        cols = np.array([model.head.column_of[int(c)] for c in y], dtype=np.int64)
        steps_per = max(1, math.ceil(len(x) / batch_size))
        total_steps = epochs * steps_per
        step = 0
        for _ in range(epochs):
            order = shuffle.permutation(len(x))
            for s in range(0, len(x), batch_size):
                batch = order[s:s + batch_size]
                opt.set_cosine_lr(step, total_steps)
                opt.zero_grad()
                logits = model.forward(x[batch])
                loss = total_loss(logits, cols[batch], current_cols, adapters=ada, delta=delta)
                loss.total.backward()
                opt.step()
                step += 1
        if audit.old_task_train_reads():
            raise ProtocolError(f"task {t} training read earlier tasks' train data")
    for site in ada.sites.values():
        for blk in site.blocks:
            blk.freeze()
    if model.mode == "cil":
        model.head.freeze_task(t)

        def feats(arr: np.ndarray) -> np.ndarray:
            parts = []
            with T.no_grad():
                for s in range(0, len(arr), 256):
                    parts.append(model.backbone.forward_features(arr[s:s + 256], ada).data)
            return np.concatenate(parts)

        ref = stream.train_arrays(t)[0] if probe is None else probe
        cur = None if probe is None else feats(x)
        model.head.calibrate(feats(ref), current_task=t, current_features=cur)
    model.trained_tasks = t
    return pre_acc, chance


# -- evaluation ----------------------------------------------------------------


def evaluate_task(model: ContinualModel, stream: TaskStream, j: int,
                  eval_batch: int = 256) -> float:
    """Accuracy on task j's test split, argmax over every seen class."""
    x, y = stream.test_arrays(j)
    correct = 0
    with T.no_grad():
        for s in range(0, len(x), eval_batch):
            logits = model.forward(x[s:s + eval_batch])
            picked = np.argmax(logits.data, axis=1)
            ids = np.array(model.head.class_ids(), dtype=np.int64)
            correct += int((ids[picked] == y[s:s + eval_batch]).sum())
    return correct / len(x)


def evaluate(model: ContinualModel, stream: TaskStream, upto_t: int,
             eval_batch: int = 256) -> list[float]:
    """One accuracy-matrix row: tasks 1..upto_t with no task oracle."""
    if upto_t > model.trained_tasks:
        raise ProtocolError(f"model trained through {model.trained_tasks}, cannot evaluate row {upto_t}")
    return [evaluate_task(model, stream, j, eval_batch) for j in range(1, upto_t + 1)]


# -- end-to-end run ---------------------------------------------------------------


def run_continual(backbone: Backbone, stream: TaskStream, rng: RngStream, *,
                  attach_layers: list[int] | None = None,
                  middle_split: tuple[int, int] = (40, 20), lam: float = 0.1,
                  delta: float = 1.0, phase0_epochs: int = 5, task_epochs: int = 20,
                  lr: float = 5e-3, phase0_lr: float = 5e-3, batch_size: int = 32,
                  ablate_ss: bool = False, eval_batch: int = 256,
                  probe: np.ndarray | None = None) -> RunResult:
    """Full adapter-based continual run over a task stream."""
    if attach_layers is None:
        attach_layers = backbone.config.default_attach_layers()
    adapters = AdapterSet(backbone.config.dim, attach_layers, stream.n_tasks,
                          middle_split=middle_split, lam=lam)
    model = ContinualModel(backbone, adapters, stream.mode)

    if ablate_ss:
        freeze_ss_identity(model)
    else:
        phase0_train_ss(model, stream, phase0_epochs, rng.child("phase0"),
                        lr=phase0_lr, batch_size=batch_size)

    rows: list[list[float]] = []
    pre_train: list[float | None] = []
    chance: list[float] = []
    for t in range(1, stream.n_tasks + 1):
        pre, ch = train_task(model, stream, t, task_epochs, rng.child(f"task/{t}"),
                             lr=lr, batch_size=batch_size, delta=delta, probe=probe)
        pre_train.append(pre)
        chance.append(ch)
        rows.append(evaluate(model, stream, t, eval_batch))
    return RunResult(AccuracyMatrix(rows), pre_train, chance, model, stream.audit,
                     named_params=model.named_params())
