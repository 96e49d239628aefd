"""Parameter-extensible adapter layers and their scale-and-shift front ends.

Each attach layer carries two sites: one parallel to the attention output
projection ("proj") and one parallel to the MLP ("mlp"). A site holds a
scale-and-shift module followed by a width-extensible down/up bottleneck.
Per-task width blocks concatenate; old blocks are frozen when a new task
begins, so only the current task's columns receive gradient.

New down-projection columns (and up-projection rows) are initialized
orthogonal to everything already present, which starts the cross-task
interference penalty near zero instead of fighting a random init.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import CapacityError, ShapeError
from .tensor import RngStream, Tensor

# expected column norm of a uniform(-1/sqrt(D), 1/sqrt(D)) draw in R^D
GS_GAIN = 1.0 / math.sqrt(3.0)


@dataclass
class SSModule:
    """Per-channel scale-and-shift y = alpha * x + beta."""

    alpha: Tensor
    beta: Tensor

    @classmethod
    def identity(cls, dim: int, dtype=np.float32) -> "SSModule":
        return cls(Tensor(np.ones(dim, dtype=dtype), requires_grad=True),
                   Tensor(np.zeros(dim, dtype=dtype), requires_grad=True))

    @property
    def frozen(self) -> bool:
        return not self.alpha.requires_grad

    def freeze(self):
        for t in (self.alpha, self.beta):
            t.requires_grad = False
            t.grad = None


def apply_ss(ss: SSModule, x: Tensor) -> Tensor:
    return T.mul(x, ss.alpha) + ss.beta


@dataclass
class CALBlock:
    """One task's slice of a bottleneck: down (D, d_t) and up (d_t, D)."""

    task: int
    w_dp: Tensor
    w_up: Tensor

    @property
    def width(self) -> int:
        return self.w_dp.shape[1]

    def freeze(self):
        for t in (self.w_dp, self.w_up):
            t.requires_grad = False
            t.grad = None


@dataclass
class CALSite:
    layer: int
    position: str  # "proj" | "mlp"
    dim: int
    ss: SSModule
    blocks: list[CALBlock] = field(default_factory=list)

    def total_width(self) -> int:
        return sum(b.width for b in self.blocks)


def cal_forward(site: CALSite, x: Tensor) -> Tensor:
    """relu(x @ [all down blocks]) @ [all up blocks], concat semantics."""
    if not site.blocks:
        return x
    w_dp = site.blocks[0].w_dp if len(site.blocks) == 1 else T.concat([b.w_dp for b in site.blocks], axis=1)
    w_up = site.blocks[0].w_up if len(site.blocks) == 1 else T.concat([b.w_up for b in site.blocks], axis=0)
    return T.matmul(T.relu(T.matmul(x, w_dp)), w_up)


def per_task_widths(total: int, n_tasks: int) -> list[int]:
    """Split a width budget evenly; the remainder goes to the earliest tasks."""
    if n_tasks < 1:
        raise ValueError(f"n_tasks must be >= 1, got {n_tasks}")
    base, rem = divmod(total, n_tasks)
    widths = [base + (1 if t < rem else 0) for t in range(n_tasks)]
    if any(w < 1 for w in widths):
        raise CapacityError(f"width budget {total} cannot cover {n_tasks} tasks at >= 1 column each")
    return widths


def orthogonal_columns(prev: np.ndarray | None, n_new: int, dim: int,
                       rng: RngStream, gain: float = GS_GAIN, dtype=np.float32) -> np.ndarray:
    """Draw n_new columns in R^dim orthogonal to prev's columns and each other.

    Modified Gram-Schmidt against the existing columns, then unit-normalized
    and rescaled by ``gain`` so magnitudes match a plain uniform init.
    """
    n_prev = 0 if prev is None else prev.shape[1]
    if n_prev + n_new > dim:
        raise CapacityError(
            f"cannot add {n_new} orthogonal columns: {n_prev} of {dim} directions already used")
    basis: list[np.ndarray] = []
    if prev is not None:
        for j in range(prev.shape[1]):
            v = prev[:, j].astype(np.float64)
            for b in basis:
                v = v - (b @ v) * b
            nrm = np.linalg.norm(v)
            if nrm > 1e-12:
                basis.append(v / nrm)
    bound = 1.0 / math.sqrt(dim)
    out = np.empty((dim, n_new), dtype=np.float64)
    for j in range(n_new):
        for _ in range(64):
            v = rng.uniform(-bound, bound, (dim,), dtype=np.float64)
            for b in basis:
                v = v - (b @ v) * b
            nrm = np.linalg.norm(v)
            if nrm > 1e-8:
                break
        else:
            raise CapacityError("could not find a new orthogonal direction")
        u = v / nrm
        basis.append(u)
        out[:, j] = gain * u
    return out.astype(dtype)


class AdapterSet:
    """All adapter sites for one continual run, with per-task expansion."""

    def __init__(self, dim: int, attach_layers: list[int], n_tasks: int,
                 middle_split: tuple[int, int] = (40, 20), lam: float = 0.1,
                 dtype=np.float32):
        if len(set(attach_layers)) != len(attach_layers):
            raise ShapeError(f"duplicate attach layers: {attach_layers}")
        if any(l < 0 for l in attach_layers):
            raise ShapeError(f"negative attach layer in {attach_layers}")
        self.dim = dim
        self.attach_layers = sorted(attach_layers)
        self.n_tasks = n_tasks
        self.lam = lam
        self.dtype = dtype
        self.widths = {"proj": per_task_widths(middle_split[0], n_tasks),
                       "mlp": per_task_widths(middle_split[1], n_tasks)}
        self.sites: dict[tuple[int, str], CALSite] = {}
        for layer in self.attach_layers:
            for pos in ("proj", "mlp"):
                self.sites[(layer, pos)] = CALSite(layer, pos, dim, SSModule.identity(dim, dtype))
        self.task_count = 0

    def max_layer(self) -> int:
        return self.attach_layers[-1] if self.attach_layers else -1

    # -- lifecycle ---------------------------------------------------------

    def expand_for_task(self, rng: RngStream) -> int:
        """Freeze existing blocks and append this task's fresh-width blocks."""
        if self.task_count >= self.n_tasks:
            raise CapacityError(f"width schedule covers {self.n_tasks} tasks, all used")
        task = self.task_count + 1
        for (layer, pos), site in self.sites.items():
            for b in site.blocks:
                b.freeze()
            width = self.widths[pos][task - 1]
            site_rng = rng.child(f"cal/{layer}/{pos}/t{task}")
            prev_dp = None
            prev_up = None
            if site.blocks:
                prev_dp = np.concatenate([b.w_dp.data for b in site.blocks], axis=1)
                prev_up = np.concatenate([b.w_up.data for b in site.blocks], axis=0)
            w_dp = orthogonal_columns(prev_dp, width, self.dim, site_rng.child("dp"), dtype=self.dtype)
            w_up_cols = orthogonal_columns(None if prev_up is None else prev_up.T, width,
                                           self.dim, site_rng.child("up"), dtype=self.dtype)
            site.blocks.append(CALBlock(task,
                                        Tensor(w_dp, requires_grad=True),
                                        Tensor(w_up_cols.T.copy(), requires_grad=True)))
        self.task_count = task
        return task

    def freeze_ss(self):
        for site in self.sites.values():
            site.ss.freeze()

    def ss_frozen(self) -> bool:
        return all(site.ss.frozen for site in self.sites.values())

    # -- forward -----------------------------------------------------------

    def branch(self, layer: int, position: str, x: Tensor) -> Tensor | None:
        """lam * CAL(SS(x)) at a site; identity CAL while no blocks exist."""
        site = self.sites.get((layer, position))
        if site is None:
            return None
        return T.scale(cal_forward(site, apply_ss(site.ss, x)), self.lam)

    # -- parameter access ----------------------------------------------------

    def named_params(self) -> list[tuple[str, Tensor]]:
        out = []
        for (layer, pos), site in sorted(self.sites.items()):
            out.append((f"adapter.{layer}.{pos}.ss.alpha", site.ss.alpha))
            out.append((f"adapter.{layer}.{pos}.ss.beta", site.ss.beta))
            for b in site.blocks:
                out.append((f"adapter.{layer}.{pos}.t{b.task}.dp", b.w_dp))
                out.append((f"adapter.{layer}.{pos}.t{b.task}.up", b.w_up))
        return out

    def trainable_params(self) -> list[Tensor]:
        return [t for _, t in self.named_params() if t.requires_grad]

    def current_task_sites(self) -> list[CALSite]:
        return [site for site in self.sites.values() if site.blocks]

    def n_trainable(self) -> int:
        return sum(t.size for t in self.trainable_params())
