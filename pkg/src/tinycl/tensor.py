"""Dense-tensor substrate with reverse-mode autodiff.

Kernels are numpy-backed pure functions; each op wires a backward closure
onto the output tensor, and ``Tensor.backward()`` replays them in reverse
topological order. Training runs in float32; gradient checking builds the
same graphs in float64.

Broadcasting is deliberately narrow: elementwise ``add``/``mul`` accept a
second operand whose shape equals the trailing dims of the first (vector or
token-table over a batch); everything else requires exact shapes.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ShapeError

_grad_enabled = True


class no_grad:
    """Context manager disabling graph construction (evaluation mode)."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


def grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    """N-d float tensor with optional gradient tracking.

    ``data`` is a row-major numpy array (float32 by default, float64 for
    gradient-check mode). ``grad`` stays ``None`` until backward touches it.
    """

    __slots__ = ("data", "grad", "requires_grad", "_backward", "_parents", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str = ""):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._backward = None
        self._parents: tuple[Tensor, ...] = ()
        self.name = name

    # -- introspection -------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        tag = f" {self.name!r}" if self.name else ""
        return f"Tensor{tag}(shape={self.shape}, requires_grad={self.requires_grad})"

    def item(self) -> float:
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False, dtype=self.data.dtype)

    def zero_grad(self):
        self.grad = None

    def _accumulate(self, g: np.ndarray):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    # -- autodiff ------------------------------------------------------

    def backward(self):
        """Reverse-mode sweep from this scalar (or with implicit ones seed)."""
        topo: list[Tensor] = []
        visited: set[int] = set()
        stack = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in visited:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None:
                node._backward()

    # -- operator sugar --------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return add(self, scale(other, -1.0))

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    # -- method forms of common ops --------------------------------------

    def relu(self):
        return relu(self)

    def gelu(self):
        return gelu(self)

    def softmax(self, axis: int = -1):
        return softmax(self, axis)

    def logsumexp(self, axis: int = -1):
        return logsumexp(self, axis)

    def sum(self, axis=None, keepdims: bool = False):
        return tensor_sum(self, axis, keepdims)

    def mean(self):
        return mean(self)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 or isinstance(shape[0], int) else shape[0])

    def transpose(self, axes=None):
        return transpose(self, axes)

    def slice(self, axis: int, start: int, stop: int):
        return narrow(self, axis, start, stop)

    def frobenius_norm(self):
        return frobenius_norm(self)


def _make(data: np.ndarray, parents: tuple[Tensor, ...], backward) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = ""
    track = _grad_enabled and any(p.requires_grad for p in parents)
    out.requires_grad = track
    if track:
        out._parents = tuple(p for p in parents if p.requires_grad or p._parents)
        out._backward = backward
    else:
        out._parents = ()
        out._backward = None
    return out


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _reduce_to_shape(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum g over the leading axes that were broadcast to reach full shape."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    return g


def _check_broadcast(a: Tensor, b: Tensor, op: str):
    if a.shape == b.shape:
        return
    if b.ndim <= a.ndim and b.shape == a.shape[a.ndim - b.ndim:] and b.ndim >= 1:
        return
    raise ShapeError(f"{op}: shape {b.shape} does not align with trailing dims of {a.shape}")


# -- elementwise suite ----------------------------------------------------


def add(a, b) -> Tensor:
    """a + b; b may match a's trailing dims (bias / token-table broadcast)."""
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b, "add")
    out_data = a.data + b.data

    def backward():
        g = out.grad
        if a.requires_grad or a._parents:
            a._accumulate(g)
        if b.requires_grad or b._parents:
            b._accumulate(_reduce_to_shape(g, b.shape))

    out = _make(out_data, (a, b), backward)
    return out


def mul(a, b) -> Tensor:
    """Elementwise a * b with the same trailing-dims broadcast rule as add."""
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b, "mul")
    out_data = a.data * b.data

    def backward():
        g = out.grad
        if a.requires_grad or a._parents:
            a._accumulate(g * b.data)
        if b.requires_grad or b._parents:
            b._accumulate(_reduce_to_shape(g * a.data, b.shape))

    out = _make(out_data, (a, b), backward)
    return out


def scale(a, c: float) -> Tensor:
    a = _as_tensor(a)
    c = float(c)
    out_data = a.data * a.data.dtype.type(c)

    def backward():
        a._accumulate(out.grad * a.data.dtype.type(c))

    out = _make(out_data, (a,), backward)
    return out


def relu(a) -> Tensor:
    a = _as_tensor(a)
    out_data = np.maximum(a.data, 0)

    def backward():
        a._accumulate(out.grad * (a.data > 0))

    out = _make(out_data, (a,), backward)
    return out


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a) -> Tensor:
    """Gaussian-error linear unit, tanh form."""
    a = _as_tensor(a)
    x = a.data
    inner = _GELU_C * (x + 0.044715 * x**3)
    t = np.tanh(inner)
    out_data = 0.5 * x * (1.0 + t)

    def backward():
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x**2)
        dgelu = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t**2) * dinner
        a._accumulate(out.grad * dgelu.astype(x.dtype))

    out = _make(out_data, (a,), backward)
    return out


def softmax(a, axis: int = -1) -> Tensor:
    """Row-stable softmax; -inf entries map to exactly 0 probability."""
    a = _as_tensor(a)
    if not -a.ndim <= axis < a.ndim:
        raise ShapeError(f"softmax: axis {axis} out of range for ndim {a.ndim}")
    x = a.data
    m = np.max(x, axis=axis, keepdims=True)
    e = np.exp(x - m)
    out_data = e / np.sum(e, axis=axis, keepdims=True)

    def backward():
        g = out.grad
        y = out.data
        dot = np.sum(g * y, axis=axis, keepdims=True)
        a._accumulate((g - dot) * y)

    out = _make(out_data, (a,), backward)
    return out


def logsumexp(a, axis: int = -1) -> Tensor:
    a = _as_tensor(a)
    if not -a.ndim <= axis < a.ndim:
        raise ShapeError(f"logsumexp: axis {axis} out of range for ndim {a.ndim}")
    x = a.data
    m = np.max(x, axis=axis, keepdims=True)
    e = np.exp(x - m)
    s = np.sum(e, axis=axis, keepdims=True)
    out_data = np.squeeze(m + np.log(s), axis=axis)

    def backward():
        g = np.expand_dims(out.grad, axis)
        a._accumulate(g * (e / s))

    out = _make(out_data, (a,), backward)
    return out


def layernorm(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis, then affine by gamma/beta (length-D vectors)."""
    if eps <= 0:
        raise ValueError(f"layernorm: eps must be positive, got {eps}")
    x, gamma, beta = _as_tensor(x), _as_tensor(gamma), _as_tensor(beta)
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"layernorm: gamma/beta must have shape ({d},), got {gamma.shape}/{beta.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    out_data = xhat * gamma.data + beta.data

    def backward():
        g = out.grad
        if gamma.requires_grad or gamma._parents:
            gamma._accumulate((g * xhat).reshape(-1, d).sum(axis=0))
        if beta.requires_grad or beta._parents:
            beta._accumulate(g.reshape(-1, d).sum(axis=0))
        if x.requires_grad or x._parents:
            dxhat = g * gamma.data
            m1 = dxhat.mean(axis=-1, keepdims=True)
            m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
            x._accumulate(inv * (dxhat - m1 - xhat * m2))

    out = _make(out_data, (x, gamma, beta), backward)
    return out


def tensor_sum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    if axis is not None and not -a.ndim <= axis < a.ndim:
        raise ShapeError(f"sum: axis {axis} out of range for ndim {a.ndim}")
    out_data = a.data.sum(axis=axis, keepdims=keepdims)

    def backward():
        g = out.grad
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        a._accumulate(np.broadcast_to(g, a.shape).copy())

    out = _make(np.asarray(out_data), (a,), backward)
    return out


def mean(a) -> Tensor:
    a = _as_tensor(a)
    n = a.size
    out_data = np.asarray(a.data.mean())

    def backward():
        a._accumulate(np.full_like(a.data, out.grad / n))

    out = _make(out_data, (a,), backward)
    return out


def frobenius_norm(a) -> Tensor:
    """sqrt(sum of squares); gradient at the origin is taken as 0."""
    a = _as_tensor(a)
    norm = float(np.sqrt(np.sum(a.data.astype(np.float64) ** 2)))
    out_data = np.asarray(norm, dtype=a.dtype)

    def backward():
        if norm > 0:
            a._accumulate((a.data / a.data.dtype.type(norm)) * out.grad)

    out = _make(out_data, (a,), backward)
    return out


# -- structural ops --------------------------------------------------------


def matmul(a, b) -> Tensor:
    """Matrix product. Supports 2D@2D, ND@2D (shared weight), ND@ND (stacked)."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul: operands must be >=2D, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dims differ for {a.shape} @ {b.shape}")
    if b.ndim == 2:
        pass
    elif a.shape[:-2] == b.shape[:-2]:
        pass
    else:
        raise ShapeError(f"matmul: leading dims differ for {a.shape} @ {b.shape}")
    out_data = np.matmul(a.data, b.data)

    def backward():
        g = out.grad
        if a.requires_grad or a._parents:
            a._accumulate(np.matmul(g, np.swapaxes(b.data, -1, -2)))
        if b.requires_grad or b._parents:
            if b.ndim == 2 and a.ndim > 2:
                k = a.shape[-1]
                n = g.shape[-1]
                b._accumulate(a.data.reshape(-1, k).T @ g.reshape(-1, n))
            else:
                b._accumulate(np.matmul(np.swapaxes(a.data, -1, -2), g))

    out = _make(out_data, (a, b), backward)
    return out


def transpose(a, axes=None) -> Tensor:
    a = _as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(axes)
    if sorted(axes) != list(range(a.ndim)):
        raise ShapeError(f"transpose: axes {axes} is not a permutation for ndim {a.ndim}")
    inv = np.argsort(axes)
    out_data = a.data.transpose(axes)

    def backward():
        a._accumulate(out.grad.transpose(inv))

    out = _make(out_data, (a,), backward)
    return out


def swap_last2(a) -> Tensor:
    a = _as_tensor(a)
    axes = list(range(a.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(a, axes)


def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    shape = tuple(shape)
    out_data = a.data.reshape(shape)

    def backward():
        a._accumulate(out.grad.reshape(a.shape))

    out = _make(out_data, (a,), backward)
    return out


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    if not tensors:
        raise ShapeError("concat: need at least one tensor")
    nd = tensors[0].ndim
    if not -nd <= axis < nd:
        raise ShapeError(f"concat: axis {axis} out of range for ndim {nd}")
    axis = axis % nd
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward():
        g = out.grad
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad or t._parents:
                idx = [slice(None)] * nd
                idx[axis] = slice(lo, hi)
                t._accumulate(g[tuple(idx)])

    out = _make(out_data, tuple(tensors), backward)
    return out


def narrow(a, axis: int, start: int, stop: int) -> Tensor:
    a = _as_tensor(a)
    if not -a.ndim <= axis < a.ndim:
        raise ShapeError(f"slice: axis {axis} out of range for ndim {a.ndim}")
    axis = axis % a.ndim
    idx = [slice(None)] * a.ndim
    idx[axis] = slice(start, stop)
    out_data = a.data[tuple(idx)].copy()

    def backward():
        g = np.zeros_like(a.data)
        g[tuple(idx)] = out.grad
        a._accumulate(g)

    out = _make(out_data, (a,), backward)
    return out


def index_select0(a, indices) -> Tensor:
    """Gather rows along axis 0; backward scatter-adds into the source."""
    a = _as_tensor(a)
    idx = np.asarray(indices, dtype=np.int64)
    if idx.ndim != 1:
        raise ShapeError(f"index_select0: indices must be 1-D, got shape {idx.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= a.shape[0]):
        raise ShapeError(f"index_select0: index out of range for first dim {a.shape[0]}")
    out_data = a.data[idx].copy()

    def backward():
        g = np.zeros_like(a.data)
        np.add.at(g, idx, out.grad)
        a._accumulate(g)

    out = _make(out_data, (a,), backward)
    return out


def row_cosine(const_rows: np.ndarray, b, eps: float = 1e-8) -> Tensor:
    """Cosine similarity per row between a constant array and a tensor."""
    b = _as_tensor(b)
    q = np.asarray(const_rows, dtype=b.dtype)
    if q.shape != b.shape or b.ndim != 2:
        raise ShapeError(f"row_cosine: want matching 2-D shapes, got {q.shape} vs {b.shape}")
    qn = np.sqrt((q**2).sum(axis=1)) + eps
    bn = np.sqrt((b.data**2).sum(axis=1)) + eps
    dots = (q * b.data).sum(axis=1)
    out_data = dots / (qn * bn)

    def backward():
        g = out.grad[:, None]
        d_b = q / (qn * bn)[:, None] - (out_data / bn**2)[:, None] * b.data
        b._accumulate(g * d_b)

    out = _make(out_data, (b,), backward)
    return out


# -- gradient checking ------------------------------------------------------


@dataclass
class GradCheckReport:
    max_rel_err: float
    tol: float
    passed: bool
    worst: str = ""
    per_input: dict = field(default_factory=dict)


def grad_check(f, inputs: list[Tensor], eps: float = 1e-6, tol: float = 1e-5,
               max_coords_per_input: int | None = None, rng: np.random.Generator | None = None,
               atol: float = 1e-8) -> GradCheckReport:
    """Compare reverse-mode grads of scalar f(inputs) against central differences.

    Inputs must be float64 for the differences to resolve below ``tol``.
    Coordinates may be subsampled for large tensors.
    """
    for t in inputs:
        t.zero_grad()
    out = f()
    if out.size != 1:
        raise ValueError(f"grad_check: f must be scalar-valued, got shape {out.shape}")
    out.backward()
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in inputs]

    max_rel = 0.0
    worst = ""
    per_input = {}
    for t_idx, t in enumerate(inputs):
        flat = t.data.reshape(-1)
        n = flat.size
        if max_coords_per_input is not None and n > max_coords_per_input:
            gen = rng if rng is not None else np.random.default_rng(0)
            coords = gen.choice(n, size=max_coords_per_input, replace=False)
        else:
            coords = range(n)
        worst_here = 0.0
        for c in coords:
            orig = flat[c]
            flat[c] = orig + eps
            with no_grad():
                f_plus = f().item()
            flat[c] = orig - eps
            with no_grad():
                f_minus = f().item()
            flat[c] = orig
            numeric = (f_plus - f_minus) / (2 * eps)
            a = analytic[t_idx].reshape(-1)[c]
            diff = abs(a - numeric)
            if diff <= atol:
                rel = 0.0
            else:
                rel = diff / max(abs(a), abs(numeric), 1e-12)
            if rel > worst_here:
                worst_here = rel
            if rel > max_rel:
                max_rel = rel
                worst = f"input[{t_idx}]{' ' + t.name if t.name else ''} coord {c}"
        per_input[t_idx] = worst_here
    return GradCheckReport(max_rel_err=max_rel, tol=tol, passed=max_rel < tol,
                           worst=worst, per_input=per_input)


# -- deterministic RNG -------------------------------------------------------


class RngStream:
    """Counter-based deterministic random stream.

    Every draw instantiates a fresh PCG64 generator from (seed, counter) and
    advances the counter, so identical (seed, counter) pairs always give
    identical values regardless of host, process, or thread interleaving.
    """

    def __init__(self, seed: int, counter: int = 0):
        self.seed = int(seed)
        self.counter = int(counter)

    def _gen(self) -> np.random.Generator:
        g = np.random.Generator(np.random.PCG64(np.random.SeedSequence([self.seed, self.counter])))
        self.counter += 1
        return g

    def child(self, tag: str) -> "RngStream":
        """Independent named substream; stable under call-site reordering."""
        h = hashlib.blake2b(f"{self.seed}/{tag}".encode(), digest_size=8).digest()
        return RngStream(int.from_bytes(h, "little"))

    def uniform(self, low: float, high: float, shape, dtype=np.float32) -> np.ndarray:
        return self._gen().uniform(low, high, size=shape).astype(dtype)

    def normal(self, shape, scale: float = 1.0, dtype=np.float32) -> np.ndarray:
        return (self._gen().standard_normal(size=shape) * scale).astype(dtype)

    def integers(self, low: int, high: int, shape=None) -> np.ndarray:
        return self._gen().integers(low, high, size=shape)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen().permutation(n)
