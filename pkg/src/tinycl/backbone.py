"""Tiny vision transformer backbone and its in-repo pretraining.

Pre-norm blocks. Each block exposes the two adapter attach points: the
head-concat attention output feeds both the projection layer and (when
present) the parallel branch at position "proj"; the post-norm MLP input
feeds the MLP and the parallel branch at position "mlp". With no adapters
the block is a stock ViT block.

Once frozen, parameters are bitwise immutable for the life of the process;
full-fine-tune baselines must work on ``unfrozen_copy()``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .checkpoint import load_checkpoint, save_checkpoint
from .errors import ProtocolError, ShapeError, TrainingError
from .optim import Adam
from .tensor import RngStream, Tensor


@dataclass(frozen=True)
class BackboneConfig:
    image_size: int = 32
    patch_size: int = 8
    dim: int = 64
    depth: int = 6
    heads: int = 4
    mlp_ratio: int = 4
    upstream_classes: int = 20

    def __post_init__(self):
        if self.image_size % self.patch_size != 0:
            raise ValueError(f"image_size {self.image_size} not divisible by patch_size {self.patch_size}")
        if self.dim % self.heads != 0:
            raise ValueError(f"dim {self.dim} not divisible by heads {self.heads}")

    @property
    def n_patches(self) -> int:
        return (self.image_size // self.patch_size) ** 2

    @property
    def seq_len(self) -> int:
        """Token count including the class token."""
        return self.n_patches + 1

    @property
    def head_dim(self) -> int:
        return self.dim // self.heads

    @property
    def mlp_hidden(self) -> int:
        return self.dim * self.mlp_ratio

    def default_attach_layers(self) -> list[int]:
        """Shallow-layer span scaled from the 5-of-12 reference layout."""
        n = max(1, math.ceil(self.depth * 5 / 12))
        return list(range(min(n, self.depth)))


def patchify(images: np.ndarray, patch: int) -> np.ndarray:
    """(B,H,W,C) -> (B, n_patches, patch*patch*C), row-major patch order."""
    b, h, w, c = images.shape
    gh, gw = h // patch, w // patch
    x = images.reshape(b, gh, patch, gw, patch, c)
    x = x.transpose(0, 1, 3, 2, 4, 5)
    return x.reshape(b, gh * gw, patch * patch * c)


LN_EPS = 1e-5

# Post-LayerNorm token features are unit-scale while between-image differences
# are a few percent of that, so a linear head would need a very large norm to
# separate classes. Scaling the pooled features keeps head weights small and
# makes linear probes trainable in a desk-scale step budget.
FEAT_SCALE = 8.0


class Backbone:
    """Transformer feature extractor with an instrumented traversal counter."""

    def __init__(self, config: BackboneConfig, params: dict[str, Tensor], frozen: bool = False):
        self.config = config
        self.params = params
        self.frozen = frozen
        self.traversals = 0
        self.upstream_val_acc: float | None = None

    # -- construction ----------------------------------------------------

    @classmethod
    def init(cls, config: BackboneConfig, rng: RngStream, dtype=np.float32) -> "Backbone":
        d, hidden = config.dim, config.mlp_hidden
        patch_in = config.patch_size**2 * 3
        p: dict[str, Tensor] = {}

        def lin(name, fan_in, fan_out):
            bound = 1.0 / math.sqrt(fan_in)
            p[f"{name}.w"] = Tensor(rng.uniform(-bound, bound, (fan_in, fan_out), dtype=dtype), requires_grad=True)
            p[f"{name}.b"] = Tensor(np.zeros(fan_out, dtype=dtype), requires_grad=True)

        def ln(name):
            p[f"{name}.g"] = Tensor(np.ones(d, dtype=dtype), requires_grad=True)
            p[f"{name}.b"] = Tensor(np.zeros(d, dtype=dtype), requires_grad=True)

        lin("patch", patch_in, d)
        p["cls"] = Tensor(rng.uniform(-0.02, 0.02, (d,), dtype=dtype), requires_grad=True)
        p["pos"] = Tensor(rng.uniform(-0.02, 0.02, (config.seq_len, d), dtype=dtype), requires_grad=True)
        for i in range(config.depth):
            ln(f"block{i}.ln1")
            lin(f"block{i}.qkv", d, 3 * d)
            lin(f"block{i}.proj", d, d)
            ln(f"block{i}.ln2")
            lin(f"block{i}.mlp1", d, hidden)
            lin(f"block{i}.mlp2", hidden, d)
        ln("ln_f")
        return cls(config, p)

    def param_items(self) -> list[tuple[str, Tensor]]:
        return list(self.params.items())

    def trainable_params(self) -> list[Tensor]:
        return [t for t in self.params.values() if t.requires_grad]

    def n_params(self) -> int:
        return sum(t.size for t in self.params.values())

    def freeze(self):
        for t in self.params.values():
            t.requires_grad = False
            t.grad = None
        self.frozen = True

    def unfrozen_copy(self) -> "Backbone":
        """Fresh trainable copy; the frozen original stays immutable."""
        params = {k: Tensor(v.data.copy(), requires_grad=True) for k, v in self.params.items()}
        return Backbone(self.config, params, frozen=False)

    # -- forward ----------------------------------------------------------

    def block_forward(self, block_idx: int, x_l: Tensor, adapters=None) -> Tensor:
        """One pre-norm block with optional parallel adapter branches."""
        cfg = self.config
        if block_idx >= cfg.depth:
            raise ShapeError(f"block index {block_idx} out of range for depth {cfg.depth}")
        if adapters is not None and adapters.max_layer() >= cfg.depth:
            raise ShapeError(
                f"adapter site at layer {adapters.max_layer()} but backbone depth is {cfg.depth}")
        p = self.params
        b, L, d = x_l.shape
        heads, dh = cfg.heads, cfg.head_dim

        h = T.layernorm(x_l, p[f"block{block_idx}.ln1.g"], p[f"block{block_idx}.ln1.b"], LN_EPS)
        qkv = T.matmul(h, p[f"block{block_idx}.qkv.w"]) + p[f"block{block_idx}.qkv.b"]
        q = T.narrow(qkv, 2, 0, d)
        k = T.narrow(qkv, 2, d, 2 * d)
        v = T.narrow(qkv, 2, 2 * d, 3 * d)

        def split_heads(t):
            return T.transpose(T.reshape(t, (b, L, heads, dh)), (0, 2, 1, 3))

        q, k, v = split_heads(q), split_heads(k), split_heads(v)
        scores = T.scale(T.matmul(q, T.swap_last2(k)), 1.0 / math.sqrt(dh))
        attn = T.softmax(scores, -1)
        ctx = T.matmul(attn, v)
        x_a = T.reshape(T.transpose(ctx, (0, 2, 1, 3)), (b, L, d))

        proj_out = T.matmul(x_a, p[f"block{block_idx}.proj.w"]) + p[f"block{block_idx}.proj.b"]
        if adapters is not None:
            branch = adapters.branch(block_idx, "proj", x_a)
            if branch is not None:
                proj_out = proj_out + branch
        x_mid = x_l + proj_out

        m_in = T.layernorm(x_mid, p[f"block{block_idx}.ln2.g"], p[f"block{block_idx}.ln2.b"], LN_EPS)
        mlp = T.matmul(T.gelu(T.matmul(m_in, p[f"block{block_idx}.mlp1.w"]) + p[f"block{block_idx}.mlp1.b"]),
                       p[f"block{block_idx}.mlp2.w"]) + p[f"block{block_idx}.mlp2.b"]
        if adapters is not None:
            branch = adapters.branch(block_idx, "mlp", m_in)
            if branch is not None:
                mlp = mlp + branch
        return x_mid + mlp

    def embed(self, images: np.ndarray) -> Tensor:
        """Patch-embed, prepend class token, add positional embedding.

        Pixels arrive in [0, 1] and are standardized per image (zero mean,
        unit variance over all pixels and channels). The raw renders share a
        strong DC component that would otherwise drown the between-image
        contrast the patch embedding sees.
        """
        cfg = self.config
        dtype = self.params["patch.w"].dtype
        x = images.astype(dtype, copy=False)
        mu = x.mean(axis=(1, 2, 3), keepdims=True)
        sd = x.std(axis=(1, 2, 3), keepdims=True)
        x = (x - mu) / (sd + np.asarray(1e-6, dtype=dtype))
        patches = Tensor(patchify(x, cfg.patch_size))
        tok = T.matmul(patches, self.params["patch.w"]) + self.params["patch.b"]
        b = images.shape[0]
        cls_row = T.add(Tensor(np.zeros((b, 1, cfg.dim), dtype=dtype)), self.params["cls"])
        x = T.concat([cls_row, tok], axis=1)
        return x + self.params["pos"]

    def _encode(self, images: np.ndarray, adapters, extra_tokens: Tensor | None) -> Tensor:
        """One counted traversal; returns the full post-norm token sequence."""
        self.traversals += 1
        x = self.embed(images)
        if extra_tokens is not None:
            b, L, d = x.shape
            x = T.concat([T.narrow(x, 1, 0, 1), extra_tokens, T.narrow(x, 1, 1, L)], axis=1)
        for i in range(self.config.depth):
            x = self.block_forward(i, x, adapters)
        return T.layernorm(x, self.params["ln_f.g"], self.params["ln_f.b"], LN_EPS)

    def forward_features(self, images: np.ndarray, adapters=None,
                         extra_tokens: Tensor | None = None) -> Tensor:
        """One traversal; classifier features (B, D).

        Mean of all non-class tokens (patches plus any extra tokens),
        standardized per image and scaled by FEAT_SCALE. The standardization
        gives every image the same feature norm, so linear classifiers and
        grown head slices compete on feature direction rather than on
        uncontrolled per-image energy. ``extra_tokens`` (B, P, D) are inserted
        after the class token and carry no positional embedding (prompt-style
        baselines).
        """
        x = self._encode(images, adapters, extra_tokens)
        b, L, d = x.shape
        pooled = T.scale(T.tensor_sum(T.narrow(x, 1, 1, L), axis=1), 1.0 / (L - 1))
        dtype = pooled.dtype
        unit_g = Tensor(np.ones(d, dtype=dtype))
        zero_b = Tensor(np.zeros(d, dtype=dtype))
        return T.scale(T.layernorm(pooled, unit_g, zero_b, LN_EPS), FEAT_SCALE)

    def query_features(self, images: np.ndarray) -> Tensor:
        """One traversal; raw class-token features (B, D) for similarity queries."""
        x = self._encode(images, None, None)
        b = x.shape[0]
        return T.reshape(T.narrow(x, 1, 0, 1), (b, self.config.dim))

    def reset_traversals(self):
        self.traversals = 0

    # -- persistence -------------------------------------------------------

    def save(self, path):
        save_checkpoint(path, [(name, t.data, not t.requires_grad)
                               for name, t in self.params.items()])

    @classmethod
    def load(cls, config: BackboneConfig, path, dtype=np.float32) -> "Backbone":
        entries = load_checkpoint(path)
        params = {name: Tensor(arr.astype(dtype), requires_grad=not frozen)
                  for name, (arr, frozen) in entries.items()}
        frozen = all(froz for _, froz in entries.values())
        return cls(config, params, frozen=frozen)


def _plain_ce(logits: Tensor, label_cols: np.ndarray) -> Tensor:
    """Mean cross-entropy against integer column labels."""
    b, k = logits.shape
    onehot = np.zeros((b, k), dtype=logits.dtype)
    onehot[np.arange(b), label_cols] = 1.0
    lse = T.logsumexp(logits, axis=1)
    picked = T.tensor_sum(T.mul(logits, Tensor(onehot)), axis=1)
    return T.mean(lse - picked)


def pretrain_upstream(config: BackboneConfig, upstream, epochs: int, rng: RngStream,
                      batch_size: int = 64, lr: float = 2e-3,
                      val_frac: float = 0.1, min_acc_over_chance: float = 3.0) -> Backbone:
    """Train the backbone on the upstream set, validate, freeze, return it.

    The upstream classifier head is discarded. Raises TrainingError if
    validation accuracy does not beat chance by ``min_acc_over_chance``.
    """
    backbone = Backbone.init(config, rng.child("backbone-init"))
    classes = sorted(set(int(y) for y in upstream.labels))
    n_classes = len(classes)
    col = {c: i for i, c in enumerate(classes)}
    cols = np.array([col[int(y)] for y in upstream.labels], dtype=np.int64)

    # per-class tail split keeps the validation set class-balanced
    train_idx, val_idx = [], []
    for c in range(n_classes):
        idx = np.nonzero(cols == c)[0]
        n_val = max(1, int(round(len(idx) * val_frac)))
        train_idx.append(idx[:-n_val])
        val_idx.append(idx[-n_val:])
    train_idx = np.concatenate(train_idx)
    val_idx = np.concatenate(val_idx)

    d = config.dim
    bound = 1.0 / math.sqrt(d)
    head_w = Tensor(rng.child("head").uniform(-bound, bound, (d, n_classes)), requires_grad=True)
    head_b = Tensor(np.zeros(n_classes, dtype=np.float32), requires_grad=True)
    params = backbone.trainable_params() + [head_w, head_b]
    opt = Adam(params, lr=lr)
    shuffle = rng.child("shuffle")

    n_steps = 0
    total_steps = epochs * max(1, len(train_idx) // batch_size)
    for _ in range(epochs):
        order = train_idx[shuffle.permutation(len(train_idx))]
        for s in range(0, len(order) - batch_size + 1, batch_size):
            batch = order[s:s + batch_size]
            opt.set_cosine_lr(n_steps, total_steps)
            opt.zero_grad()
            feats = backbone.forward_features(upstream.images[batch])
            logits = T.matmul(feats, head_w) + head_b
            loss = _plain_ce(logits, cols[batch])
            loss.backward()
            opt.step()
            n_steps += 1

    correct = 0
    with T.no_grad():
        for s in range(0, len(val_idx), 256):
            batch = val_idx[s:s + 256]
            feats = backbone.forward_features(upstream.images[batch])
            logits = T.matmul(feats, head_w) + head_b
            correct += int((np.argmax(logits.data, axis=1) == cols[batch]).sum())
    val_acc = correct / len(val_idx)
    chance = 1.0 / n_classes
    if val_acc < min_acc_over_chance * chance:
        raise TrainingError(
            f"upstream pretraining too weak: val acc {val_acc:.3f} < {min_acc_over_chance}x chance {chance:.3f}")

    backbone.freeze()
    backbone.upstream_val_acc = val_acc
    backbone.reset_traversals()
    return backbone


def ensure_disjoint_upstream(upstream_labels, stream) -> None:
    """Protocol guard: upstream ids must never collide with stream ids."""
    up = set(int(y) for y in upstream_labels)
    for t in range(1, stream.n_tasks + 1):
        overlap = up & set(stream.label_set(t))
        if overlap:
            raise ProtocolError(f"upstream labels overlap task {t}: {sorted(overlap)}")
