"""Deterministic synthetic image generators.

Two pattern families keep an intentional gap between pretraining and
downstream data: the upstream set is oriented gratings with checker
overlays; downstream classes are color blobs placed on a spatial grid.

Downstream classes come in groups of ``GROUP_SIZE``. A group fixes a hue
palette and a pool of grid cells; classes inside a group share both and
differ only in which pooled cell each palette color occupies. Class
identity inside a group therefore lives in color-position conjunctions:
spatial pooling erases it from a frozen feature extractor, while
token-level modules that run before pooling can recover it. Group
identity, by contrast, is carried by the palette hues and survives
pooling, which mirrors incremental benchmarks whose tasks are coherent
class groups rather than arbitrary label splits. Everything is derived
from (seed, class id) counter streams, so regeneration is bitwise stable.

Upstream label ids live at ``UPSTREAM_ID_BASE`` and above; downstream ids
start at 0, which keeps the two label spaces disjoint by construction.
"""

from __future__ import annotations

from dataclasses import dataclass
from itertools import combinations, permutations
from pathlib import Path

import numpy as np
from scipy import ndimage

from .streams import TaskData, TaskStream
from .tensor import RngStream

UPSTREAM_ID_BASE = 10_000


@dataclass(frozen=True)
class ClassSpec:
    """Procedural parameters for one downstream class.

    ``cells`` are indices into a GRID_N x GRID_N layout; ``colors`` is the
    group palette in the class's cell order. The palette and the cell pool
    are shared by every class in the group, so per-image color statistics
    carry no class signal inside a group: only the cell-color pairing does.
    """

    class_id: int
    group_id: int
    cells: tuple[int, ...]     # len 3, distinct cells in [0, GRID_N^2)
    centers: np.ndarray        # (3, 2) cell centers in [0,1]^2
    radii: np.ndarray          # (3,)
    colors: np.ndarray         # (3, 3) per-blob RGB deltas (palette order per class)
    base_color: np.ndarray     # (3,) shared background


@dataclass(frozen=True)
class DomainSpec:
    """Parametric input-distribution shift for domain-incremental streams."""

    rotation_deg: float = 0.0
    intensity_scale: float = 1.0
    intensity_shift: float = 0.0
    noise_sigma: float = 0.0

    def is_identity(self) -> bool:
        return (self.rotation_deg == 0.0 and self.intensity_scale == 1.0
                and self.intensity_shift == 0.0 and self.noise_sigma == 0.0)


def _hue_to_rgb(h: float) -> np.ndarray:
    """Saturated hue wheel; spreads class colors without collisions."""
    h6 = (h % 1.0) * 6.0
    k = int(h6)
    f = h6 - k
    table = {
        0: (1.0, f, 0.0), 1: (1.0 - f, 1.0, 0.0), 2: (0.0, 1.0, f),
        3: (0.0, 1.0 - f, 1.0), 4: (f, 0.0, 1.0), 5: (1.0, 0.0, 1.0 - f),
    }
    return np.array(table[k % 6], dtype=np.float64)


GOLDEN = 0.6180339887498949

GRID_N = 4
GROUP_SIZE = 4
CELLS_PER_GROUP = 6
BASE_COLOR = np.array([0.45, 0.45, 0.45], dtype=np.float64)

_CELL_COMBOS = list(combinations(range(CELLS_PER_GROUP), 3))
_COLOR_PERMS = list(permutations(range(3)))
N_GROUP_SIGNATURES = len(_CELL_COMBOS) * len(_COLOR_PERMS)


def _triple_rows(center: float) -> np.ndarray:
    """Three zero-sum RGB delta rows: an evenly spread hue triple."""
    rows = []
    for k in range(3):
        u = _hue_to_rgb(center + k / 3.0)
        d = u - u.mean()
        rows.append(0.60 * d / np.abs(d).max())
    return np.stack(rows)


def group_palette(group_id: int) -> np.ndarray:
    """The group's palette: an evenly spread hue triple, rotated per group.

    Each row sums to zero, so adding a blob barely moves the image-mean
    color. All classes in a group share the same three well-separated
    hues, so color statistics never identify the class: only the
    hue-to-cell assignment does. The rotation gives each group its own
    hue set without changing how colorful its images are.
    """
    return _triple_rows(group_id * GOLDEN)


def group_cells(seed: int, group_id: int) -> np.ndarray:
    """The group's pool of CELLS_PER_GROUP distinct grid cells."""
    perm = RngStream(seed).child(f"group/{group_id}/cells").permutation(GRID_N * GRID_N)
    return np.sort(perm[:CELLS_PER_GROUP])


def class_spec(seed: int, class_id: int) -> ClassSpec:
    """Deterministic per-class parameters; content depends only on (seed, id).

    Class ``class_id`` belongs to group ``class_id // GROUP_SIZE`` and gets a
    signature unique inside its group: a 3-cell subset of the group's cell
    pool plus an assignment of the group palette to those cells. A seeded
    permutation of the signature space guarantees classes never collide.
    """
    if not 0 <= class_id < UPSTREAM_ID_BASE:
        raise ValueError(f"class_id {class_id} outside downstream space [0, {UPSTREAM_ID_BASE})")
    gid = class_id // GROUP_SIZE
    pool = group_cells(seed, gid)
    perm = RngStream(seed).child(f"group/{gid}/signatures").permutation(N_GROUP_SIGNATURES)
    idx = int(perm[class_id % GROUP_SIZE])
    combo = _CELL_COMBOS[idx // len(_COLOR_PERMS)]
    order = _COLOR_PERMS[idx % len(_COLOR_PERMS)]
    cells = tuple(int(pool[i]) for i in combo)
    centers = np.array([((c // GRID_N + 0.5) / GRID_N, (c % GRID_N + 0.5) / GRID_N)
                        for c in cells], dtype=np.float64)
    rng = RngStream(seed).child(f"class/{class_id}")
    radii = rng.uniform(0.080, 0.105, (3,), dtype=np.float64)
    colors = group_palette(gid)[list(order)]
    return ClassSpec(class_id, gid, tuple(cells), centers, radii, colors, BASE_COLOR.copy())


def _grid(size: int) -> tuple[np.ndarray, np.ndarray]:
    ax = (np.arange(size, dtype=np.float64) + 0.5) / size
    return np.meshgrid(ax, ax, indexing="ij")


def render_class(spec: ClassSpec, n: int, rng: RngStream, size: int = 32,
                 noise_sigma: float = 0.03) -> np.ndarray:
    """n instances of one class, (n, size, size, 3) float32 in [0,1]."""
    yy, xx = _grid(size)
    jitter = rng.normal((n, 3, 2), scale=0.02, dtype=np.float64)
    amp = 1.0 + rng.normal((n, 3), scale=0.15, dtype=np.float64)
    img = np.tile(spec.base_color, (n, size, size, 1))
    for b in range(3):
        cy = spec.centers[b, 0] + jitter[:, b, 0]
        cx = spec.centers[b, 1] + jitter[:, b, 1]
        d2 = (yy[None] - cy[:, None, None]) ** 2 + (xx[None] - cx[:, None, None]) ** 2
        blob = amp[:, b, None, None] * np.exp(-d2 / (2 * spec.radii[b] ** 2))
        img += blob[..., None] * spec.colors[b]
    img += rng.normal((n, size, size, 3), scale=noise_sigma, dtype=np.float64)
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def upstream_composition_spec(seed: int, class_id: int) -> ClassSpec:
    """Blob-composition upstream class: random cells, random hues.

    Same rendering family as the downstream classes so the pretrained
    backbone learns to bind colors to positions, but signatures are drawn
    from an independent stream with free hues: no downstream group palette
    or cell pool is reproduced.
    """
    prm = RngStream(seed).child(f"upstream-comp/{class_id}")
    cells = tuple(int(c) for c in prm.permutation(GRID_N * GRID_N)[:3])
    centers = np.array([((c // GRID_N + 0.5) / GRID_N, (c % GRID_N + 0.5) / GRID_N)
                        for c in cells], dtype=np.float64)
    radii = prm.uniform(0.080, 0.105, (3,), dtype=np.float64)
    hues = prm.uniform(0.0, 1.0, (3,), dtype=np.float64)
    rows = []
    for k in range(3):
        u = _hue_to_rgb(float(hues[k]) + k / 3.0)
        d = u - u.mean()
        rows.append(0.60 * d / np.abs(d).max())
    return ClassSpec(UPSTREAM_ID_BASE + class_id, -1, cells, centers, radii,
                     np.stack(rows), BASE_COLOR.copy())


def render_upstream_class(seed: int, class_id: int, n: int, rng: RngStream,
                          size: int = 32, noise_sigma: float = 0.04) -> np.ndarray:
    """Grating-family instances for one upstream class."""
    prm = RngStream(seed).child(f"upstream-class/{class_id}")
    theta = float(prm.uniform(0.0, np.pi, ()))
    freq = float(prm.uniform(2.0, 6.0, ()))
    phase = float(prm.uniform(0.0, 2 * np.pi, ()))
    color_a = 0.5 + 0.35 * _hue_to_rgb(class_id * GOLDEN)
    color_b = 0.5 + 0.35 * _hue_to_rgb(class_id * GOLDEN + 0.5)
    checker_n = int(prm.integers(2, 6))

    yy, xx = _grid(size)
    proj = np.cos(theta) * xx + np.sin(theta) * yy
    dphase = rng.normal((n,), scale=0.35, dtype=np.float64)
    wave = 0.5 + 0.5 * np.sin(2 * np.pi * freq * proj[None] + phase + dphase[:, None, None])
    checker = ((np.floor(xx * checker_n) + np.floor(yy * checker_n)) % 2)
    field = 0.75 * wave + 0.25 * checker[None]
    img = field[..., None] * color_a + (1.0 - field[..., None]) * color_b
    img += rng.normal((n, size, size, 3), scale=noise_sigma, dtype=np.float64)
    return np.clip(img, 0.0, 1.0).astype(np.float32)


@dataclass
class LabeledDataset:
    images: np.ndarray
    labels: np.ndarray

    def __len__(self) -> int:
        return len(self.labels)


def make_upstream(seed: int, n_classes: int = 20, per_class: int = 100,
                  size: int = 32) -> LabeledDataset:
    """Upstream pretraining set; label ids offset into their own space.

    Most classes are gratings; every eighth is a blob composition, so the
    backbone learns color detectors and a little color-position binding
    before it is frozen, without becoming an expert on compositions.
    """
    if n_classes < 2:
        raise ValueError("make_upstream: need at least 2 classes")
    images, labels = [], []
    for k in range(n_classes):
        rng = RngStream(seed).child(f"upstream-inst/{k}")
        if k % 4 == 1:
            images.append(render_class(upstream_composition_spec(seed, k), per_class,
                                       rng, size=size, noise_sigma=0.04))
        else:
            images.append(render_upstream_class(seed, k, per_class, rng, size=size))
        labels.append(np.full(per_class, UPSTREAM_ID_BASE + k, dtype=np.int64))
    return LabeledDataset(np.concatenate(images), np.concatenate(labels))


def make_probe(seed: int, n: int = 256, n_classes: int = 16, size: int = 32) -> np.ndarray:
    """Reference batch of imaginary-group images, for logit calibration.

    Each chunk renders a class of a group that does not exist: a banded
    palette at a random hue center with random cells, drawn and rendered
    exactly like downstream data. The batch is distribution-matched to
    real tasks without reproducing any class, so a head calibrated on it
    measures how much more a slice responds to an input than to a foreign
    group's content.
    """
    per = -(-n // n_classes)
    chunks = []
    for k in range(n_classes):
        prm = RngStream(seed).child(f"probe-spec/{k}")
        center = float(prm.uniform(0.0, 1.0, ()))
        pool = np.sort(prm.permutation(GRID_N * GRID_N)[:CELLS_PER_GROUP])
        idx = int(prm.integers(0, N_GROUP_SIGNATURES))
        combo = _CELL_COMBOS[idx // len(_COLOR_PERMS)]
        order = _COLOR_PERMS[idx % len(_COLOR_PERMS)]
        cells = tuple(int(pool[i]) for i in combo)
        centers = np.array([((c // GRID_N + 0.5) / GRID_N, (c % GRID_N + 0.5) / GRID_N)
                            for c in cells], dtype=np.float64)
        radii = prm.uniform(0.080, 0.105, (3,), dtype=np.float64)
        spec = ClassSpec(-1, -1, cells, centers, radii,
                         _triple_rows(center)[list(order)], BASE_COLOR.copy())
        rng = RngStream(seed).child(f"probe/{k}")
        chunks.append(render_class(spec, per, rng, size=size))
    return np.concatenate(chunks)[:n]


def _split_task(images: np.ndarray, labels: np.ndarray, label_set, train_frac: float = 0.8) -> TaskData:
    """Per-class 80/20 split; instances are iid so a tail split is unbiased."""
    tr_x, tr_y, te_x, te_y = [], [], [], []
    for c in label_set:
        mask = labels == c
        xs, ys = images[mask], labels[mask]
        n_train = int(round(len(ys) * train_frac))
        tr_x.append(xs[:n_train]); tr_y.append(ys[:n_train])
        te_x.append(xs[n_train:]); te_y.append(ys[n_train:])
    return TaskData(np.concatenate(tr_x), np.concatenate(tr_y),
                    np.concatenate(te_x), np.concatenate(te_y), tuple(label_set))


def make_cil_stream(seed: int, n_tasks: int = 5, classes_per_task: int = 4,
                    per_class: int = 250, size: int = 32,
                    shuffle_seed: int | None = None) -> TaskStream:
    """Class-incremental stream with pairwise-disjoint label sets.

    Tasks are built from whole class groups so each task is a coherent unit,
    the way incremental benchmarks split a labeled corpus by superclass.
    Class content depends only on (seed, class id); ``shuffle_seed`` controls
    only the group-to-task assignment, so reshuffling never changes what a
    class looks like.
    """
    if n_tasks < 2:
        raise ValueError("make_cil_stream: need at least 2 tasks")
    if classes_per_task % GROUP_SIZE:
        raise ValueError(f"make_cil_stream: classes_per_task must be a multiple of {GROUP_SIZE}")
    groups_per_task = classes_per_task // GROUP_SIZE
    order = RngStream(seed if shuffle_seed is None else shuffle_seed).child("task-assignment")
    gperm = order.permutation(n_tasks * groups_per_task)
    tasks = []
    for t in range(n_tasks):
        gids = gperm[t * groups_per_task:(t + 1) * groups_per_task]
        label_set = sorted(int(g) * GROUP_SIZE + i for g in gids for i in range(GROUP_SIZE))
        imgs, labs = [], []
        for c in label_set:
            rng = RngStream(seed).child(f"inst/{c}")
            imgs.append(render_class(class_spec(seed, c), per_class, rng, size=size))
            labs.append(np.full(per_class, c, dtype=np.int64))
        tasks.append(_split_task(np.concatenate(imgs), np.concatenate(labs), label_set))
    return TaskStream(tasks, mode="cil")


def apply_domain(images: np.ndarray, spec: DomainSpec, rng: RngStream) -> np.ndarray:
    """Rotate, rescale intensity, and noise a batch of images."""
    out = images.astype(np.float64)
    if spec.rotation_deg != 0.0:
        out = ndimage.rotate(out, spec.rotation_deg, axes=(2, 1), reshape=False,
                             order=1, mode="nearest")
    out = out * spec.intensity_scale + spec.intensity_shift
    if spec.noise_sigma > 0:
        out = out + rng.normal(out.shape, scale=spec.noise_sigma, dtype=np.float64)
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def default_domains(n: int) -> list[DomainSpec]:
    """A ladder of increasingly shifted domains; domain 1 is identity."""
    specs = [DomainSpec()]
    for j in range(1, n):
        specs.append(DomainSpec(rotation_deg=22.0 * j,
                                intensity_scale=1.0 - 0.12 * j,
                                intensity_shift=0.05 * j,
                                noise_sigma=0.02 * j))
    return specs


def make_dil_stream(seed: int, domains: list[DomainSpec], n_classes: int = 4,
                    per_class: int = 250, size: int = 32) -> TaskStream:
    """Domain-incremental stream: one shared label set, per-task transforms."""
    if len(domains) < 2:
        raise ValueError("make_dil_stream: need at least 2 domains")
    label_set = list(range(n_classes))
    tasks = []
    for d_idx, dom in enumerate(domains):
        imgs, labs = [], []
        for c in label_set:
            rng = RngStream(seed).child(f"dil-inst/{d_idx}/{c}")
            base = render_class(class_spec(seed, c), per_class, rng, size=size)
            dom_rng = RngStream(seed).child(f"dil-noise/{d_idx}/{c}")
            imgs.append(apply_domain(base, dom, dom_rng))
            labs.append(np.full(per_class, c, dtype=np.int64))
        tasks.append(_split_task(np.concatenate(imgs), np.concatenate(labs), label_set))
    return TaskStream(tasks, mode="dil")


def dump_stream(stream: TaskStream, path):
    """Binary dump (images then labels per task) plus a text manifest."""
    path = Path(path)
    manifest = []
    offset = 0
    with open(path, "wb") as fh:
        for t in range(1, stream.n_tasks + 1):
            td = stream.task(t)
            for split, (xs, ys) in (("train", (td.train_x, td.train_y)),
                                    ("test", (td.test_x, td.test_y))):
                img = np.ascontiguousarray(xs, dtype="<f4")
                lab = np.ascontiguousarray(ys, dtype="<i8")
                fh.write(img.tobytes()); fh.write(lab.tobytes())
                shape_csv = ",".join(str(d) for d in img.shape)
                manifest.append(f"task {t} {split} n={len(ys)} shape={shape_csv} offset={offset}")
                offset += img.nbytes + lab.nbytes
        for t in range(1, stream.n_tasks + 1):
            manifest.append(f"labelmap task {t}: {','.join(str(c) for c in stream.label_set(t))}")
    Path(str(path) + ".manifest").write_text("\n".join(manifest) + "\n")
