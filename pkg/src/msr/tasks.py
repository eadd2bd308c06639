"""Task distributions: synthetic symmetric regression, few-shot episodes, augmentation.

All generators are pure functions of (spec, master seed, task id).  Task
sets are lazy sequences; a task is rebuilt from its seed on access.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from functools import lru_cache
from typing import Sequence

import numpy as np

from . import groups as G
from .seeding import FAMILY, child_rng, task_seed

FAMILIES = ("lc_rank_k", "group_equivariant_2d", "fewshot_images")
GROUP_CHOICES = {
    "C1": ("cyclic", 1, "exact90"),
    "C4": ("cyclic", 4, "exact90"),
    "D4": ("dihedral", 4, "exact90"),
    "C8": ("cyclic", 8, "bilinear"),
    "D8": ("dihedral", 8, "bilinear"),
}


class TaskError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class Task:
    support: tuple  # (inputs, targets)
    query: tuple
    task_id: int
    kind: str  # "regression" | "classification"
    seed: int = 0

    @property
    def support_x(self):
        return self.support[0]

    @property
    def support_y(self):
        return self.support[1]

    @property
    def query_x(self):
        return self.query[0]

    @property
    def query_y(self):
        return self.query[1]


@dataclass(frozen=True)
class TaskDistributionSpec:
    family: str
    n_train: int = 400
    n_test: int = 100
    examples_per_train_task: int = 20
    test_support: int = 1
    test_query: int = 10
    # support size of training tasks; defaults to test_support so train and
    # test adaptation see the same amount of data
    train_support: int | None = None
    master_seed: int = 0
    # lc_rank_k
    rank: int = 1
    input_dim: int = 16
    width: int = 3
    # group_equivariant_2d
    group: str = "C4"
    side: int = 9
    kernel: int = 3

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise TaskError(f"unknown task family {self.family!r}")


class TaskSet(Sequence):
    """Lazy, indexable set of tasks with globally unique ids."""

    def __init__(self, make, ids: Sequence[int], seeds: Sequence[int]):
        self._make = make
        self.ids = list(ids)
        self.seeds = list(seeds)
        self._cache = lru_cache(maxsize=4096)(self._build)

    def _build(self, i: int) -> Task:
        return self._make(self.ids[i], self.seeds[i])

    def __len__(self):
        return len(self.ids)

    def __getitem__(self, i):
        if isinstance(i, slice):
            return [self[j] for j in range(*i.indices(len(self)))]
        if i < 0:
            i += len(self)
        return self._cache(i)

    def manifest(self) -> str:
        """Line-delimited ``task_id<TAB>seed`` records."""
        return "".join(f"{i}\t{s}\n" for i, s in zip(self.ids, self.seeds))


def read_manifest(text: str) -> list[tuple[int, int]]:
    out = []
    for n, line in enumerate(text.splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 2:
            raise TaskError(f"manifest line {n}: expected 'task_id<TAB>seed'")
        out.append((int(parts[0]), int(parts[1])))
    return out


def _split_sets(spec: TaskDistributionSpec, make_train, make_test):
    if spec.n_train < 0 or spec.n_test < 0:
        raise TaskError("task counts must be non-negative")
    train_ids = range(spec.n_train)
    test_ids = range(spec.n_train, spec.n_train + spec.n_test)
    train = TaskSet(make_train, train_ids, [task_seed(spec.master_seed, i) for i in train_ids])
    test = TaskSet(make_test, test_ids, [task_seed(spec.master_seed, i) for i in test_ids])
    return train, test


def _split_counts(spec, train: bool) -> tuple[int, int]:
    if train:
        n = spec.examples_per_train_task
        ns = spec.test_support if spec.train_support is None else spec.train_support
        if ns < 1 or n - ns < 1:
            raise TaskError(
                f"training tasks need support >= 1 and query >= 1, got {ns} of {n} examples")
        return ns, n - ns
    return spec.test_support, spec.test_query


# ---------------------------------------------------------------------------
# rank-k locally connected regression


def lc_mixing(spec: TaskDistributionSpec) -> np.ndarray:
    """Per-location mixing coefficients C (L x rank), shared by all tasks.

    Rank 1 uses a constant column, so every task is a convolution.  Higher
    ranks draw C once per distribution with N(0,1) entries; tasks then
    differ only in their ``rank`` basis filters, which keeps every task's
    weight in one fixed linear subspace.
    """
    L = spec.input_dim - spec.width + 1
    if spec.rank == 1:
        return np.ones((L, 1))
    return child_rng(spec.master_seed, FAMILY, 0).standard_normal((L, spec.rank))


def lc_generator_filters(mix: np.ndarray, width: int, rng) -> np.ndarray:
    """Per-location filters F = C B for one task, with basis B drawn from ``rng``."""
    basis = rng.standard_normal((mix.shape[1], width))
    return mix @ basis


def lc_apply(F: np.ndarray, x: np.ndarray) -> np.ndarray:
    L, w = F.shape
    win = np.lib.stride_tricks.sliding_window_view(x, w, axis=-1)[..., :L, :]
    return np.einsum("bjt,jt->bj", win, F)


def make_lc_task(spec: TaskDistributionSpec, task_id: int, seed: int, train: bool,
                 mix: np.ndarray | None = None) -> Task:
    rng = np.random.default_rng(seed)
    F = lc_generator_filters(lc_mixing(spec) if mix is None else mix, spec.width, rng)
    ns, nq = _split_counts(spec, train)
    x = rng.standard_normal((ns + nq, spec.input_dim))
    y = lc_apply(F, x)
    return Task((x[:ns], y[:ns]), (x[ns:], y[ns:]), task_id, "regression", seed)


def lc_task_filters(spec: TaskDistributionSpec, seed: int) -> np.ndarray:
    """Ground-truth filters of the task with this seed."""
    return lc_generator_filters(lc_mixing(spec), spec.width, np.random.default_rng(seed))


def gen_lc_tasks(spec: TaskDistributionSpec):
    if spec.rank < 1:
        raise TaskError(f"rank must be positive, got {spec.rank}")
    if spec.input_dim < spec.width + 1:
        raise TaskError(f"input_dim {spec.input_dim} too small for width {spec.width}")
    mix = lc_mixing(spec)
    return _split_sets(
        spec,
        lambda i, s: make_lc_task(spec, i, s, True, mix),
        lambda i, s: make_lc_task(spec, i, s, False, mix),
    )


# ---------------------------------------------------------------------------
# group-equivariant 2-D convolution regression


def grid_group(name: str, side: int) -> G.Representation:
    """The named group's representation on a side x side grid."""
    if name not in GROUP_CHOICES:
        raise TaskError(f"unsupported group {name!r}; choose from {sorted(GROUP_CHOICES)}")
    fam, n, interp = GROUP_CHOICES[name]
    grp = G.cyclic_group(n) if fam == "cyclic" else G.dihedral_group(n)
    return G.rotation_representation_2d(grp, side, interp)


@lru_cache(maxsize=32)
def _group_stack(name: str, kernel: int) -> np.ndarray:
    return G.build_symmetry_matrix(grid_group(name, kernel)).matrix


def group_filter_bank(name: str, base_filter: np.ndarray) -> np.ndarray:
    """(|G|, 1, k, k) bank whose channel i is pi(g_i) applied to the base filter."""
    k = base_filter.shape[-1]
    stack = _group_stack(name, k)
    m = stack.shape[0] // (k * k)
    return (stack @ base_filter.reshape(-1)).reshape(m, 1, k, k)


def conv_valid_np(x: np.ndarray, bank: np.ndarray) -> np.ndarray:
    """x (B, 1, H, W), bank (O, 1, k, k) -> (B, O, H-k+1, W-k+1)."""
    k = bank.shape[-1]
    win = np.lib.stride_tricks.sliding_window_view(x[:, 0], (k, k), axis=(1, 2))
    return np.einsum("bijuv,ouv->boij", win, bank[:, 0])


def make_group_task(spec: TaskDistributionSpec, task_id: int, seed: int, train: bool) -> Task:
    rng = np.random.default_rng(seed)
    base = rng.standard_normal((spec.kernel, spec.kernel))
    bank = group_filter_bank(spec.group, base)
    ns, nq = _split_counts(spec, train)
    x = rng.standard_normal((ns + nq, 1, spec.side, spec.side))
    y = conv_valid_np(x, bank)
    return Task((x[:ns], y[:ns]), (x[ns:], y[ns:]), task_id, "regression", seed)


def gen_group_equivariant_tasks(spec: TaskDistributionSpec):
    grid_group(spec.group, spec.kernel)  # validates the name
    if spec.side < spec.kernel:
        raise TaskError(f"side {spec.side} smaller than kernel {spec.kernel}")
    return _split_sets(
        spec,
        lambda i, s: make_group_task(spec, i, s, True),
        lambda i, s: make_group_task(spec, i, s, False),
    )


# ---------------------------------------------------------------------------
# image transforms (query-only augmentation)


@dataclass(frozen=True)
class AugmentSpec:
    crop_scale_range: tuple = (0.8, 1.0)
    flip_prob_h: float = 0.5
    flip_prob_v: float = 0.5
    max_rotation_deg: float = 30.0
    interpolation: str = "bilinear"
    output_side: int = 28

    def is_identity(self) -> bool:
        return (
            self.crop_scale_range[0] == self.crop_scale_range[1] == 1.0
            and self.flip_prob_h == 0
            and self.flip_prob_v == 0
            and self.max_rotation_deg == 0
        )


IDENTITY_AUGMENT = AugmentSpec((1.0, 1.0), 0.0, 0.0, 0.0)


@dataclass(frozen=True)
class TransformParams:
    crop_top: int
    crop_left: int
    crop_side: int
    flip_v: bool
    flip_h: bool
    angle_deg: float
    output_side: int


def draw_transform(spec: AugmentSpec, side: int, rng) -> TransformParams:
    lo, hi = spec.crop_scale_range
    scale = rng.uniform(lo, hi) if hi > lo else lo
    cs = min(side, max(1, int(round(math.sqrt(scale) * side))))
    top = int(rng.integers(0, side - cs + 1))
    left = int(rng.integers(0, side - cs + 1))
    flip_v = bool(rng.random() < spec.flip_prob_v)
    flip_h = bool(rng.random() < spec.flip_prob_h)
    m = spec.max_rotation_deg
    angle = float(rng.uniform(-m, m)) if m > 0 else 0.0
    return TransformParams(top, left, cs, flip_v, flip_h, angle, spec.output_side)


def _snap(v: np.ndarray) -> np.ndarray:
    r = np.round(v)
    return np.where(np.abs(v - r) < 1e-9, r, v)


def _bilinear_sample(img: np.ndarray, ys: np.ndarray, xs: np.ndarray) -> np.ndarray:
    """Sample C x H x W ``img`` at float coordinates; outside reads as zero."""
    C, H, W = img.shape
    ys, xs = _snap(ys), _snap(xs)
    y0, x0 = np.floor(ys).astype(int), np.floor(xs).astype(int)
    fy, fx = ys - y0, xs - x0
    out = np.zeros((C,) + ys.shape)
    for dy, wy in ((0, 1 - fy), (1, fy)):
        for dx, wx in ((0, 1 - fx), (1, fx)):
            yy, xx = y0 + dy, x0 + dx
            w = wy * wx
            ok = (yy >= 0) & (yy < H) & (xx >= 0) & (xx < W) & (w > 0)
            vals = img[:, np.clip(yy, 0, H - 1), np.clip(xx, 0, W - 1)]
            out += np.where(ok, w, 0.0) * vals
    return out


def image_transform(img, params: TransformParams) -> np.ndarray:
    """Crop-resize, vertical then horizontal flip, then rotate; all bilinear."""
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 3:
        raise TaskError(f"image_transform expects C x H x W, got shape {img.shape}")
    C, H, W = img.shape
    cs, side = params.crop_side, params.output_side
    if cs <= 0 or params.crop_top + cs > H or params.crop_left + cs > W:
        raise TaskError(f"degenerate crop {params}")
    crop = img[:, params.crop_top : params.crop_top + cs, params.crop_left : params.crop_left + cs]
    if cs == side:
        out = crop.copy()
    else:
        # pixel-center aligned resize
        coords = (np.arange(side) + 0.5) * (cs / side) - 0.5
        coords = np.clip(coords, 0, cs - 1)
        yy, xx = np.meshgrid(coords, coords, indexing="ij")
        out = _bilinear_sample(crop, yy, xx)
    if params.flip_v:
        out = out[:, ::-1, :]
    if params.flip_h:
        out = out[:, :, ::-1]
    if params.angle_deg % 360 != 0:
        theta = math.radians(params.angle_deg)
        c = (side - 1) / 2.0
        r2, c2 = np.meshgrid(np.arange(side) - c, np.arange(side) - c, indexing="ij")
        # positive angles turn the picture counter-clockwise, as np.rot90 does
        ys = math.cos(theta) * r2 + math.sin(theta) * c2 + c
        xs = -math.sin(theta) * r2 + math.cos(theta) * c2 + c
        out = _bilinear_sample(out, ys, xs)
    return np.ascontiguousarray(out)


def augment_wrap(tasks: Sequence[Task], spec: AugmentSpec, seed: int) -> list[Task]:
    """Transform every query image independently; support sets are untouched."""
    out = []
    for t in tasks:
        qx = np.asarray(t.query_x)
        if qx.ndim != 4:
            raise TaskError(f"augment_wrap needs image tasks (N, C, H, W), got {qx.shape}")
        if spec.is_identity() and spec.output_side == qx.shape[-1]:
            out.append(t)
            continue
        rng = np.random.default_rng(task_seed(seed, t.task_id))
        aug = np.stack([image_transform(im, draw_transform(spec, im.shape[-1], rng)) for im in qx])
        out.append(replace(t, query=(aug, t.query_y)))
    return out


class AugmentedTaskSet(Sequence):
    """Lazy view applying :func:`augment_wrap` task by task."""

    def __init__(self, base: Sequence[Task], spec: AugmentSpec, seed: int):
        self.base, self.spec, self.seed = base, spec, seed

    def __len__(self):
        return len(self.base)

    def __getitem__(self, i):
        return augment_wrap([self.base[i]], self.spec, self.seed)[0]


# ---------------------------------------------------------------------------
# few-shot episodes


@dataclass
class ImageDataset:
    images: np.ndarray  # (N, H, W) in [0, 1]
    labels: np.ndarray  # (N,) int
    by_class: dict = field(init=False, repr=False)

    def __post_init__(self):
        self.by_class = {}
        for i, c in enumerate(self.labels.tolist()):
            self.by_class.setdefault(c, []).append(i)

    def __len__(self):
        return len(self.labels)

    @property
    def classes(self) -> list:
        return sorted(self.by_class)

    def subset_classes(self, classes) -> "ImageDataset":
        keep = np.isin(self.labels, list(classes))
        return ImageDataset(self.images[keep], self.labels[keep])


class EpisodeSet(Sequence):
    """Lazy n-way k-shot episodes; episode ``e`` depends only on (seed, id)."""

    def __init__(self, dataset: ImageDataset, n_way: int, k_shot: int, q_queries: int,
                 count: int, seed: int, id_offset: int = 0):
        self.eligible = [c for c in dataset.classes
                         if len(dataset.by_class[c]) >= k_shot + q_queries]
        if len(self.eligible) < n_way:
            raise TaskError(
                f"need {n_way} classes with >= {k_shot + q_queries} examples, have {len(self.eligible)}"
            )
        self.dataset, self.n_way, self.k_shot, self.q_queries = dataset, n_way, k_shot, q_queries
        self.count, self.seed, self.id_offset = count, seed, id_offset

    def __len__(self):
        return self.count

    def __getitem__(self, e):
        if isinstance(e, slice):
            return [self[j] for j in range(*e.indices(len(self)))]
        if e < 0:
            e += self.count
        if not 0 <= e < self.count:
            raise IndexError(e)
        tid = self.id_offset + e
        s = task_seed(self.seed, tid)
        rng = np.random.default_rng(s)
        chosen = rng.choice(len(self.eligible), size=self.n_way, replace=False)
        sx, sy, qx, qy = [], [], [], []
        for new_label, ci in enumerate(chosen):
            idx = self.dataset.by_class[self.eligible[ci]]
            pick = rng.choice(len(idx), size=self.k_shot + self.q_queries, replace=False)
            rows = [idx[j] for j in pick]
            sx += rows[: self.k_shot]
            sy += [new_label] * self.k_shot
            qx += rows[self.k_shot:]
            qy += [new_label] * self.q_queries
        imgs = self.dataset.images
        return Task(
            (imgs[sx][:, None], np.array(sy)),
            (imgs[qx][:, None], np.array(qy)),
            tid,
            "classification",
            s,
        )


def sample_episodes(
    dataset: ImageDataset, n_way: int, k_shot: int, q_queries: int, count: int, seed: int,
    id_offset: int = 0,
) -> EpisodeSet:
    """n-way k-shot classification tasks with disjoint support and query images."""
    return EpisodeSet(dataset, n_way, k_shot, q_queries, count, seed, id_offset)


def make_glyph_dataset(n_classes: int, per_class: int, side: int = 28, seed: int = 0):
    """Procedural glyphs: each class is a random closed polyline; instances jitter it.

    Returns (images uint8 (N, side, side), labels uint8/int (N,)).
    """
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[:side, :side].astype(float) + 0.5
    images = np.zeros((n_classes * per_class, side, side), dtype=np.uint8)
    labels = np.zeros(n_classes * per_class, dtype=np.int64)
    for c in range(n_classes):
        nv = int(rng.integers(3, 7))
        proto = rng.uniform(0.18, 0.82, size=(nv, 2))
        closed = bool(rng.random() < 0.5)
        for j in range(per_class):
            pts = (proto + rng.normal(0.0, 0.025, size=proto.shape)) * side
            width = rng.uniform(0.9, 1.6)
            segs = list(zip(pts[:-1], pts[1:]))
            if closed:
                segs.append((pts[-1], pts[0]))
            dist = np.full((side, side), np.inf)
            for a, b in segs:
                ab = b - a
                t = ((yy - a[0]) * ab[0] + (xx - a[1]) * ab[1]) / max(ab @ ab, 1e-9)
                t = np.clip(t, 0, 1)
                d = np.hypot(yy - (a[0] + t * ab[0]), xx - (a[1] + t * ab[1]))
                dist = np.minimum(dist, d)
            ink = np.clip(width - dist + 0.5, 0.0, 1.0)
            k = c * per_class + j
            images[k] = np.round(ink * 255).astype(np.uint8)
            labels[k] = c
    return images, labels
