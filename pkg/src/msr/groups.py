"""Finite groups, matrix representations, and the stacked symmetry matrix.

Element 0 is always the identity.  Representations act on flattened signals
(row-major for images) and are stored as an ``(order, dim, dim)`` array.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

ASSOC_EXHAUSTIVE_MAX = 64
HOMOMORPHISM_RTOL = 1e-10
INTERPOLATED_ATOL = 0.5


class GroupError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class FiniteGroup:
    name: str
    table: np.ndarray
    inverse: np.ndarray = field(init=False)
    labels: tuple = ()

    def __post_init__(self):
        table = np.asarray(self.table, dtype=np.intp)
        table.setflags(write=False)
        object.__setattr__(self, "table", table)
        m = table.shape[0]
        if table.shape != (m, m) or m == 0:
            raise GroupError(f"{self.name}: table must be square and non-empty, got {table.shape}")
        if table.min() < 0 or table.max() >= m:
            raise GroupError(f"{self.name}: table not closed")
        ar = np.arange(m)
        if not (np.array_equal(table[0], ar) and np.array_equal(table[:, 0], ar)):
            raise GroupError(f"{self.name}: element 0 is not the identity")
        inv = np.argmax(table == 0, axis=1)
        if not np.all(table[ar, inv] == 0):
            raise GroupError(f"{self.name}: some element has no inverse")
        inv.setflags(write=False)
        object.__setattr__(self, "inverse", inv)
        if m <= ASSOC_EXHAUSTIVE_MAX:
            a, b, c = ar[:, None, None], ar[None, :, None], ar[None, None, :]
            ok = np.array_equal(table[table[a, b], c], table[a, table[b, c]])
        else:
            rng = np.random.default_rng(0)
            a, b, c = rng.integers(0, m, size=(3, 4096))
            ok = np.array_equal(table[table[a, b], c], table[a, table[b, c]])
        if not ok:
            raise GroupError(f"{self.name}: operation is not associative")

    @property
    def order(self) -> int:
        return self.table.shape[0]

    def mul(self, a: int, b: int) -> int:
        return int(self.table[a, b])

    def is_abelian(self) -> bool:
        return bool(np.array_equal(self.table, self.table.T))

    def __repr__(self):
        return f"FiniteGroup({self.name}, order={self.order})"


def cyclic_group(n: int) -> FiniteGroup:
    if n < 1:
        raise GroupError("cyclic group needs n >= 1")
    ar = np.arange(n)
    return FiniteGroup(f"C{n}", (ar[:, None] + ar[None, :]) % n, labels=tuple(range(n)))


def dihedral_group(n: int) -> FiniteGroup:
    """D_n of order 2n.  Element ``f*n + a`` is r^a s^f (rotate after flip)."""
    if n < 1:
        raise GroupError("dihedral group needs n >= 1")
    m = 2 * n
    table = np.empty((m, m), dtype=np.intp)
    for i in range(m):
        f1, a1 = divmod(i, n)
        for j in range(m):
            f2, a2 = divmod(j, n)
            # s r^b = r^-b s
            a = (a1 + (-a2 if f1 else a2)) % n
            table[i, j] = ((f1 + f2) % 2) * n + a
    labels = tuple(f"r{a}" + ("s" if f else "") for f in range(2) for a in range(n))
    return FiniteGroup(f"D{n}", table, labels=labels)


def symmetric_group(n: int) -> FiniteGroup:
    """S_n with permutations in lexicographic order; (a*b)(i) = a(b(i))."""
    if not 1 <= n <= 5:
        raise GroupError(f"symmetric group supported for 1 <= n <= 5, got {n}")
    perms = list(itertools.permutations(range(n)))
    index = {p: i for i, p in enumerate(perms)}
    table = np.array(
        [[index[tuple(a[b[i]] for i in range(n))] for b in perms] for a in perms], dtype=np.intp
    )
    return FiniteGroup(f"S{n}", table, labels=tuple(perms))


# ---------------------------------------------------------------------------
# representations


@dataclass(frozen=True, eq=False)
class Representation:
    group: FiniteGroup
    matrices: np.ndarray
    kind: str = "general"
    name: str = ""
    homomorphism_error: float = field(init=False, default=0.0)

    def __post_init__(self):
        mats = np.asarray(self.matrices, dtype=np.float64)
        mats.setflags(write=False)
        object.__setattr__(self, "matrices", mats)
        m = self.group.order
        if mats.ndim != 3 or mats.shape[0] != m or mats.shape[1] != mats.shape[2]:
            raise GroupError(f"expected {m} square matrices, got array of shape {mats.shape}")
        if self.kind not in ("permutation", "interpolated", "general"):
            raise GroupError(f"unknown representation kind {self.kind!r}")
        n = mats.shape[1]
        if self.kind == "permutation":
            ok = np.all((mats == 0) | (mats == 1))
            ok = ok and np.all(mats.sum(axis=1) == 1) and np.all(mats.sum(axis=2) == 1)
            if not ok:
                raise GroupError("permutation representation has a non-permutation matrix")
        if self.kind != "interpolated" and not np.allclose(mats[0], np.eye(n), rtol=0, atol=1e-12):
            raise GroupError("identity element must map to the identity matrix")
        # pi(g h) vs pi(g) pi(h), all pairs
        prods = np.einsum("gij,hjk->ghik", mats, mats)
        dev = mats[self.group.table] - prods
        if self.kind == "interpolated":
            # resampled one-hots blur by construction; judge on smooth images
            dev = dev @ smooth_probes(n).T
        err = np.abs(dev).max()
        object.__setattr__(self, "homomorphism_error", float(err))
        if self.kind == "permutation":
            bad = err != 0
        elif self.kind == "interpolated":
            bad = err > INTERPOLATED_ATOL
        else:
            bad = err > HOMOMORPHISM_RTOL * max(1.0, np.abs(prods).max())
        if bad:
            raise GroupError(f"not a homomorphism: max deviation {err:.3g}")

    @property
    def dim(self) -> int:
        return self.matrices.shape[1]

    def __getitem__(self, g: int) -> np.ndarray:
        return self.matrices[g]


def smooth_probes(dim: int, sigma: float = 1.0) -> np.ndarray:
    """Unit-peak Gaussian blobs on a 3x3 lattice of centers, one per row.

    ``dim`` must be a perfect square (a flattened square image).
    """
    side = math.isqrt(dim)
    if side * side != dim:
        raise GroupError(f"probe images need a square dimension, got {dim}")
    c = (side - 1) / 2.0
    yy, xx = np.mgrid[:side, :side]
    probes = []
    for cy in (c / 2, c, 1.5 * c):
        for cx in (c / 2, c, 1.5 * c):
            probes.append(np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * sigma**2)).ravel())
    return np.stack(probes)


def permutation_representation(group: FiniteGroup, point_maps: np.ndarray, name="") -> Representation:
    """Representation from index actions: ``(pi(g) v)[point_maps[g][i]] = v[i]``."""
    point_maps = np.asarray(point_maps, dtype=np.intp)
    m, n = point_maps.shape
    mats = np.zeros((m, n, n))
    cols = np.arange(n)
    for g in range(m):
        mats[g, point_maps[g], cols] = 1.0
    return Representation(group, mats, kind="permutation", name=name)


def regular_representation(group: FiniteGroup) -> Representation:
    """Group acting on functions over itself: ``(pi(g) v)[i] = v[g^-1 i]``."""
    # slot i moves to slot g*i
    return permutation_representation(group, group.table, name=f"regular({group.name})")


def shift_representation(group: FiniteGroup, dim: int | None = None) -> Representation:
    """Circular shifts: ``(pi(g) v)[i] = v[i - g mod n]`` for the cyclic group."""
    n = group.order
    if dim is not None and dim != n:
        raise GroupError(f"shift representation of {group.name} needs dim {n}, got {dim}")
    if not np.array_equal(group.table, cyclic_group(n).table):
        raise GroupError(f"shift representation needs a cyclic group, got {group.name}")
    ar = np.arange(n)
    maps = (ar[None, :] + ar[:, None]) % n
    return permutation_representation(group, maps, name=f"shift{n}")


def natural_representation(group: FiniteGroup) -> Representation:
    """S_n permuting coordinates: ``(pi(s) v)[s(i)] = v[i]``."""
    perms = np.asarray(group.labels, dtype=np.intp)
    if perms.ndim != 2:
        raise GroupError(f"{group.name} carries no permutation labels")
    return permutation_representation(group, perms, name=f"natural({group.name})")


# -- image grids ------------------------------------------------------------


def _grid_structure(group: FiniteGroup) -> tuple[int, bool]:
    """(rotation order, has_flip) for cyclic or dihedral groups."""
    m = group.order
    if group.name.startswith("C") and np.array_equal(group.table, cyclic_group(m).table):
        return m, False
    if group.name.startswith("D") and m % 2 == 0:
        if np.array_equal(group.table, dihedral_group(m // 2).table):
            return m // 2, True
    raise GroupError(f"image representations need a cyclic or dihedral group, got {group.name}")


def _rotation_matrix(side: int, angle_deg: float, interpolation: str) -> np.ndarray:
    """Resampling matrix for rotating a side x side image about its center.

    A quarter turn sends pixel (r, c) to (c, side-1-r).  Source pixels that
    fall outside the frame contribute nothing (zero fill).
    """
    n = side * side
    center = (side - 1) / 2.0
    theta = math.radians(angle_deg)
    cos_t, sin_t = math.cos(theta), math.sin(theta)
    mat = np.zeros((n, n))
    for r2 in range(side):
        for c2 in range(side):
            y2, x2 = r2 - center, c2 - center
            # inverse map: rotate the output coordinate by -theta
            y = cos_t * y2 - sin_t * x2
            x = sin_t * y2 + cos_t * x2
            ys, xs = y + center, x + center
            if abs(ys - round(ys)) < 1e-9:
                ys = float(round(ys))
            if abs(xs - round(xs)) < 1e-9:
                xs = float(round(xs))
            out = r2 * side + c2
            if interpolation == "exact90":
                r, c = int(round(ys)), int(round(xs))
                mat[out, r * side + c] = 1.0
                continue
            r0, c0 = math.floor(ys), math.floor(xs)
            fy, fx = ys - r0, xs - c0
            for dr, wy in ((0, 1 - fy), (1, fy)):
                for dc, wx in ((0, 1 - fx), (1, fx)):
                    w = wy * wx
                    rr, cc = r0 + dr, c0 + dc
                    if w != 0 and 0 <= rr < side and 0 <= cc < side:
                        mat[out, rr * side + cc] += w
    return mat


def _flip_matrix(side: int) -> np.ndarray:
    n = side * side
    mat = np.zeros((n, n))
    for r in range(side):
        for c in range(side):
            mat[r * side + (side - 1 - c), r * side + c] = 1.0
    return mat


def rotation_representation_2d(
    group: FiniteGroup, side: int, interpolation: str = "exact90"
) -> Representation:
    """Rotations (and flips, for dihedral groups) of side x side images.

    Element r^a rotates by ``a * 360/N`` degrees; dihedral elements r^a s
    first mirror horizontally.  ``exact90`` gives permutation matrices and
    needs N dividing 4; ``bilinear`` resamples each rotation directly.
    """
    n_rot, has_flip = _grid_structure(group)
    if interpolation == "exact90":
        if 4 % n_rot:
            raise GroupError(f"exact90 needs rotation order dividing 4, got {n_rot}")
    elif interpolation == "bilinear":
        if 360 % n_rot or n_rot > 8 or 8 % n_rot:
            raise GroupError(f"bilinear supports rotation orders dividing 8, got {n_rot}")
    else:
        raise GroupError(f"unknown interpolation {interpolation!r}")
    if side < 1:
        raise GroupError("side must be >= 1")
    rots = [_rotation_matrix(side, a * 360.0 / n_rot, interpolation) for a in range(n_rot)]
    flip = _flip_matrix(side)
    mats = list(rots)
    if has_flip:
        mats += [r @ flip for r in rots]
    exact = interpolation == "exact90" or all(
        np.all((m == 0) | (m == 1)) and np.all(m.sum(axis=1) == 1) for m in mats
    )
    kind = "permutation" if exact else "interpolated"
    return Representation(group, np.stack(mats), kind=kind, name=f"{group.name}@{side}x{side}")


def flip_representation(side: int) -> Representation:
    """Horizontal mirror of side x side images as a representation of C2."""
    if side < 1:
        raise GroupError("side must be >= 1")
    mats = np.stack([np.eye(side * side), _flip_matrix(side)])
    return Representation(cyclic_group(2), mats, kind="permutation", name=f"flip{side}")


def tensor_representation(a: Representation, b: Representation) -> Representation:
    """Kronecker product of two representations of the same group."""
    if a.group is not b.group and not np.array_equal(a.group.table, b.group.table):
        raise GroupError("tensor product needs representations of one group")
    mats = np.stack([np.kron(x, y) for x, y in zip(a.matrices, b.matrices)])
    kind = "permutation" if a.kind == b.kind == "permutation" else (
        "interpolated" if "interpolated" in (a.kind, b.kind) else "general"
    )
    return Representation(a.group, mats, kind=kind, name=f"{a.name}*{b.name}")


# ---------------------------------------------------------------------------
# symmetry matrix and the brute-force oracle


@dataclass(frozen=True, eq=False)
class SymmetryMatrixBlueprint:
    group: FiniteGroup
    rep: Representation
    matrix: np.ndarray

    def block(self, i: int) -> np.ndarray:
        n = self.rep.dim
        return self.matrix[i * n : (i + 1) * n]


def build_symmetry_matrix(rep: Representation) -> SymmetryMatrixBlueprint:
    """Stack pi(g_1), ..., pi(g_m) into an (m*n) x n matrix."""
    mat = rep.matrices.reshape(rep.group.order * rep.dim, rep.dim).copy()
    mat.setflags(write=False)
    return SymmetryMatrixBlueprint(rep.group, rep, mat)


def group_correlation(rep: Representation, signal, filt) -> np.ndarray:
    """out[j] = sum_i signal[i] * (pi(g_j) filt)[i], straight from the definition."""
    signal = np.asarray(signal, dtype=np.float64)
    filt = np.asarray(filt, dtype=np.float64)
    n = rep.dim
    if signal.shape != (n,) or filt.shape != (n,):
        raise GroupError(f"signal and filter must have shape ({n},), got {signal.shape}, {filt.shape}")
    out = np.zeros(rep.group.order)
    for j in range(rep.group.order):
        mat = rep.matrices[j]
        total = 0.0
        for i in range(n):
            moved = 0.0
            for k in range(n):
                moved += mat[i, k] * filt[k]
            total += signal[i] * moved
        out[j] = total
    return out


def equivariance_error(
    layer_fn: Callable,
    rep_in: Representation,
    rep_out: Representation,
    trials: int = 10,
    seed: int = 0,
) -> float:
    """Mean relative residual of phi(pi_in(g) x) - pi_out(g) phi(x) over trials and g."""
    if rep_in.group.order != rep_out.group.order:
        raise GroupError("input and output representations must share a group")
    rng = np.random.default_rng(seed)
    total = 0.0
    count = 0
    for _ in range(trials):
        x = rng.standard_normal(rep_in.dim)
        y = np.asarray(layer_fn(x), dtype=np.float64).reshape(-1)
        if y.shape != (rep_out.dim,):
            raise GroupError(f"layer output has {y.size} entries, rep_out expects {rep_out.dim}")
        denom = max(np.linalg.norm(y), 1e-12)
        for g in range(rep_in.group.order):
            lhs = np.asarray(layer_fn(rep_in.matrices[g] @ x), dtype=np.float64).reshape(-1)
            total += np.linalg.norm(lhs - rep_out.matrices[g] @ y) / denom
            count += 1
    return total / count


def equivariance_error_ops(
    layer_fn: Callable,
    ops_in: list,
    ops_out: list,
    trials: int = 10,
    seed: int = 0,
    in_mask: np.ndarray | None = None,
    out_masks: list | None = None,
) -> float:
    """Like :func:`equivariance_error` for plain linear operators.

    Used for zero-filled translations, which are not representations on a
    finite window.  ``in_mask`` zeroes input entries so shifts lose nothing;
    ``out_masks[k]`` restricts the comparison for operator pair k.
    """
    rng = np.random.default_rng(seed)
    total, count = 0.0, 0
    for _ in range(trials):
        x = rng.standard_normal(ops_in[0].shape[1])
        if in_mask is not None:
            x = x * in_mask
        y = np.asarray(layer_fn(x), dtype=np.float64).reshape(-1)
        for k, (a, b) in enumerate(zip(ops_in, ops_out)):
            diff = np.asarray(layer_fn(a @ x), dtype=np.float64).reshape(-1) - b @ y
            ref = y
            if out_masks is not None:
                diff, ref = diff[out_masks[k]], y[out_masks[k]]
            total += np.linalg.norm(diff) / max(np.linalg.norm(ref), 1e-12)
            count += 1
    return total / count


def translation_ops(n_in: int, n_out: int, max_shift: int):
    """Zero-fill shift operators and masks for valid-mode 1-D layers.

    Returns (ops_in, ops_out, in_mask, out_masks) for shifts 1..max_shift.
    """
    ops_in, ops_out, out_masks = [], [], []
    for t in range(1, max_shift + 1):
        ops_in.append(np.eye(n_in, k=-t))
        ops_out.append(np.eye(n_out, k=-t))
        out_masks.append(np.arange(n_out) >= t)
    in_mask = (np.arange(n_in) < n_in - max_shift).astype(float)
    return ops_in, ops_out, in_mask, out_masks
