"""Dense float64 tensors with reverse-mode autodiff.

Every backward rule is written in terms of tensor operations, so gradients
computed with ``create_graph=True`` are themselves differentiable.  That is
what lets the meta-learning code differentiate an outer loss through an
unrolled inner SGD loop.
"""
from __future__ import annotations

import itertools
import math
import threading
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

DTYPE = np.float64

_state = threading.local()
_node_ids = itertools.count()


def is_grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextmanager
def _grad_mode(enabled: bool):
    prev = is_grad_enabled()
    _state.enabled = enabled
    try:
        yield
    finally:
        _state.enabled = prev


def no_grad():
    """Context manager that stops operations from being recorded."""
    return _grad_mode(False)


def enable_grad():
    return _grad_mode(True)


class Node:
    """A recorded primitive: parent tensors plus the adjoint rule."""

    __slots__ = ("op", "parents", "backward", "seq")

    def __init__(self, op: str, parents: tuple, backward: Callable):
        self.op = op
        self.parents = parents
        self.backward = backward
        # monotone ids: a node is always created after its parents
        self.seq = next(_node_ids)

    def __repr__(self):
        return f"Node({self.op}#{self.seq})"


class Tensor:
    __slots__ = ("data", "requires_grad", "node", "name", "__weakref__")

    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.array(data, dtype=DTYPE)
        self.requires_grad = requires_grad
        self.node: Node | None = None
        self.name = name

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        t = cls.__new__(cls)
        t.data = arr
        t.requires_grad = False
        t.node = None
        t.name = None
        return t

    # -- introspection -------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    @property
    def graph_id(self) -> int | None:
        return None if self.node is None else self.node.seq

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data)

    def __array__(self, dtype=None, copy=None):
        return self.data if dtype is None else self.data.astype(dtype)

    def __len__(self):
        return len(self.data)

    def __repr__(self):
        tag = f", grad_fn={self.node.op}" if self.node is not None else ""
        return f"Tensor({self.data!r}{tag})"

    # -- operators -----------------------------------------------------
    def __add__(self, o):
        return add(self, o)

    def __radd__(self, o):
        return add(o, self)

    def __sub__(self, o):
        return sub(self, o)

    def __rsub__(self, o):
        return sub(o, self)

    def __mul__(self, o):
        return mul(self, o)

    def __rmul__(self, o):
        return mul(o, self)

    def __truediv__(self, o):
        return div(self, o)

    def __rtruediv__(self, o):
        return div(o, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, o):
        return matmul(self, o)

    def __rmatmul__(self, o):
        return matmul(o, self)

    def __pow__(self, p):
        return power(self, p)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def tensor(data, requires_grad: bool = False, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, name=name)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def zeros(*shape) -> Tensor:
    return Tensor._wrap(np.zeros(shape, dtype=DTYPE))


def _record(data: np.ndarray, op: str, parents: tuple, backward: Callable) -> Tensor:
    out = Tensor._wrap(data)
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.node = Node(op, parents, backward)
    return out


# ---------------------------------------------------------------------------
# broadcasting helpers (primitives, so they differentiate twice)


def sum_to(a: Tensor, shape: tuple) -> Tensor:
    """Sum ``a`` down to ``shape``, undoing numpy broadcasting."""
    shape = tuple(shape)
    if a.shape == shape:
        return a
    lead = a.ndim - len(shape)
    axes = tuple(range(lead)) + tuple(
        i + lead for i, s in enumerate(shape) if s == 1 and a.shape[i + lead] != 1
    )
    if math.prod(shape) == 1:
        # full reduction over the flattened array, so the rounding depends
        # only on element order and not on how the elements were shaped
        data = np.asarray(a.data.reshape(-1).sum()).reshape(shape)
    else:
        data = a.data.sum(axis=axes, keepdims=True)
        if lead:
            data = data.reshape(data.shape[lead:])
    src = a.shape
    return _record(data, "sum_to", (a,), lambda g: (broadcast_to(g, src),))


def broadcast_to(a: Tensor, shape: tuple) -> Tensor:
    shape = tuple(shape)
    if a.shape == shape:
        return a
    src = a.shape
    data = np.broadcast_to(a.data, shape)
    return _record(data, "broadcast_to", (a,), lambda g: (sum_to(g, src),))


# ---------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _record(a.data + b.data, "add", (a, b), lambda g: (sum_to(g, sa), sum_to(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _record(
        a.data - b.data, "sub", (a, b), lambda g: (sum_to(g, sa), sum_to(neg(g), sb))
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape

    def backward(g):
        ga = sum_to(mul(g, b), sa) if a.requires_grad else None
        gb = sum_to(mul(g, a), sb) if b.requires_grad else None
        return ga, gb

    return _record(a.data * b.data, "mul", (a, b), backward)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape

    def backward(g):
        ga = sum_to(div(g, b), sa) if a.requires_grad else None
        gb = sum_to(neg(div(mul(g, a), mul(b, b))), sb) if b.requires_grad else None
        return ga, gb

    return _record(a.data / b.data, "div", (a, b), backward)


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _record(-a.data, "neg", (a,), lambda g: (neg(g),))


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    c = float(c)
    return _record(a.data * c, "scale", (a,), lambda g: (scale(g, c),))


def power(a, p: float) -> Tensor:
    a = as_tensor(a)
    p = float(p)
    if p == 1.0:
        return a
    return _record(
        a.data**p, "power", (a,), lambda g: (mul(g, scale(power(a, p - 1.0), p)),)
    )


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = _record(np.exp(a.data), "exp", (a,), lambda g: (mul(g, out),))
    return out


def log(a) -> Tensor:
    a = as_tensor(a)
    return _record(np.log(a.data), "log", (a,), lambda g: (div(g, a),))


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = Tensor._wrap((a.data > 0).astype(DTYPE))
    return _record(a.data * mask.data, "relu", (a,), lambda g: (mul(g, mask),))


# ---------------------------------------------------------------------------
# shape manipulation


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    src = a.shape
    data = a.data.reshape(shape)
    if data.shape == src:
        return a
    return _record(data, "reshape", (a,), lambda g: (reshape(g, src),))


def transpose(a, axes=None) -> Tensor:
    """Permute axes; with no ``axes`` swap the last two dimensions."""
    a = as_tensor(a)
    if axes is None:
        if a.ndim < 2:
            raise ValueError(f"transpose needs at least 2 dims, got shape {a.shape}")
        axes = tuple(range(a.ndim - 2)) + (a.ndim - 1, a.ndim - 2)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _record(
        np.transpose(a.data, axes), "transpose", (a,), lambda g: (transpose(g, inv),)
    )


def getitem(a, idx) -> Tensor:
    """Basic and advanced indexing; the adjoint scatters back into zeros."""
    a = as_tensor(a)
    src = a.shape
    return _record(a.data[idx], "getitem", (a,), lambda g: (_scatter_index(g, idx, src),))


def _scatter_index(g: Tensor, idx, shape: tuple) -> Tensor:
    data = np.zeros(shape, dtype=DTYPE)
    np.add.at(data, idx, g.data)
    return _record(data, "scatter_index", (g,), lambda h: (getitem(h, idx),))


def take(a, index: np.ndarray) -> Tensor:
    """Gather from flattened ``a``; entries of ``index`` equal to -1 read zero."""
    a = as_tensor(a)
    index = np.asarray(index, dtype=np.intp)
    return _take_safe(a, np.where(index < 0, a.size, index))


def _take_safe(a: Tensor, safe: np.ndarray) -> Tensor:
    # index a.size addresses an appended zero
    padded = np.concatenate([a.data.reshape(-1), np.zeros(1, dtype=DTYPE)])
    src = a.shape
    return _record(padded[safe], "take", (a,), lambda g: (_scatter_flat(g, safe, src),))


def _scatter_flat(g: Tensor, safe: np.ndarray, shape: tuple) -> Tensor:
    n = int(np.prod(shape))
    data = np.bincount(safe.reshape(-1), weights=g.data.reshape(-1), minlength=n + 1)
    data = data[:n].reshape(shape)
    return _record(data, "scatter_flat", (g,), lambda h: (_take_safe(h, safe),))


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in ts]
    bounds = np.cumsum([0] + sizes)
    nd = ts[0].ndim
    ax = axis % nd

    def backward(g):
        out = []
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            sl = [slice(None)] * nd
            sl[ax] = slice(int(lo), int(hi))
            out.append(getitem(g, tuple(sl)))
        return tuple(out)

    return _record(np.concatenate([t.data for t in ts], axis=axis), "concat", tuple(ts), backward)


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    shape = list(ts[0].shape)
    shape.insert(axis % (len(shape) + 1), 1)
    return concat([reshape(t, tuple(shape)) for t in ts], axis=axis)


# ---------------------------------------------------------------------------
# reductions


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    src = a.shape
    kshape = np.sum(a.data, axis=axis, keepdims=True).shape

    def backward(g):
        return (broadcast_to(reshape(g, kshape), src),)

    if axis is None:
        # flattened, for the same shape-independent rounding as sum_to
        out = np.asarray(a.data.reshape(-1).sum())
        out = out.reshape(kshape) if keepdims else out
    else:
        out = np.sum(a.data, axis=axis, keepdims=keepdims)
    return _record(out, "sum", (a,), backward)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    s = tsum(a, axis, keepdims)
    count = a.size // max(s.size, 1) if a.size else 1
    return scale(s, 1.0 / count)


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a, b) -> Tensor:
    """Matrix product; batched over leading dims like ``np.matmul``.

    A 1-D right operand is treated as a column and squeezed back.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 1:
        raise ValueError(f"matmul needs a matrix left operand, got shapes {a.shape} and {b.shape}")
    if b.ndim == 1:
        return reshape(matmul(a, reshape(b, (b.shape[0], 1))), a.shape[:-1])
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul dimension mismatch: {a.shape} x {b.shape}")
    sa, sb = a.shape, b.shape

    def backward(g):
        ga = sum_to(matmul(g, transpose(b)), sa) if a.requires_grad else None
        gb = sum_to(matmul(transpose(a), g), sb) if b.requires_grad else None
        return ga, gb

    # BLAS picks its summation order from the operands' memory layout, so
    # equal values in different layouts could round differently
    data = np.matmul(np.ascontiguousarray(a.data), np.ascontiguousarray(b.data))
    return _record(data, "matmul", (a, b), backward)


def kron(a, b) -> Tensor:
    """Kronecker product of two matrices: block (i, j) is ``a[i, j] * b``."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError(f"kron expects matrices, got ranks {a.ndim} and {b.ndim}")
    p, q = a.shape
    r, s = b.shape
    blocks = mul(reshape(a, (p, 1, q, 1)), reshape(b, (1, r, 1, s)))
    return reshape(blocks, (p * r, q * s))


def vec_row(a) -> Tensor:
    """Row-major flattening of a matrix."""
    a = as_tensor(a)
    if a.ndim != 2:
        raise ValueError(f"vec_row expects a matrix, got shape {a.shape}")
    return reshape(a, (a.size,))


def mode_n_product(t, u, axis: int) -> Tensor:
    """Contract matrix ``u`` (J x I_axis) against one mode of ``t``.

    The result has ``t``'s shape with the contracted mode replaced by J.
    ``axis`` is zero-based.
    """
    t, u = as_tensor(t), as_tensor(u)
    if not -t.ndim <= axis < t.ndim:
        raise ValueError(f"axis {axis} out of range for rank-{t.ndim} tensor")
    axis %= t.ndim
    if u.ndim != 2 or u.shape[1] != t.shape[axis]:
        raise ValueError(
            f"mode-{axis} product needs u with {t.shape[axis]} columns, got shape {u.shape}"
        )
    perm = tuple(i for i in range(t.ndim) if i != axis) + (axis,)
    moved = transpose(t, perm)
    out = matmul(moved, transpose(u))
    inv = tuple(np.argsort(perm))
    return transpose(out, inv)


# ---------------------------------------------------------------------------
# losses


def mse(pred, target) -> Tensor:
    d = sub(pred, target)
    return mean(mul(d, d))


def log_softmax(logits, axis: int = -1) -> Tensor:
    logits = as_tensor(logits)
    shift = Tensor._wrap(np.max(logits.data, axis=axis, keepdims=True))
    z = sub(logits, shift)
    return sub(z, log(tsum(exp(z), axis=axis, keepdims=True)))


def softmax_cross_entropy(logits, labels) -> Tensor:
    """Mean cross-entropy of ``logits`` (batch x classes) against integer labels."""
    logits = as_tensor(logits)
    labels = np.asarray(labels, dtype=np.intp)
    onehot = np.zeros(logits.shape, dtype=DTYPE)
    onehot[np.arange(len(labels)), labels] = 1.0
    picked = tsum(mul(log_softmax(logits), Tensor._wrap(onehot)), axis=-1)
    return neg(mean(picked))


# ---------------------------------------------------------------------------
# convolution via im2col gathers

_IM2COL_CACHE: dict = {}
_CACHE_LOCK = threading.Lock()


def _im2col_index(c, h, w, kh, kw, stride, padding):
    key = (c, h, w, kh, kw, stride, padding)
    with _CACHE_LOCK:
        hit = _IM2COL_CACHE.get(key)
    if hit is not None:
        return hit
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    if ho <= 0 or wo <= 0:
        raise ValueError(f"kernel {kh}x{kw} larger than padded input {h}x{w}")
    oy = np.arange(ho)[:, None, None, None, None] * stride - padding
    ox = np.arange(wo)[None, :, None, None, None] * stride - padding
    ch = np.arange(c)[None, None, :, None, None]
    ky = np.arange(kh)[None, None, None, :, None]
    kx = np.arange(kw)[None, None, None, None, :]
    y = oy + ky
    x = ox + kx
    inside = (y >= 0) & (y < h) & (x >= 0) & (x < w)
    flat = ch * h * w + y * w + x
    idx = np.where(inside, flat, -1).reshape(ho * wo, c * kh * kw)
    res = (idx, ho, wo)
    with _CACHE_LOCK:
        _IM2COL_CACHE[key] = res
    return res


def conv2d(x, weight, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation. x: (B, C, H, W); weight: (O, C, kh, kw)."""
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 4 or weight.ndim != 4:
        raise ValueError(f"conv2d expects rank-4 input and weight, got {x.shape}, {weight.shape}")
    b, c, h, w = x.shape
    o, ci, kh, kw = weight.shape
    if ci != c:
        raise ValueError(f"conv2d channel mismatch: input has {c}, filter expects {ci}")
    idx, ho, wo = _im2col_index(c, h, w, kh, kw, stride, padding)
    chw = c * h * w
    offs = (np.arange(b) * chw)[:, None, None]
    full = np.where(idx[None] < 0, -1, idx[None] + offs)
    cols = take(x, full)  # (B, Ho*Wo, C*kh*kw)
    wmat = reshape(weight, (o, ci * kh * kw))
    out = matmul(cols, transpose(wmat))  # (B, Ho*Wo, O)
    return reshape(transpose(out, (0, 2, 1)), (b, o, ho, wo))


def conv1d_valid(x, filt) -> Tensor:
    """Valid-mode 1-D cross-correlation of each row of x (B, n) with filt (w,)."""
    x, filt = as_tensor(x), as_tensor(filt)
    n, w = x.shape[-1], filt.shape[0]
    cols = sliding_windows(x, w)
    return matmul(cols, filt)


def sliding_windows(x, w: int) -> Tensor:
    """(B, n) -> (B, n - w + 1, w) valid-mode windows."""
    x = as_tensor(x)
    b, n = x.shape
    L = n - w + 1
    if L <= 0:
        raise ValueError(f"window {w} longer than input {n}")
    base = np.arange(L)[:, None] + np.arange(w)[None, :]
    full = base[None] + (np.arange(b) * n)[:, None, None]
    return take(x, full)


# ---------------------------------------------------------------------------
# differentiation


def _topo(root: Tensor, targets: set) -> tuple[list, dict]:
    order: list = []
    needed: dict = {}
    visited: set = set()
    stack = [(root, False)]
    while stack:
        t, done = stack.pop()
        if done:
            need = id(t) in targets
            if not need and t.node is not None:
                need = any(needed.get(id(p), False) for p in t.node.parents)
            needed[id(t)] = need
            order.append(t)
            continue
        if id(t) in visited:
            continue
        visited.add(id(t))
        stack.append((t, True))
        if t.node is not None:
            for p in t.node.parents:
                if id(p) not in visited:
                    stack.append((p, False))
    return order, needed


def grad(
    loss: Tensor,
    leaves: Sequence[Tensor],
    create_graph: bool = False,
    allow_unused: bool = False,
) -> list[Tensor]:
    """Gradients of a scalar ``loss`` with respect to each tensor in ``leaves``.

    With ``create_graph`` the adjoint computation is itself recorded, so the
    returned gradients can be differentiated again.
    """
    if loss.size != 1:
        raise ValueError(f"grad needs a scalar loss, got shape {loss.shape}")
    leaves = list(leaves)
    targets = {id(t) for t in leaves}
    order, needed = _topo(loss, targets)
    for i, leaf in enumerate(leaves):
        if not needed.get(id(leaf), False) and not allow_unused:
            raise ValueError(f"leaf {i} (shape {leaf.shape}) is not on the loss graph")

    grads: dict = {id(loss): Tensor._wrap(np.ones(loss.shape, dtype=DTYPE))}
    with _grad_mode(create_graph):
        for t in reversed(order):
            node = t.node
            g = grads.get(id(t))
            if node is None or g is None or not needed[id(t)]:
                continue
            pgs = node.backward(g)
            for p, pg in zip(node.parents, pgs):
                if pg is None or not needed.get(id(p), False):
                    continue
                prev = grads.get(id(p))
                grads[id(p)] = pg if prev is None else add(prev, pg)
    out = []
    for leaf in leaves:
        g = grads.get(id(leaf))
        out.append(g if g is not None else Tensor._wrap(np.zeros(leaf.shape, dtype=DTYPE)))
    return out


@dataclass
class GradCheckReport:
    max_rel_err: float
    passed: bool
    tolerance: float
    analytic: np.ndarray
    numeric: np.ndarray
    nonfinite: list = field(default_factory=list)

    def __bool__(self):
        return self.passed


def finite_diff_check(
    f: Callable[[Tensor], Tensor],
    x,
    epsilon: float = 1e-5,
    tolerance: float = 1e-5,
) -> GradCheckReport:
    """Compare ``grad(f(x), x)`` against central differences.

    The error is ``max|g - fd| / max(max|g|, max|fd|)``, i.e. the worst
    coordinate measured relative to the gradient's overall scale.
    """
    x0 = np.array(as_tensor(x).data, dtype=DTYPE)
    leaf = Tensor(x0, requires_grad=True)
    (g,) = grad(f(leaf), [leaf])
    analytic = g.data.copy()

    numeric = np.zeros_like(x0)
    bad = []
    flat = x0.reshape(-1)
    # f may differentiate internally (e.g. an inner SGD step), so probes are
    # evaluated as differentiable leaves with grad mode left on
    for i in range(flat.size):
        xp = flat.copy()
        xm = flat.copy()
        xp[i] += epsilon
        xm[i] -= epsilon
        fp = f(Tensor(xp.reshape(x0.shape), requires_grad=True)).item()
        fm = f(Tensor(xm.reshape(x0.shape), requires_grad=True)).item()
        if not (np.isfinite(fp) and np.isfinite(fm)):
            bad.append(i)
            continue
        numeric.reshape(-1)[i] = (fp - fm) / (2 * epsilon)

    scale_ = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0), 1e-300)
    err = float(np.abs(analytic - numeric).max(initial=0.0) / scale_)
    if bad:
        err = float("inf")
    return GradCheckReport(err, err < tolerance, tolerance, analytic, numeric, bad)
