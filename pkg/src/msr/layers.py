"""Reparameterized and reference layers.

Each layer keeps its parameters in ``self.params`` (name -> Tensor) and its
``forward`` accepts an override dict, so the meta-learner can run the same
layer with adapted parameters.  Parameters split into *filter* parameters
(updated per task) and *symmetry* factors (shared across tasks).
"""
from __future__ import annotations

import math

import numpy as np

from . import tensor as T
from .tensor import Tensor

MODES = ("MSR", "MAML", "MSR_JOINT", "MTSR")


class Layer:
    filter_names: tuple = ()
    symmetry_names: tuple = ()

    def __init__(self):
        self.params: dict[str, Tensor] = {}

    def _p(self, params, name) -> Tensor:
        if params is not None and name in params:
            return params[name]
        return self.params[name]

    def forward(self, x: Tensor, params: dict | None = None) -> Tensor:
        raise NotImplementedError

    def __call__(self, x, params=None):
        return self.forward(T.as_tensor(x), params)

    def param_count(self) -> int:
        return sum(p.size for p in self.params.values())

    def spec(self) -> dict:
        """Constructor arguments, enough to rebuild the layer."""
        raise NotImplementedError


def _leaf(arr) -> Tensor:
    return Tensor(arr, requires_grad=True)


def inner_params(layer: Layer, mode: str = "MSR") -> list[str]:
    """Names updated by inner-loop SGD under ``mode``."""
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}")
    if mode == "MAML":
        return list(layer.filter_names) + list(layer.symmetry_names)
    if mode == "MSR_JOINT":
        return list(layer.filter_names) + list(layer.symmetry_names)
    return list(layer.filter_names)


def outer_params(layer: Layer, mode: str = "MSR") -> list[str]:
    """Names updated only across tasks (learning rates live in the meta model)."""
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}")
    if mode == "MAML":
        return []
    return list(layer.symmetry_names)


# ---------------------------------------------------------------------------
# dense layers


def _append_one(x: Tensor) -> Tensor:
    ones = Tensor._wrap(np.ones(x.shape[:-1] + (1,)))
    return T.concat([x, ones], axis=-1)


class Dense(Layer):
    """Plain fully connected layer y = x W^T + b."""

    filter_names = ("W", "b")

    def __init__(self, in_dim: int, out_dim: int, bias: bool = True, rng=None):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.in_dim, self.out_dim, self.bias = in_dim, out_dim, bias
        self.params["W"] = _leaf(rng.normal(0.0, 1.0 / math.sqrt(in_dim), (out_dim, in_dim)))
        if bias:
            self.params["b"] = _leaf(np.zeros(out_dim))
        else:
            self.filter_names = ("W",)

    def weight(self, params=None) -> Tensor:
        return self._p(params, "W")

    def forward(self, x, params=None):
        y = T.matmul(x, T.transpose(self._p(params, "W")))
        if self.bias:
            y = y + self._p(params, "b")
        return y

    def spec(self):
        return {"type": "dense", "in_dim": self.in_dim, "out_dim": self.out_dim, "bias": self.bias}


class ReparamDenseFull(Layer):
    """Fully connected layer with vec_row(W) = U v.

    ``bias_mode="append_one"`` extends inputs with a trailing 1, so the last
    column of W acts as the bias.
    """

    filter_names = ("v",)
    symmetry_names = ("U",)

    def __init__(self, in_dim, out_dim, k=None, bias_mode="none", rng=None, U=None, v=None):
        super().__init__()
        if bias_mode not in ("none", "append_one"):
            raise ValueError(f"unknown bias_mode {bias_mode!r}")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.in_dim, self.out_dim, self.bias_mode = in_dim, out_dim, bias_mode
        n = in_dim + (bias_mode == "append_one")
        self.eff_in = n
        self.k = k = n if k is None else k
        mn = out_dim * n
        if U is None:
            # expected Frobenius norm 1/4: init noise that Adam has not
            # unlearned after the outer loop lingers in the learned pattern
            U = rng.normal(0.0, 0.25 / math.sqrt(mn * k), (mn, k))
        if v is None:
            v = rng.normal(0.0, math.sqrt(1.0 / n), k)
        U, v = np.asarray(U, dtype=float), np.asarray(v, dtype=float)
        if U.shape != (mn, k) or v.shape != (k,):
            raise ValueError(f"expected U {(mn, k)} and v {(k,)}, got {U.shape}, {v.shape}")
        self.params["U"] = _leaf(U)
        self.params["v"] = _leaf(v)

    def weight(self, params=None) -> Tensor:
        Uv = T.matmul(self._p(params, "U"), self._p(params, "v"))
        return T.reshape(Uv, (self.out_dim, self.eff_in))

    def forward(self, x, params=None):
        if x.shape[-1] != self.in_dim:
            raise ValueError(f"expected input dim {self.in_dim}, got {x.shape[-1]}")
        if self.bias_mode == "append_one":
            x = _append_one(x)
        return T.matmul(x, T.transpose(self.weight(params)))

    def spec(self):
        return {"type": "reparam_dense", "in_dim": self.in_dim, "out_dim": self.out_dim,
                "k": self.k, "bias_mode": self.bias_mode}


class KroneckerDense(Layer):
    """W = U_out V U_in^T, i.e. vec_row(W) = kron(U_out, U_in) vec_row(V).

    The Kronecker product itself is never formed.
    """

    filter_names = ("V",)
    symmetry_names = ("U_out", "U_in")

    def __init__(self, in_dim, out_dim, k=None, l=None, bias_mode="none", rng=None):
        super().__init__()
        if bias_mode not in ("none", "append_one"):
            raise ValueError(f"unknown bias_mode {bias_mode!r}")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.in_dim, self.out_dim, self.bias_mode = in_dim, out_dim, bias_mode
        n = in_dim + (bias_mode == "append_one")
        self.eff_in = n
        self.k = k = out_dim if k is None else k
        self.l = l = n if l is None else l
        self.params["U_out"] = _leaf(np.eye(out_dim, k))
        self.params["U_in"] = _leaf(np.eye(n, l))
        V = rng.normal(0.0, 1.0 / math.sqrt(in_dim), (k, l))
        if bias_mode == "append_one":
            V[:, -1] = 0.0
        self.params["V"] = _leaf(V)

    def weight(self, params=None) -> Tensor:
        left = T.matmul(self._p(params, "U_out"), self._p(params, "V"))
        return T.matmul(left, T.transpose(self._p(params, "U_in")))

    def forward(self, x, params=None):
        if x.shape[-1] != self.in_dim:
            raise ValueError(f"expected input dim {self.in_dim}, got {x.shape[-1]}")
        if self.bias_mode == "append_one":
            x = _append_one(x)
        return T.matmul(x, T.transpose(self.weight(params)))

    def stored_parameter_count(self) -> int:
        return self.out_dim * self.k + self.eff_in * self.l + self.k * self.l

    def spec(self):
        return {"type": "kron_dense", "in_dim": self.in_dim, "out_dim": self.out_dim,
                "k": self.k, "l": self.l, "bias_mode": self.bias_mode}


# ---------------------------------------------------------------------------
# convolutions


class Conv2D(Layer):
    filter_names = ("filter", "b")

    def __init__(self, c_in, c_out, kernel, stride=1, padding=0, bias=True, rng=None):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.c_in, self.c_out, self.kernel = c_in, c_out, kernel
        self.stride, self.padding, self.bias = stride, padding, bias
        fan_in = c_in * kernel * kernel
        self.params["filter"] = _leaf(rng.normal(0.0, 1.0 / math.sqrt(fan_in), (c_out, c_in, kernel, kernel)))
        if bias:
            self.params["b"] = _leaf(np.zeros(c_out))
        else:
            self.filter_names = ("filter",)

    def filter_bank(self, params=None) -> Tensor:
        return self._p(params, "filter")

    def forward(self, x, params=None):
        y = T.conv2d(x, self.filter_bank(params), self.stride, self.padding)
        if self.bias:
            y = y + T.reshape(self._p(params, "b"), (1, self.c_out, 1, 1))
        return y

    def spec(self):
        return {"type": "conv2d", "c_in": self.c_in, "c_out": self.c_out, "kernel": self.kernel,
                "stride": self.stride, "padding": self.padding, "bias": self.bias}


class ReparamConv2D(Layer):
    """Convolution whose filter bank is V x1 U1 x2 U2 x3 U3, reshaped.

    With ``orbit == 1`` the mode-3 result (C_o, C_i, H*W) is reshaped
    directly into the (C_o, C_i, H, W) bank.  With ``orbit = G > 1``, U3 has
    G*H*W rows and each base output channel a expands into G channels
    a*G + g, whose kernels are the G row blocks of U3 applied to V.  This is
    what lets a single factored layer hold rotated copies of a filter.
    The bias (if any) is a plain per-channel filter parameter.
    """

    filter_names = ("V", "b")
    symmetry_names = ("U1", "U2", "U3")

    def __init__(self, c_in, c_out, kernel, p=None, q=None, s=None, orbit=1, stride=1,
                 padding=0, bias=False, rng=None, U3=None):
        super().__init__()
        if c_out % orbit:
            raise ValueError(f"c_out={c_out} not divisible by orbit={orbit}")
        rng = rng if rng is not None else np.random.default_rng(0)
        hw = kernel * kernel
        base = c_out // orbit
        self.c_in, self.c_out, self.kernel, self.orbit = c_in, c_out, kernel, orbit
        self.stride, self.padding, self.bias = stride, padding, bias
        self.p = p = base if p is None else p
        self.q = q = c_in if q is None else q
        self.s = s = hw if s is None else s
        self.params["U1"] = _leaf(np.eye(base, p))
        self.params["U2"] = _leaf(np.eye(c_in, q))
        if U3 is None and orbit == 1:
            U3 = np.eye(hw, s)
        elif U3 is None:
            # an orbit factor is a full symmetry matrix over the G filter
            # copies, so it gets the same small random init as dense U
            U3 = rng.normal(0.0, 1.0 / math.sqrt(orbit * hw * s), (orbit * hw, s))
        U3 = np.asarray(U3, dtype=float)
        if U3.shape != (orbit * hw, s):
            raise ValueError(f"U3 must have shape {(orbit * hw, s)}, got {U3.shape}")
        self.params["U3"] = _leaf(U3)
        fan_in = c_in * hw
        self.params["V"] = _leaf(rng.normal(0.0, 1.0 / math.sqrt(fan_in), (p, q, s)))
        if bias:
            self.params["b"] = _leaf(np.zeros(c_out))
        else:
            self.filter_names = ("V",)

    def filter_bank(self, params=None) -> Tensor:
        w = T.mode_n_product(self._p(params, "V"), self._p(params, "U1"), 0)
        w = T.mode_n_product(w, self._p(params, "U2"), 1)
        w = T.mode_n_product(w, self._p(params, "U3"), 2)
        base, k, g = self.c_out // self.orbit, self.kernel, self.orbit
        if g == 1:
            return T.reshape(w, (self.c_out, self.c_in, k, k))
        w = T.reshape(w, (base, self.c_in, g, k, k))
        w = T.transpose(w, (0, 2, 1, 3, 4))
        return T.reshape(w, (self.c_out, self.c_in, k, k))

    def forward(self, x, params=None):
        if x.shape[1] != self.c_in:
            raise ValueError(f"expected {self.c_in} input channels, got {x.shape[1]}")
        y = T.conv2d(x, self.filter_bank(params), self.stride, self.padding)
        if self.bias:
            y = y + T.reshape(self._p(params, "b"), (1, self.c_out, 1, 1))
        return y

    def spec(self):
        return {"type": "reparam_conv2d", "c_in": self.c_in, "c_out": self.c_out,
                "kernel": self.kernel, "p": self.p, "q": self.q, "s": self.s,
                "orbit": self.orbit, "stride": self.stride, "padding": self.padding,
                "bias": self.bias}


class Conv1D(Layer):
    """Valid-mode 1-D cross-correlation with a single shared filter."""

    filter_names = ("filter",)

    def __init__(self, in_dim, width=3, rng=None):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.in_dim, self.width = in_dim, width
        self.params["filter"] = _leaf(rng.normal(0.0, 1.0 / math.sqrt(width), width))

    def forward(self, x, params=None):
        return T.conv1d_valid(x, self._p(params, "filter"))

    def weight(self, params=None) -> Tensor:
        L = self.in_dim - self.width + 1
        return lc_weight_matrix(T.broadcast_to(self._p(params, "filter"), (L, self.width)), self.in_dim)

    def spec(self):
        return {"type": "conv1d", "in_dim": self.in_dim, "width": self.width}


class LocallyConnected1D(Layer):
    """Untied per-location width-w filters, valid mode, no bias.

    y[:, j] = sum_t F[j, t] x[:, j + t].  With ``rank`` set, F = C B is
    built from ``rank`` basis filters B (rank x w) and mixing rows C.
    """

    def __init__(self, in_dim, width=3, rank=None, rng=None, F=None, B=None, C=None):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.in_dim, self.width, self.rank = in_dim, width, rank
        self.L = L = in_dim - width + 1
        if L < 1:
            raise ValueError(f"input dim {in_dim} too small for width {width}")
        if rank is None:
            self.filter_names = ("F",)
            F = rng.normal(0.0, 1.0 / math.sqrt(width), (L, width)) if F is None else F
            self.params["F"] = _leaf(F)
        else:
            self.filter_names = ("B", "C")
            self.params["B"] = _leaf(rng.standard_normal((rank, width)) if B is None else B)
            self.params["C"] = _leaf(rng.standard_normal((L, rank)) if C is None else C)

    def filters(self, params=None) -> Tensor:
        if self.rank is None:
            return self._p(params, "F")
        return T.matmul(self._p(params, "C"), self._p(params, "B"))

    def forward(self, x, params=None):
        if x.shape[-1] != self.in_dim:
            raise ValueError(f"expected input dim {self.in_dim}, got {x.shape[-1]}")
        win = T.sliding_windows(x, self.width)  # (B, L, w)
        return T.tsum(T.mul(win, self.filters(params)), axis=-1)

    def weight(self, params=None) -> Tensor:
        return lc_weight_matrix(self.filters(params), self.in_dim)

    def spec(self):
        return {"type": "lc1d", "in_dim": self.in_dim, "width": self.width, "rank": self.rank}


def lc_weight_matrix(F: Tensor, in_dim: int) -> Tensor:
    """Dense L x n matrix of a valid-mode locally connected layer."""
    L, w = F.shape
    idx = np.full((L, in_dim), -1, dtype=np.intp)
    for j in range(L):
        idx[j, j : j + w] = j * w + np.arange(w)
    return T.take(F, idx)


class ReLU(Layer):
    def forward(self, x, params=None):
        return T.relu(x)

    def spec(self):
        return {"type": "relu"}


class Flatten(Layer):
    def forward(self, x, params=None):
        return T.reshape(x, (x.shape[0], int(np.prod(x.shape[1:]))))

    def spec(self):
        return {"type": "flatten"}


LAYER_TYPES = {
    "dense": Dense,
    "reparam_dense": ReparamDenseFull,
    "kron_dense": KroneckerDense,
    "conv2d": Conv2D,
    "reparam_conv2d": ReparamConv2D,
    "conv1d": Conv1D,
    "lc1d": LocallyConnected1D,
    "relu": ReLU,
    "flatten": Flatten,
}


def build_layer(spec: dict, rng=None) -> Layer:
    spec = dict(spec)
    cls = LAYER_TYPES[spec.pop("type")]
    if cls in (ReLU, Flatten):
        return cls()
    return cls(**spec, rng=rng)


# ---------------------------------------------------------------------------


def sharing_score(W) -> float:
    """1 for a Toeplitz matrix (constant diagonals), near 0 when unstructured.

    1 - sum_d var(diag_d) * len(diag_d) / (var(W) * W.size).
    """
    W = np.asarray(W, dtype=np.float64)
    if W.ndim != 2:
        raise ValueError(f"sharing_score expects a matrix, got shape {W.shape}")
    total = W.var() * W.size
    if total <= 0:
        return 1.0
    m, n = W.shape
    within = 0.0
    for d in range(-(m - 1), n):
        diag = np.diagonal(W, offset=d)
        within += diag.var() * diag.size
    return float(1.0 - within / total)
