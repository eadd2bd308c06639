"""Fast invariant checks runnable from an installed package (``msr selftest``)."""
from __future__ import annotations

import numpy as np

from . import groups as G
from . import tensor as T
from .exports import matrix_to_pgm_bytes
from .layers import KroneckerDense, ReparamDenseFull


def _check_gradients() -> bool:
    rng = np.random.default_rng(0)
    W1, W2 = rng.normal(size=(5, 4)), rng.normal(size=(3, 5))
    x, y = rng.normal(size=(6, 4)), rng.normal(size=(6, 3))

    def f(w):
        h = T.relu(T.matmul(T.Tensor(x), T.transpose(w)))
        return T.mse(T.matmul(h, T.Tensor(W2.T)), T.Tensor(y))

    return T.finite_diff_check(f, W1).passed


def _check_second_order() -> bool:
    x = T.Tensor(np.array([1.0, 2.0, 3.0]), requires_grad=True)
    (g,) = T.grad(T.tsum(x * x * x), [x], create_graph=True)
    (h,) = T.grad(T.tsum(g), [x])
    return np.allclose(h.data, 6 * x.data)


def _check_group_correlation() -> bool:
    rng = np.random.default_rng(1)
    rep = G.shift_representation(G.cyclic_group(4))
    U = G.build_symmetry_matrix(rep).matrix
    v, x = rng.normal(size=4), rng.normal(size=4)
    layer = ReparamDenseFull(4, 4, U=U, v=v)
    with T.no_grad():
        y = layer(x[None])[0].data
    ref = G.group_correlation(rep, x, v)
    return np.allclose(y, ref, rtol=1e-12, atol=1e-12) and G.equivariance_error(
        lambda z: layer(z[None]).data, rep, G.regular_representation(rep.group)) < 1e-10


def _check_kronecker() -> bool:
    rng = np.random.default_rng(2)
    kd = KroneckerDense(5, 4, k=3, l=2, rng=rng)
    kd.params["U_out"] = T.Tensor(rng.normal(size=(4, 3)))
    kd.params["U_in"] = T.Tensor(rng.normal(size=(5, 2)))
    full = ReparamDenseFull(5, 4, k=6, U=np.kron(kd.params["U_out"].data, kd.params["U_in"].data),
                            v=kd.params["V"].data.reshape(-1))
    x = rng.normal(size=(3, 5))
    with T.no_grad():
        return np.allclose(kd(x).data, full(x).data, rtol=1e-12, atol=1e-13)


def _check_pgm() -> bool:
    return matrix_to_pgm_bytes(np.eye(3)) == b"P5\n3 3\n255\n" + bytes([255, 0, 0, 0, 255, 0, 0, 0, 255])


CHECKS = {
    "finite-difference gradients": _check_gradients,
    "second-order gradients": _check_second_order,
    "symmetry-matrix layer equals group correlation": _check_group_correlation,
    "Kronecker layer equals explicit layer": _check_kronecker,
    "PGM header and pixels": _check_pgm,
}


def run_selftest(verbose: bool = False) -> bool:
    ok = True
    for name, check in CHECKS.items():
        try:
            passed = bool(check())
        except Exception as e:  # a crash is a failure, not an abort
            passed = False
            name = f"{name} ({type(e).__name__}: {e})"
        ok &= passed
        if verbose:
            print(f"{'PASS' if passed else 'FAIL'}  {name}")
    return ok
