"""Per-layer equivariance report for trained checkpoints."""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass

import numpy as np

from . import groups as G
from .layers import Conv2D, ReparamConv2D
from .meta import MetaModel
from .tasks import GROUP_CHOICES, grid_group

GROUP_NAMES = ("shift", "cyclic") + tuple(sorted(GROUP_CHOICES))
FILTER_DRAWS = 10


@dataclass
class EquivarianceRow:
    layer: int
    group: str
    error: float | None
    note: str = ""


def _filter_draws(model: MetaModel, i: int, count: int, seed: int) -> list[dict]:
    """Parameter sets to probe layer ``i`` with.

    A layer with a meta-learned symmetry factor is probed with ``count``
    random filters: U is what stays fixed across tasks, while the stored
    filter is only an initialization (near zero for zero-mean task
    families).  Other layers are probed as stored.
    """
    layer = model.layers[i]
    lp = model.layer_params(i)
    if not getattr(layer, "symmetry_names", ()):
        return [lp]
    from . import tensor as T

    rng = np.random.default_rng(seed)
    draws = []
    for _ in range(count):
        d = dict(lp)
        for name in layer.filter_names:
            if name != "b":
                d[name] = T.Tensor(rng.standard_normal(lp[name].shape))
        draws.append(d)
    return draws


def _mean_error(model, i, in_shape, measure, seed, filters=FILTER_DRAWS) -> float:
    errs = [measure(_layer_fn(model, i, in_shape, lp)) for lp in _filter_draws(model, i, filters, seed)]
    return float(np.mean(errs))


def _layer_fn(model: MetaModel, i: int, in_shape: tuple, lp: dict | None = None):
    layer = model.layers[i]
    lp = model.layer_params(i) if lp is None else lp

    def fn(x):
        from . import tensor as T

        with T.no_grad():
            return layer.forward(T.Tensor(np.asarray(x).reshape((1,) + in_shape)), lp).data

    return fn


def _dense_dims(model: MetaModel, i: int):
    W = model.weight(i).data
    if W.ndim != 2:
        return None
    layer = model.layers[i]
    if getattr(layer, "bias_mode", "none") != "none" or getattr(layer, "bias", False):
        return None
    return W.shape


def _row_1d(model, i, group, trials, seed) -> EquivarianceRow:
    dims = _dense_dims(model, i)
    if dims is None:
        return EquivarianceRow(i, group, None, "skipped: not a bias-free 1-D linear layer")
    m, n = dims
    if group == "shift":
        width = n - m + 1
        if width < 1:
            return EquivarianceRow(i, group, None, f"skipped: output {m} wider than input {n}")
        shift = max(1, min(2, m - 1))
        ops_in, ops_out, in_mask, out_masks = G.translation_ops(n, m, shift)
        err = _mean_error(model, i, (n,), lambda fn: G.equivariance_error_ops(
            fn, ops_in, ops_out, trials, seed, in_mask, out_masks), seed)
        return EquivarianceRow(i, group, err)
    if m != n:
        return EquivarianceRow(i, group, None, f"skipped: cyclic shift needs square W, got {m}x{n}")
    rep = G.shift_representation(G.cyclic_group(n))
    err = _mean_error(model, i, (n,), lambda fn: G.equivariance_error(fn, rep, rep, trials, seed), seed)
    return EquivarianceRow(i, group, err)


def _row_2d(model, i, group, trials, seed, side) -> EquivarianceRow:
    layer = model.layers[i]
    if not isinstance(layer, (Conv2D, ReparamConv2D)):
        return EquivarianceRow(i, group, None, "skipped: not a convolution")
    if layer.stride != 1 or layer.padding != 0 or layer.bias:
        return EquivarianceRow(i, group, None, "skipped: only stride-1 valid bias-free convolutions")
    out_side = side - layer.kernel + 1
    try:
        rep_in = grid_group(group, side)
        rep_out = grid_group(group, out_side)
    except Exception as e:  # unsupported side for this group
        return EquivarianceRow(i, group, None, f"skipped: {e}")
    order = rep_in.group.order
    if layer.c_out % order:
        return EquivarianceRow(i, group, None, f"skipped: {layer.c_out} channels not a multiple of |G|={order}")
    reg = G.regular_representation(rep_in.group)
    base = layer.c_out // order
    ops_in = [np.kron(np.eye(layer.c_in), rep_in.matrices[g]) for g in range(order)]
    ops_out = [np.kron(np.eye(base), np.kron(reg.matrices[g], rep_out.matrices[g])) for g in range(order)]
    err = _mean_error(model, i, (layer.c_in, side, side),
                      lambda fn: G.equivariance_error_ops(fn, ops_in, ops_out, trials, seed), seed)
    return EquivarianceRow(i, group, err)


def report_equivariance(model: MetaModel, groups_to_test, trials: int = 10, seed: int = 0,
                        side: int = 9) -> list[EquivarianceRow]:
    """One row per (weighted layer, group); incompatible pairs are reported as skipped."""
    rows = []
    for i, layer in enumerate(model.layers):
        if not layer.params:
            continue
        for group in groups_to_test:
            if group not in GROUP_NAMES:
                rows.append(EquivarianceRow(i, group, None, f"skipped: unknown group {group!r}"))
            elif group in ("shift", "cyclic"):
                rows.append(_row_1d(model, i, group, trials, seed))
            else:
                rows.append(_row_2d(model, i, group, trials, seed, side))
    return rows


def rows_to_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["layer", "group", "error", "note"])
    for r in rows:
        w.writerow([r.layer, r.group, "" if r.error is None else repr(float(r.error)), r.note])
    return buf.getvalue()
