"""Meta-training loops: MSR, MAML, MSR-Joint, MTSR, and meta-test evaluation."""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .layers import MODES, Layer, ReparamDenseFull, build_layer, inner_params, outer_params
from .tensor import Tensor


class InnerLoopError(FloatingPointError):
    def __init__(self, step: int, loss: float, task_id=None):
        self.step, self.loss, self.task_id = step, loss, task_id
        where = f" (task {task_id})" if task_id is not None else ""
        super().__init__(f"non-finite inner loss {loss} at inner step {step}{where}")


def _leaf(arr) -> Tensor:
    return Tensor(arr, requires_grad=True)


class MetaModel:
    """A stack of layers plus the inner/outer parameter split for one mode.

    Parameters are keyed ``"<layer index>.<name>"``; learned inner learning
    rates are keyed ``"lr<layer index>"`` (and ``"lr<i>.sym"`` for symmetry
    factors in MSR_JOINT, which get their own rate).
    """

    def __init__(
        self,
        layers: Sequence[Layer],
        mode: str = "MSR",
        inner_lr: float = 0.02,
        learn_filter_init: bool = True,
        loss: str = "mse",
        frozen: Sequence[str] = (),
    ):
        if mode not in MODES:
            raise ValueError(f"unknown mode {mode!r}")
        if loss not in ("mse", "cross_entropy"):
            raise ValueError(f"unknown loss {loss!r}")
        self.layers = list(layers)
        self.mode = mode
        self.loss_name = loss
        self.learn_filter_init = learn_filter_init
        self.params: dict[str, Tensor] = {}
        self.inner_names: list[str] = []
        self.lr_of: dict[str, str] = {}
        self._keys: list[list[tuple[str, str]]] = []
        outer: list[str] = []
        for i, layer in enumerate(self.layers):
            keys = []
            for name, p in layer.params.items():
                key = f"{i}.{name}"
                self.params[key] = _leaf(p.data.copy())
                keys.append((name, key))
            self._keys.append(keys)
            inner = inner_params(layer, mode)
            for name in inner:
                key = f"{i}.{name}"
                self.inner_names.append(key)
                sym = mode == "MSR_JOINT" and name in layer.symmetry_names
                lr_key = f"lr{i}.sym" if sym else f"lr{i}"
                self.lr_of[key] = lr_key
                self.params.setdefault(lr_key, _leaf(np.array(float(inner_lr))))
            outer += [f"{i}.{n}" for n in outer_params(layer, mode)]
        # what the outer optimizer touches
        meta = list(outer)
        if mode == "MAML" or learn_filter_init:
            meta += [k for k in self.inner_names if k not in meta]
        meta += sorted(set(self.lr_of.values()))
        self.frozen = set(frozen)
        unknown = self.frozen - set(self.params)
        if unknown:
            raise KeyError(f"cannot freeze unknown parameters {sorted(unknown)}")
        self.meta_names = [k for k in meta if k not in self.frozen]

    # -- evaluation --------------------------------------------------------
    def layer_params(self, i: int, params: dict | None = None) -> dict:
        params = self.params if params is None else params
        return {name: params[key] for name, key in self._keys[i]}

    def forward(self, x, params: dict | None = None) -> Tensor:
        h = x if isinstance(x, Tensor) else Tensor._wrap(np.asarray(x, dtype=np.float64))
        for i, layer in enumerate(self.layers):
            h = layer.forward(h, self.layer_params(i, params))
        return h

    def loss(self, params, x, y) -> Tensor:
        out = self.forward(x, params)
        if self.loss_name == "mse":
            return T.mse(out, Tensor._wrap(np.asarray(y, dtype=np.float64)))
        return T.softmax_cross_entropy(out, y)

    def metric(self, params, x, y) -> float:
        """MSE for regression, accuracy for classification."""
        with T.no_grad():
            out = self.forward(x, params)
        if self.loss_name == "mse":
            return float(np.mean((out.data - np.asarray(y)) ** 2))
        return float(np.mean(np.argmax(out.data, axis=-1) == np.asarray(y)))

    def weight(self, i: int, params: dict | None = None) -> Tensor:
        """Materialized weight (or filter bank) of layer ``i``."""
        layer = self.layers[i]
        lp = self.layer_params(i, params)
        with T.no_grad():
            if hasattr(layer, "weight"):
                return layer.weight(lp)
            return layer.filter_bank(lp)

    def inner_lrs(self) -> dict[str, float]:
        return {k: self.params[k].item() for k in sorted(set(self.lr_of.values()))}

    def spec(self) -> dict:
        return {
            "layers": [layer.spec() for layer in self.layers],
            "mode": self.mode,
            "loss": self.loss_name,
            "learn_filter_init": self.learn_filter_init,
            "frozen": sorted(self.frozen),
        }

    @classmethod
    def from_spec(cls, spec: dict, params: dict[str, np.ndarray] | None = None) -> "MetaModel":
        layers = [build_layer(s) for s in spec["layers"]]
        model = cls(layers, spec["mode"], loss=spec["loss"],
                    learn_filter_init=spec["learn_filter_init"], frozen=spec.get("frozen", ()))
        if params:
            for k, v in params.items():
                if k not in model.params:
                    raise KeyError(f"checkpoint parameter {k!r} not in model")
                model.params[k] = _leaf(np.asarray(v, dtype=np.float64).reshape(model.params[k].shape))
        return model


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class AdamState:
    lr: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def update(self, params: dict[str, Tensor], grads: dict[str, np.ndarray]) -> None:
        """One Adam step on ``params`` (replaced by fresh leaf tensors)."""
        self.step += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1**self.step
        c2 = 1.0 - b2**self.step
        for k, g in grads.items():
            p = params[k].data
            if g.shape != p.shape:
                raise ValueError(f"gradient for {k} has shape {g.shape}, parameter {p.shape}")
            m = self.m.get(k)
            v = self.v.get(k)
            m = (1 - b1) * g if m is None else b1 * m + (1 - b1) * g
            v = (1 - b2) * g * g if v is None else b2 * v + (1 - b2) * g * g
            self.m[k], self.v[k] = m, v
            new = p - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            params[k] = _leaf(new)


# ---------------------------------------------------------------------------
# inner and outer loops


def inner_adapt(
    model: MetaModel,
    support,
    steps: int,
    create_graph: bool = False,
    params: dict | None = None,
    task_id=None,
) -> dict[str, Tensor]:
    """``steps`` SGD updates of the mode's inner parameters on ``support``.

    Returns the full parameter dict with inner entries replaced.  With
    ``create_graph`` every update stays on the graph for outer differentiation.
    """
    params = dict(model.params if params is None else params)
    x, y = support
    x = Tensor._wrap(np.asarray(x, dtype=np.float64))
    names = model.inner_names
    for step in range(steps):
        loss = model.loss(params, x, y)
        val = loss.item()
        if not math.isfinite(val):
            raise InnerLoopError(step, val, task_id)
        grads = T.grad(loss, [params[n] for n in names], create_graph=create_graph)
        if create_graph:
            for n, g in zip(names, grads):
                params[n] = params[n] - params[model.lr_of[n]] * g
        else:
            for n, g in zip(names, grads):
                lr = params[model.lr_of[n]].data
                params[n] = _leaf(params[n].data - lr * g.data)
    return params


def task_outer_grad(model: MetaModel, task, inner_steps: int) -> tuple[dict, float]:
    """Total derivative of the post-adaptation query loss w.r.t. meta parameters."""
    adapted = inner_adapt(model, task.support, inner_steps, create_graph=True, task_id=task.task_id)
    qloss = model.loss(adapted, task.query[0], task.query[1])
    if not math.isfinite(qloss.item()):
        raise InnerLoopError(inner_steps, qloss.item(), task.task_id)
    leaves = [model.params[k] for k in model.meta_names]
    grads = T.grad(qloss, leaves, allow_unused=True)
    return {k: g.data for k, g in zip(model.meta_names, grads)}, qloss.item()


def outer_step(model: MetaModel, task_batch: Sequence, adam: AdamState, inner_steps: int = 3) -> dict:
    """Sum per-task meta-gradients in task order, then one Adam update."""
    if len(task_batch) == 0:
        raise ValueError("outer_step needs a non-empty task batch")
    total: dict[str, np.ndarray] = {}
    losses = []
    for task in task_batch:
        g, q = task_outer_grad(model, task, inner_steps)
        losses.append(q)
        for k, v in g.items():
            total[k] = v.copy() if k not in total else total[k] + v
    adam.update(model.params, total)
    return {"query_loss": float(np.mean(losses)), "grads": total}


@dataclass
class TrainConfig:
    outer_steps: int = 1000
    batch_size: int = 32
    inner_steps_train: int = 3
    inner_steps_test: int = 9
    outer_lr: float = 5e-4
    seed: int = 0
    log_every: int = 50


def meta_train(
    model: MetaModel,
    train_tasks: Sequence,
    cfg: TrainConfig,
    adam: AdamState | None = None,
    callback: Callable[[int, dict], None] | None = None,
) -> AdamState:
    """Alg. 1 style training: sample task batches, adapt, update meta params."""
    from .seeding import BATCHES, child_rng

    adam = adam if adam is not None else AdamState(lr=cfg.outer_lr)
    n = len(train_tasks)
    bs = min(cfg.batch_size, n)
    start = adam.step
    for step in range(start, cfg.outer_steps):
        rng = child_rng(cfg.seed, BATCHES, step)
        idx = rng.choice(n, size=bs, replace=False)
        batch = [train_tasks[int(i)] for i in idx]
        info = outer_step(model, batch, adam, cfg.inner_steps_train)
        if callback is not None:
            callback(step, info)
    return adam


def run_augmented(model: MetaModel, tasks: Sequence, augment_spec, cfg: TrainConfig,
                  seed: int, callback=None) -> MetaModel:
    """Query-only augmentation wrapped around an unchanged meta-learner."""
    from .tasks import AugmentedTaskSet

    meta_train(model, AugmentedTaskSet(tasks, augment_spec, seed), cfg, callback=callback)
    return model


@dataclass
class MetaTestResult:
    per_task: list
    mean: float
    ci95: float


def summarize(values: Sequence[float]) -> MetaTestResult:
    vals = [float(v) for v in values]
    if not vals:
        raise ValueError("no tasks to summarize")
    arr = np.asarray(vals)
    ci = 1.96 * arr.std(ddof=1) / math.sqrt(len(arr)) if len(arr) > 1 else 0.0
    return MetaTestResult(vals, float(arr.mean()), float(ci))


def meta_test(model: MetaModel, test_tasks: Sequence, adapt_steps: int) -> MetaTestResult:
    """Adapt on each task's support with frozen meta parameters; score the query."""
    if len(test_tasks) == 0:
        raise ValueError("meta_test needs at least one task")
    scores = []
    for task in test_tasks:
        adapted = inner_adapt(model, task.support, adapt_steps, task_id=task.task_id)
        scores.append(model.metric(adapted, task.query[0], task.query[1]))
    return summarize(scores)


# ---------------------------------------------------------------------------
# multi-task ablation


@dataclass
class MTSRResult:
    U: np.ndarray
    filters: np.ndarray
    losses: list


def _mtsr_loss(U: Tensor, V: Tensor, X: np.ndarray, Y: np.ndarray, out_dim: int, in_dim: int) -> Tensor:
    # W_t = reshape(U v_t); summed (not averaged) over tasks so each task's
    # Adam trajectory matches optimizing it alone
    n_tasks = V.shape[0]
    W = T.reshape(T.matmul(V, T.transpose(U)), (n_tasks, out_dim, in_dim))
    pred = T.matmul(Tensor._wrap(X), T.transpose(W))
    d = pred - Tensor._wrap(Y)
    return T.scale(T.tsum(d * d), 1.0 / (X.shape[1] * Y.shape[2]))


def _stack_task_data(tasks, use_query: bool):
    xs, ys = [], []
    for t in tasks:
        x, y = t.support
        if use_query:
            x = np.concatenate([x, t.query[0]])
            y = np.concatenate([y, t.query[1]])
        xs.append(x)
        ys.append(y)
    return np.stack(xs), np.stack(ys)


def _watch(losses: list, step: int, window: int = 50):
    if step >= window and all(
        losses[i] > losses[i - 1] for i in range(step - window + 1, step + 1)
    ):
        warnings.warn(f"MTSR loss increased for {window} consecutive steps (step {step})")


def train_mtsr(tasks: Sequence, layer: ReparamDenseFull, steps: int = 500, lr: float = 1e-3,
               seed: int = 0, U=None) -> MTSRResult:
    """Jointly fit a shared U and one filter per task with full-batch Adam.

    Passing ``U`` freezes it (used at test time with fresh filters).
    """
    rng = np.random.default_rng(seed)
    X, Y = _stack_task_data(tasks, use_query=U is None)
    n_tasks = X.shape[0]
    k = layer.k
    m, n = layer.out_dim, layer.eff_in
    if layer.bias_mode == "append_one":
        X = np.concatenate([X, np.ones(X.shape[:-1] + (1,))], axis=-1)
    train_U = U is None
    params = {
        "U": _leaf(layer.params["U"].data.copy() if train_U else np.asarray(U, dtype=float)),
        "V": _leaf(rng.normal(0.0, math.sqrt(1.0 / n), (n_tasks, k))),
    }
    adam = AdamState(lr=lr)
    losses = []
    names = ["U", "V"] if train_U else ["V"]
    for step in range(steps):
        loss = _mtsr_loss(params["U"], params["V"], X, Y, m, n)
        losses.append(loss.item() / n_tasks)
        _watch(losses, step)
        grads = T.grad(loss, [params[k_] for k_ in names])
        adam.update(params, {k_: g.data for k_, g in zip(names, grads)})
    return MTSRResult(params["U"].data, params["V"].data, losses)


def mtsr_meta_test(test_tasks: Sequence, layer: ReparamDenseFull, U: np.ndarray,
                   steps: int = 500, lr: float = 1e-3, seed: int = 0) -> MetaTestResult:
    res = train_mtsr(test_tasks, layer, steps=steps, lr=lr, seed=seed, U=U)
    scores = []
    for t, v in zip(test_tasks, res.filters):
        W = (U @ v).reshape(layer.out_dim, layer.eff_in)
        x = t.query[0]
        if layer.bias_mode == "append_one":
            x = np.concatenate([x, np.ones((len(x), 1))], axis=-1)
        scores.append(float(np.mean((x @ W.T - t.query[1]) ** 2)))
    return summarize(scores)
