"""Experiment suite: method registry, task construction, and the end-to-end run."""
from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from . import checkpoint as ckpt
from .exports import MetricsRow, MetricsWriter, export_matrix_pgm, symmetry_blocks
from .layers import (
    Conv1D,
    Conv2D,
    Dense,
    Flatten,
    KroneckerDense,
    LocallyConnected1D,
    ReLU,
    ReparamConv2D,
    ReparamDenseFull,
    sharing_score,
)
from .meta import (
    MetaModel,
    _leaf,
    TrainConfig,
    inner_adapt,
    meta_test,
    meta_train,
    mtsr_meta_test,
    train_mtsr,
)
from .seeding import AUGMENT, MODEL_INIT, child_rng, child_seed
from .tasks import (
    AugmentedTaskSet,
    AugmentSpec,
    ImageDataset,
    TaskDistributionSpec,
    gen_group_equivariant_tasks,
    gen_lc_tasks,
    grid_group,
    make_glyph_dataset,
    sample_episodes,
)


@dataclass(frozen=True)
class Method:
    name: str
    suite: str
    mode: str
    build: Callable
    loss: str = "mse"


def _lc_dims(cfg):
    t = cfg.tasks
    return t.input_dim, t.input_dim - t.width + 1


def _msr_fc(cfg, rng):
    n, m = _lc_dims(cfg)
    return [ReparamDenseFull(n, m, k=cfg.model.k or None, rng=rng)]


def _maml_fc(cfg, rng):
    n, m = _lc_dims(cfg)
    return [Dense(n, m, bias=False, rng=rng)]


def _maml_lc(cfg, rng):
    return [LocallyConnected1D(cfg.tasks.input_dim, cfg.tasks.width, rng=rng)]


def _maml_conv1d(cfg, rng):
    return [Conv1D(cfg.tasks.input_dim, cfg.tasks.width, rng=rng)]


def _group_order(cfg) -> int:
    return grid_group(cfg.tasks.group, cfg.tasks.kernel).group.order


def _msr_conv(cfg, rng):
    g, k = _group_order(cfg), cfg.tasks.kernel
    return [ReparamConv2D(1, g, k, p=1, q=1, s=k * k, orbit=g, rng=rng)]


def _maml_conv2d(cfg, rng):
    return [Conv2D(1, _group_order(cfg), cfg.tasks.kernel, bias=False, rng=rng)]


def _glyph_net(cfg, rng, reparam: bool):
    c, side, n_way = cfg.model.channels, cfg.glyphs.side, cfg.glyphs.n_way
    layers, c_in = [], 1
    for _ in range(cfg.model.conv_layers):
        if reparam:
            layers.append(ReparamConv2D(c_in, c, 3, stride=2, padding=1, bias=True, rng=rng))
        else:
            layers.append(Conv2D(c_in, c, 3, stride=2, padding=1, bias=True, rng=rng))
        layers.append(ReLU())
        c_in = c
        side = (side - 1) // 2 + 1
    layers.append(Flatten())
    feat = c * side * side
    if reparam:
        layers.append(KroneckerDense(feat, n_way, bias_mode="append_one", rng=rng))
    else:
        layers.append(Dense(feat, n_way, bias=True, rng=rng))
    return layers


METHODS = {
    m.name: m
    for m in [
        Method("msr_fc", "synthetic", "MSR", _msr_fc),
        Method("msr_joint_fc", "synthetic", "MSR_JOINT", _msr_fc),
        Method("mtsr_fc", "synthetic", "MTSR", _msr_fc),
        Method("maml_fc", "synthetic", "MAML", _maml_fc),
        Method("maml_lc", "synthetic", "MAML", _maml_lc),
        Method("maml_conv", "synthetic", "MAML", _maml_conv1d),
        Method("msr_conv", "rotation", "MSR", _msr_conv),
        Method("maml_conv2d", "rotation", "MAML", _maml_conv2d),
        Method("msr_glyph", "glyphs", "MSR", lambda c, r: _glyph_net(c, r, True), "cross_entropy"),
        Method("maml_glyph", "glyphs", "MAML", lambda c, r: _glyph_net(c, r, False), "cross_entropy"),
    ]
}


def build_model(name: str, cfg) -> MetaModel:
    method = METHODS[name]
    # every method draws its initial weights from the same stream, so
    # architectures that coincide at init start from identical values
    rng = child_rng(cfg.experiment.seed, MODEL_INIT, 0)
    layers = method.build(cfg, rng)
    return MetaModel(layers, method.mode, inner_lr=cfg.optim.inner_lr,
                     learn_filter_init=cfg.optim.learn_filter_init, loss=method.loss)


def augment_spec(cfg) -> AugmentSpec:
    a = cfg.augment
    return AugmentSpec((a.scale_min, a.scale_max), a.p_hflip, a.p_vflip, a.max_rotation_deg,
                       "bilinear", cfg.glyphs.side)


def glyph_dataset(cfg) -> ImageDataset:
    g = cfg.glyphs
    if g.idx_images:
        from .idx import load_idx

        return load_idx(g.idx_images, g.idx_labels)
    images, labels = make_glyph_dataset(g.n_classes_train + g.n_classes_test, g.per_class,
                                        g.side, seed=cfg.experiment.seed)
    return ImageDataset(images.astype(np.float64) / 255.0, labels)


def make_tasks(cfg):
    """(train tasks, test tasks) for the configured suite."""
    t, seed = cfg.tasks, cfg.experiment.seed
    suite = cfg.experiment.suite
    if suite in ("synthetic", "rotation"):
        spec = TaskDistributionSpec(
            family="lc_rank_k" if suite == "synthetic" else "group_equivariant_2d",
            n_train=t.n_train, n_test=t.n_test,
            examples_per_train_task=t.examples_per_train_task,
            test_support=t.test_support, test_query=t.test_query, master_seed=seed,
            rank=t.rank, input_dim=t.input_dim, width=t.width,
            group=t.group, side=t.side, kernel=t.kernel,
        )
        return gen_lc_tasks(spec) if suite == "synthetic" else gen_group_equivariant_tasks(spec)
    g = cfg.glyphs
    data = glyph_dataset(cfg)
    classes = data.classes
    if len(classes) < 2 * g.n_way:
        raise ValueError(f"need at least {2 * g.n_way} classes, dataset has {len(classes)}")
    n_tr = min(g.n_classes_train, len(classes) - g.n_way)
    train_ds = data.subset_classes(classes[:n_tr])
    test_ds = data.subset_classes(classes[n_tr:])
    train = sample_episodes(train_ds, g.n_way, g.k_shot, g.q_queries, t.n_train, seed)
    test = sample_episodes(test_ds, g.n_way, g.k_shot, g.q_queries, g.test_episodes, seed,
                           id_offset=t.n_train)
    if cfg.augment.enabled:
        train = AugmentedTaskSet(train, augment_spec(cfg), child_seed(seed, AUGMENT, 0))
    return train, test


def train_config(cfg) -> TrainConfig:
    o = cfg.optim
    return TrainConfig(o.outer_steps, o.batch_size, o.inner_steps_train, o.inner_steps_test,
                       o.outer_lr, cfg.experiment.seed, cfg.experiment.log_every)


def _as_matrix(a: np.ndarray) -> np.ndarray:
    return a if a.ndim == 2 else a.reshape(a.shape[0], -1)


def export_requested(model: MetaModel, method: str, cfg, out_dir: Path) -> list[Path]:
    paths = []
    for item in cfg.export.matrices:
        layer_s, _, name = item.partition(".")
        i = int(layer_s)
        # entries that do not exist for this method (U of a MAML model) are skipped
        if i >= len(model.layers) or (name != "W" and f"{i}.{name.replace('_blocks', '')}" not in model.params):
            continue
        if name == "W":
            mat = model.weight(i).data
        elif name == "U_blocks":
            layer = model.layers[i]
            mat = symmetry_blocks(model.params[f"{i}.U"].data, layer.out_dim, layer.eff_in)
        else:
            mat = model.params[f"{i}.{name}"].data
        path = out_dir / f"{method}_{i}.{name}.pgm"
        export_matrix_pgm(_as_matrix(np.atleast_2d(mat)), path, cfg.export.normalization)
        paths.append(path)
    return paths


def _metric_name(model: MetaModel) -> str:
    return "mse" if model.loss_name == "mse" else "accuracy"


def mean_sharing_score(model: MetaModel, tasks, steps: int, count: int = 10) -> float:
    scores = []
    for task in list(tasks[: min(count, len(tasks))]):
        adapted = inner_adapt(model, task.support, steps)
        scores.append(sharing_score(model.weight(0, adapted).data))
    return float(np.mean(scores))


def run_method(name: str, cfg, train, test, writer: MetricsWriter, out_dir: Path) -> dict:
    model = build_model(name, cfg)
    tc = train_config(cfg)
    result: dict = {"method": name}
    if model.mode == "MTSR":
        layer = model.layers[0]
        o = cfg.optim
        res = train_mtsr(train, layer, steps=o.mtsr_steps, lr=o.mtsr_lr,
                         seed=child_seed(cfg.experiment.seed, MODEL_INIT, 1))
        for s in range(0, len(res.losses), cfg.experiment.log_every):
            writer.write(MetricsRow(s, "train", f"{name}/loss", res.losses[s]))
        model.params["0.U"] = _leaf(res.U)
        test_res = mtsr_meta_test(test, layer, res.U, steps=o.mtsr_steps, lr=o.mtsr_lr,
                                  seed=child_seed(cfg.experiment.seed, MODEL_INIT, 2))
        step, adam = o.mtsr_steps, None
    else:
        def log(step, info):
            if step % tc.log_every == 0 or step == tc.outer_steps - 1:
                writer.write(MetricsRow(step, "train", f"{name}/query_loss", info["query_loss"]))

        adam = meta_train(model, train, tc, callback=log)
        test_res = meta_test(model, test, tc.inner_steps_test)
        step = tc.outer_steps
    metric = _metric_name(model)
    writer.write(MetricsRow(step, "test", f"{name}/{metric}", test_res.mean, test_res.ci95))
    result[metric] = test_res.mean
    result["ci95"] = test_res.ci95
    if cfg.experiment.suite == "synthetic" and model.mode != "MTSR":
        score = mean_sharing_score(model, test, tc.inner_steps_test)
        writer.write(MetricsRow(step, "test", f"{name}/sharing_score", score))
        result["sharing_score"] = score
    for key, lr in (model.inner_lrs().items() if model.mode != "MTSR" else ()):
        writer.write(MetricsRow(step, "test", f"{name}/{key}", lr))
    state = ckpt.from_model(model, adam, {"master_seed": cfg.experiment.seed, "batch_counter": step},
                            step, {"method": name, "experiment": cfg.experiment.name})
    ckpt.save(out_dir / f"{name}.ckpt", state)
    export_requested(model, name, cfg, out_dir)
    result["model"] = model
    return result


def run_experiment(cfg, out_dir) -> list[dict]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config.ini").write_text(cfg.to_ini())
    writer = MetricsWriter(out_dir / "metrics.csv")
    train, test = make_tasks(cfg)
    return [run_method(m, cfg, train, test, writer, out_dir) for m in cfg.experiment.methods]
