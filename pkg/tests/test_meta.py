import warnings

import numpy as np
import pytest

from msr import checkpoint as ckpt
from msr import groups as G
from msr import tensor as T
from msr.layers import Dense, ReLU, ReparamDenseFull
from msr.meta import (
    AdamState,
    InnerLoopError,
    MetaModel,
    TrainConfig,
    inner_adapt,
    meta_test,
    meta_train,
    mtsr_meta_test,
    outer_step,
    run_augmented,
    summarize,
    task_outer_grad,
    _watch,
    train_mtsr,
)
from msr.tasks import (
    IDENTITY_AUGMENT,
    AugmentSpec,
    ImageDataset,
    Task,
    TaskDistributionSpec,
    gen_lc_tasks,
    make_glyph_dataset,
    sample_episodes,
)
from msr.tensor import Tensor


def linear_task(rng, n=4, m=3, ns=5, nq=6, task_id=0, W=None):
    W = rng.normal(size=(m, n)) if W is None else W
    x = rng.normal(size=(ns + nq, n))
    y = x @ W.T
    return Task((x[:ns], y[:ns]), (x[ns:], y[ns:]), task_id, "regression")


def msr_model(rng, n=4, m=3, k=5, **kw):
    return MetaModel([ReparamDenseFull(n, m, k=k, rng=rng)], "MSR", inner_lr=0.05, **kw)


class TestInnerAdapt:
    def test_zero_steps_is_identity(self, rng):
        model = msr_model(rng)
        t = linear_task(rng)
        out = inner_adapt(model, t.support, 0)
        assert all(out[k] is model.params[k] for k in model.params)

    def test_one_step_closed_form(self, rng):
        model = msr_model(rng)
        t = linear_task(rng)
        U, v = model.params["0.U"].data, model.params["0.v"].data
        alpha = model.params["lr0"].item()
        X, Y = t.support
        B, m = Y.shape
        # vec(W) = U v, prediction X W^T; dL/dW = 2/(B m) (XW^T - Y)^T X
        W = (U @ v).reshape(m, -1)
        dW = 2.0 / (B * m) * (X @ W.T - Y).T @ X
        expect = v - alpha * U.T @ dW.reshape(-1)
        np.testing.assert_allclose(inner_adapt(model, t.support, 1)["0.v"].data, expect, rtol=1e-12)

    def test_outer_params_untouched(self, rng):
        model = msr_model(rng)
        out = inner_adapt(model, linear_task(rng).support, 3)
        assert out["0.U"] is model.params["0.U"]

    def test_non_finite_reports_step(self, rng):
        model = MetaModel([Dense(4, 3, rng=rng)], "MAML", inner_lr=1e6)
        with pytest.raises(InnerLoopError) as exc:
            inner_adapt(model, linear_task(rng).support, 200, task_id=7)
        assert exc.value.step >= 1 and exc.value.task_id == 7
        assert f"inner step {exc.value.step}" in str(exc.value)

    def test_modes_pick_inner_params(self, rng):
        layer = ReparamDenseFull(3, 2, k=4, rng=rng)
        joint = MetaModel([layer], "MSR_JOINT")
        assert joint.inner_names == ["0.v", "0.U"] and joint.lr_of["0.U"] == "lr0.sym"
        maml = MetaModel([Dense(3, 2, rng=rng)], "MAML")
        assert maml.inner_names == ["0.W", "0.b"] and set(maml.meta_names) == {"0.W", "0.b", "lr0"}
        msr = MetaModel([layer], "MSR", learn_filter_init=False)
        assert msr.meta_names == ["0.U", "lr0"]


class TestOuter:
    def test_identical_batch_scales_gradient(self, rng):
        model = msr_model(rng)
        t = linear_task(rng)
        single, _ = task_outer_grad(model, t, 2)
        info = outer_step(model, [t, t, t, t], AdamState(lr=0.0), 2)
        for k in single:
            np.testing.assert_allclose(info["grads"][k], 4 * single[k], rtol=1e-12)

    def test_second_order_gradient_matches_fd(self, rng):
        layers = [ReparamDenseFull(3, 4, k=5, rng=rng), ReLU(), ReparamDenseFull(4, 2, k=3, rng=rng)]
        model = MetaModel(layers, "MSR", inner_lr=0.1)
        for key in ("0.U", "2.U"):
            model.params[key] = Tensor(rng.normal(size=model.params[key].shape) * 0.5, requires_grad=True)
        t = linear_task(rng, n=3, m=2)

        for key in ("0.U", "2.U", "lr0"):
            def objective(p, key=key):
                params = dict(model.params)
                params[key] = p
                adapted = inner_adapt(model, t.support, 2, create_graph=True, params=params)
                return model.loss(adapted, *t.query)

            rep = T.finite_diff_check(objective, model.params[key].data, epsilon=1e-4, tolerance=1e-4)
            assert rep.passed, (key, rep.max_rel_err)
            grads, _ = task_outer_grad(model, t, 2)
            np.testing.assert_allclose(grads[key], rep.analytic, rtol=1e-10, atol=1e-14)

    def test_empty_batch(self, rng):
        with pytest.raises(ValueError):
            outer_step(msr_model(rng), [], AdamState())

    def test_adam_first_step_is_signed_lr(self):
        params = {"a": Tensor(np.array([1.0, -2.0]), requires_grad=True)}
        adam = AdamState(lr=0.1)
        adam.update(params, {"a": np.array([3.0, -0.5])})
        np.testing.assert_allclose(params["a"].data, [0.9, -1.9], rtol=1e-7)
        assert adam.step == 1 and adam.m["a"].shape == (2,)

    def test_training_determinism(self):
        spec = TaskDistributionSpec("lc_rank_k", n_train=20, n_test=4, examples_per_train_task=4, input_dim=8)
        train, _ = gen_lc_tasks(spec)
        runs = []
        for _ in range(2):
            model = MetaModel([ReparamDenseFull(8, 6, rng=np.random.default_rng(0))], "MSR")
            meta_train(model, train, TrainConfig(outer_steps=5, batch_size=4, outer_lr=1e-3))
            runs.append(b"".join(model.params[k].data.tobytes() for k in sorted(model.params)))
        assert runs[0] == runs[1]


class TestMetaTest:
    def test_oracle_reaches_zero(self, rng):
        U = G.build_symmetry_matrix(G.shift_representation(G.cyclic_group(6))).matrix
        for i in range(5):
            f = rng.normal(size=6)
            t = linear_task(rng, 6, 6, ns=1, task_id=i, W=(U @ f).reshape(6, 6))
            model = MetaModel([ReparamDenseFull(6, 6, k=6, U=U, v=f)], "MSR", inner_lr=0.02)
            assert meta_test(model, [t], 9).mean < 1e-10

    def test_ci_halves_with_four_times_tasks(self):
        rng = np.random.default_rng(0)
        small = [summarize(rng.exponential(size=200)).ci95 for _ in range(50)]
        large = [summarize(rng.exponential(size=800)).ci95 for _ in range(50)]
        assert np.mean(large) / np.mean(small) == pytest.approx(0.5, abs=0.03)

    def test_summarize(self):
        r = summarize([1.0, 2.0, 3.0])
        assert r.mean == 2.0 and r.ci95 == pytest.approx(1.96 / np.sqrt(3))
        with pytest.raises(ValueError):
            summarize([])

    def test_empty(self, rng):
        with pytest.raises(ValueError):
            meta_test(msr_model(rng), [], 1)

    def test_frozen_U_equivariance_unchanged(self, rng):
        rep = G.natural_representation(G.symmetric_group(3))
        reg = G.regular_representation(rep.group)
        U = G.build_symmetry_matrix(rep).matrix
        model = MetaModel([ReparamDenseFull(3, 6, k=3, U=U, rng=rng)], "MSR", inner_lr=0.1)

        def err(params):
            lp = model.layer_params(0, params)
            return G.equivariance_error(lambda x: model.layers[0].forward(Tensor(x[None]), lp).data, rep, reg)

        t = linear_task(rng, 3, 6, ns=4)
        before = err(model.params)
        after = err(inner_adapt(model, t.support, 9))
        assert before < 1e-10 and abs(after - before) < 1e-10


class TestModeReduction:
    def test_identity_U_matches_maml(self):
        spec = TaskDistributionSpec("lc_rank_k", n_train=16, n_test=2, examples_per_train_task=4, input_dim=6)
        train, _ = gen_lc_tasks(spec)
        W0 = np.random.default_rng(3).normal(size=(4, 6))
        maml = MetaModel([Dense(6, 4, bias=False, rng=np.random.default_rng(0))], "MAML")
        maml.params["0.W"] = Tensor(W0.copy(), requires_grad=True)
        msr = MetaModel([ReparamDenseFull(6, 4, k=24, U=np.eye(24), v=W0.reshape(-1))], "MSR",
                        frozen=("0.U",))
        cfg = TrainConfig(outer_steps=10, batch_size=4, inner_steps_train=2, outer_lr=1e-3)
        meta_train(maml, train, cfg)
        meta_train(msr, train, cfg)
        assert maml.params["0.W"].data.reshape(-1).tobytes() == msr.params["0.v"].data.tobytes()
        assert maml.params["lr0"].data.tobytes() == msr.params["lr0"].data.tobytes()
        np.testing.assert_array_equal(msr.params["0.U"].data, np.eye(24))

    def test_unknown_frozen(self, rng):
        with pytest.raises(KeyError):
            msr_model(rng, frozen=("0.Z",))


class TestMTSR:
    def test_identity_U_single_task_is_regression(self, rng):
        n, m = 4, 3
        t = linear_task(rng, n, m, ns=12, nq=1)
        layer = ReparamDenseFull(n, m, k=n * m, U=np.eye(n * m), v=np.zeros(n * m))
        res = train_mtsr([t], layer, steps=3000, lr=0.05, U=np.eye(n * m))
        W_ls = np.linalg.lstsq(t.support_x, t.support_y, rcond=None)[0].T
        np.testing.assert_allclose(res.filters[0].reshape(m, n), W_ls, atol=1e-6)

    def test_loss_decreases(self, rng):
        tasks = [linear_task(rng, 4, 3, ns=3, nq=3, task_id=i) for i in range(4)]
        res = train_mtsr(tasks, ReparamDenseFull(4, 3, k=6, rng=rng), steps=200, lr=1e-2)
        assert res.losses[-1] < res.losses[0]

    def test_sustained_increase_warns(self):
        rising = list(np.arange(60.0))
        with pytest.warns(UserWarning, match="50 consecutive"):
            _watch(rising, 55)
        rising[30] = -1.0
        with warnings.catch_warnings():
            warnings.simplefilter("error")
            _watch(rising, 55)

    def test_meta_test_uses_frozen_U(self, rng):
        rep = G.shift_representation(G.cyclic_group(5))
        U = G.build_symmetry_matrix(rep).matrix
        tasks = [linear_task(rng, 5, 5, ns=5, nq=3, task_id=i, W=(U @ rng.normal(size=5)).reshape(5, 5))
                 for i in range(3)]
        with warnings.catch_warnings():
            warnings.simplefilter("error")
            res = mtsr_meta_test(tasks, ReparamDenseFull(5, 5, k=5, U=U), U, steps=500, lr=0.05)
        assert res.mean < 1e-8


def glyph_tasks(n=6):
    imgs, labels = make_glyph_dataset(6, 5, side=8)
    return sample_episodes(ImageDataset(imgs / 255.0, labels), 3, 1, 2, n, seed=0)


def tiny_classifier(seed=0):
    from msr.layers import Flatten

    rng = np.random.default_rng(seed)
    return MetaModel([Flatten(), Dense(64, 3, rng=rng)], "MAML", inner_lr=0.4, loss="cross_entropy")


class TestAugmented:
    def test_identity_augment_same_trajectory(self):
        tasks = glyph_tasks()
        cfg = TrainConfig(outer_steps=3, batch_size=2, inner_steps_train=1, outer_lr=1e-3)
        a, b = tiny_classifier(), tiny_classifier()
        meta_train(a, tasks, cfg)
        run_augmented(b, tasks, AugmentSpec((1.0, 1.0), 0.0, 0.0, 0.0, output_side=8), cfg, seed=9)
        for k in a.params:
            assert a.params[k].data.tobytes() == b.params[k].data.tobytes()
        assert IDENTITY_AUGMENT.is_identity()

    def test_learner_sees_untouched_support(self):
        tasks = glyph_tasks()
        seen = []
        model = tiny_classifier()
        orig = model.loss

        def spy(params, x, y):
            seen.append(np.asarray(x.data if isinstance(x, Tensor) else x).copy())
            return orig(params, x, y)

        model.loss = spy
        cfg = TrainConfig(outer_steps=2, batch_size=2, inner_steps_train=1, outer_lr=1e-3)
        run_augmented(model, tasks, AugmentSpec(output_side=8), cfg, seed=1)
        supports = {t.support_x.tobytes() for t in tasks}
        queries = {t.query_x.tobytes() for t in tasks}
        inner = seen[0::2]  # loss calls alternate support (inner step) then query
        assert all(x.tobytes() in supports for x in inner)
        assert not any(x.tobytes() in queries for x in seen[1::2])


class TestCheckpoint:
    def trained(self):
        spec = TaskDistributionSpec("lc_rank_k", n_train=8, n_test=2, examples_per_train_task=4, input_dim=6)
        train, _ = gen_lc_tasks(spec)
        model = MetaModel([ReparamDenseFull(6, 4, k=3, rng=np.random.default_rng(0))], "MSR")
        adam = meta_train(model, train, TrainConfig(outer_steps=3, batch_size=2))
        return model, adam

    def test_byte_stable(self):
        a = ckpt.dumps(ckpt.from_model(*self.trained(), step=3))
        b = ckpt.dumps(ckpt.from_model(*self.trained(), step=3))
        assert a == b and a.startswith(b"MSRCKPT\x00")

    def test_round_trip(self, tmp_path):
        model, adam = self.trained()
        ckpt.save(tmp_path / "m.ckpt", ckpt.from_model(model, adam, rng_state={"seed": 4}, step=3))
        back = ckpt.load(tmp_path / "m.ckpt")
        assert back.step == 3 and back.rng_state == {"seed": 4} and back.adam.step == adam.step
        clone = back.model()
        for k in model.params:
            assert clone.params[k].data.tobytes() == model.params[k].data.tobytes()
        for k in adam.m:
            assert back.adam.m[k].tobytes() == adam.m[k].tobytes()
        assert clone.meta_names == model.meta_names

    def test_corrupt(self, tmp_path):
        model, adam = self.trained()
        raw = ckpt.dumps(ckpt.from_model(model, adam))
        with pytest.raises(ckpt.CheckpointError):
            ckpt.loads(b"XXXXXXXX" + raw[8:])
        with pytest.raises(ckpt.CheckpointError):
            ckpt.loads(raw[:-5])
