"""Training methods: inner ascent, objective wiring, SGD, bit-reproducibility."""

import csv

import numpy as np
import pytest

from flatreg import autodiff as ad
from flatreg import model as md
from flatreg import synthdata
from flatreg import training as tr
from flatreg.attacks import AttackConfig


@pytest.fixture(scope="module")
def corpus():
    return synthdata.make_corpus(seed=0, train_n=256, test_n=200)


@pytest.fixture(scope="module")
def tiny_arch():
    return md.Architecture((784, 16, 10))


def small_cfg(method, lam=0.02, epochs=2, seed=1, inner_iters=3):
    return tr.TrainConfig(
        method=method,
        lam=lam,
        inner=AttackConfig(epsilon=0.3, step=0.05, iters=inner_iters),
        eval_attack=AttackConfig(epsilon=0.3, step=0.01, iters=10, random_start=True),
        lr=0.05,
        batch=64,
        epochs=epochs,
        seed=seed,
    )


class TestConfigs:
    def test_method_validated(self):
        with pytest.raises(ValueError, match="method"):
            small_cfg("trades")

    def test_negative_lambda(self):
        with pytest.raises(ValueError, match="lambda"):
            small_cfg("lfr", lam=-0.1)

    def test_metrics_lengths_validated(self):
        with pytest.raises(ValueError):
            tr.TrainMetrics((1.0, 2.0), (0.0,), (0.5, 0.6))


class TestInnerMax:
    def test_zero_radius_returns_x_bitwise(self, corpus, tiny_arch):
        test = corpus[1]
        params = md.init_params(tiny_arch, seed=3)
        cfg = AttackConfig(epsilon=0.0, step=0.05, iters=4)
        xp = tr.inner_max_flatness(params, test.images[:8], test.labels[:8], cfg)
        assert xp.tobytes() == test.images[:8].tobytes()

    def test_zero_iters_returns_init(self, corpus, tiny_arch):
        test = corpus[1]
        params = md.init_params(tiny_arch, seed=3)
        cfg = AttackConfig(epsilon=0.3, step=0.0, iters=0)
        xp = tr.inner_max_flatness(params, test.images[:8], test.labels[:8], cfg)
        assert xp.tobytes() == test.images[:8].tobytes()

    def test_iterates_stay_in_ball_and_box(self, corpus, tiny_arch):
        test = corpus[1]
        params = md.init_params(tiny_arch, seed=3)
        cfg = AttackConfig(epsilon=0.3, step=0.1, iters=6)
        x = test.images[:16]
        xp, traj = tr.inner_max_flatness(
            params, x, test.labels[:16], cfg, return_trajectory=True
        )
        assert len(traj) == 7
        assert traj[0].tobytes() == x.tobytes()
        assert traj[-1].tobytes() == xp.tobytes()
        for point in traj:
            assert np.abs(point - x).max() <= 0.3 + 1e-12
            assert point.min() >= 0.0 and point.max() <= 1.0

    def test_ascent_on_200_samples(self, corpus, tiny_arch):
        # sign steps don't guarantee per-sample monotonicity, hence the 95%
        # bar rather than 100%
        test = corpus[1]
        params = md.init_params(tiny_arch, seed=3)
        x, y = test.images[:200], test.labels[:200]
        before = tr.input_grad_norms(params, x, y)
        xp = tr.inner_max_flatness(params, x, y, AttackConfig(0.3, 0.02, 10))
        after = tr.input_grad_norms(params, xp, y)
        assert np.mean(after >= before - 1e-9) >= 0.95

    def test_batched_rows_match_single_calls(self, corpus, tiny_arch):
        test = corpus[1]
        params = md.init_params(tiny_arch, seed=3)
        cfg = AttackConfig(epsilon=0.3, step=0.05, iters=3)
        x, y = test.images[:4], test.labels[:4]
        batch = tr.inner_max_flatness(params, x, y, cfg)
        for i in range(4):
            single = tr.inner_max_flatness(params, x[i : i + 1], y[i : i + 1], cfg)
            assert single[0].tobytes() == batch[i].tobytes()


class TestObjective:
    def test_lambda_zero_is_plain_cross_entropy(self, corpus, tiny_arch):
        train = corpus[0]
        params = md.init_params(tiny_arch, seed=5)
        x, y = train.images[:32], train.labels[:32]
        obj = tr.lfr_objective(params, x, y, None, 0.0)
        g = ad.Graph()
        nodes = md.param_nodes(g, params, differentiable=True)
        expected = md.cross_entropy(g, md.forward_logits(params, x, g, nodes=nodes), y)
        assert float(obj.graph.value(obj.total)) == float(g.value(expected))
        assert obj.reg is None
        assert len(obj.graph) == len(g)

    def test_lambda_positive_needs_xprime(self, corpus, tiny_arch):
        train = corpus[0]
        params = md.init_params(tiny_arch, seed=5)
        with pytest.raises(ValueError, match="penalty"):
            tr.lfr_objective(params, train.images[:4], train.labels[:4], None, 0.5)

    def test_toy_value_and_theta_gradient(self):
        # same two-branch shape on a scalar toy loss (w·x)^2 with λ=1 and
        # x′=x=3, w=1: value 9 + |∂ₓL|=6 → 15; d/dw = 18 + 12 → 30
        g = ad.Graph()
        w = g.leaf(1.0)
        x = g.constant(3.0)
        wx = ad.mul(g, w, x)
        base = ad.mul(g, wx, wx)
        xp = g.leaf(3.0)
        wxp = ad.mul(g, w, xp)
        loss_p = ad.mul(g, wxp, wxp)
        reg = ad.grad_norm1(g, loss_p, xp)
        total = ad.add(g, base, ad.scale(g, reg, 1.0))
        assert float(g.value(total)) == pytest.approx(15.0)
        (dw,) = ad.backward(g, total, [w])
        assert float(g.value(dw)) == pytest.approx(30.0)

    def test_theta_gradient_matches_finite_differences(self, corpus, tiny_arch):
        train = corpus[0]
        arch = md.Architecture((784, 6, 10))
        params = md.init_params(arch, seed=7)
        x, y = train.images[:3], train.labels[:3]
        xp = tr.inner_max_flatness(params, x, y, AttackConfig(0.3, 0.05, 2))
        lam = 0.05

        obj = tr.lfr_objective(params, x, y, xp, lam)
        grads = ad.backward(obj.graph, obj.total, obj.pnodes)
        got = np.concatenate([obj.graph.value(n).ravel() for n in grads])

        shapes = [a.shape for pair in zip(params.weights, params.biases) for a in pair]

        def objective_value(theta):
            ws, bs, pos = [], [], 0
            for i in range(0, len(shapes), 2):
                wshape, bshape = shapes[i], shapes[i + 1]
                ws.append(theta[pos : pos + np.prod(wshape)].reshape(wshape))
                pos += np.prod(wshape)
                bs.append(theta[pos : pos + np.prod(bshape)].reshape(bshape))
                pos += np.prod(bshape)
            p = md.ModelParams(arch, tuple(ws), tuple(bs), seed=0)
            o = tr.lfr_objective(p, x, y, xp, lam)
            return float(o.graph.value(o.total))

        theta0 = np.concatenate(
            [a.ravel() for pair in zip(params.weights, params.biases) for a in pair]
        )
        fd = ad.finite_diff_gradient(objective_value, theta0, h=1e-5)
        err = np.abs(got - fd) / np.maximum(1.0, np.abs(fd))
        assert err.max() < 1e-3


class TestSgdStep:
    def make_params(self, w):
        arch = md.Architecture((1, 1))
        return md.ModelParams(arch, (np.array([[w]]),), (np.zeros(1),), seed=0)

    def grads(self, gw, gb=0.0):
        return [np.array([[gw]]), np.array([gb])]

    def test_zero_lr_unchanged(self):
        p = self.make_params(1.0)
        out = tr.sgd_step(p, self.grads(2.0), 0.0)
        assert out.weights[0][0, 0] == 1.0

    def test_single_step(self):
        out = tr.sgd_step(self.make_params(1.0), self.grads(2.0), 0.1)
        assert out.weights[0][0, 0] == pytest.approx(0.8)

    def test_two_steps_accumulate(self):
        p = self.make_params(1.0)
        p = tr.sgd_step(p, self.grads(2.0), 0.1)
        p = tr.sgd_step(p, self.grads(2.0), 0.1)
        assert p.weights[0][0, 0] == pytest.approx(1.0 - 2 * 0.1 * 2.0)

    def test_nonfinite_gradient_names_layer(self):
        p = md.init_params(md.Architecture((4, 3, 2)), seed=0)
        grads = [np.zeros_like(a) for pair in zip(p.weights, p.biases) for a in pair]
        grads[2] = np.full_like(grads[2], np.nan)
        with pytest.raises(ad.NonFiniteValue, match="layer 1 weight"):
            tr.sgd_step(p, grads, 0.1)

    def test_shape_mismatch_rejected(self):
        p = self.make_params(1.0)
        with pytest.raises(ad.ShapeMismatch):
            tr.sgd_step(p, [np.zeros((2, 2)), np.zeros(1)], 0.1)


def final_params_bytes(params):
    return b"".join(a.tobytes() for a in params.weights + params.biases)


class TestTrain:
    def test_bit_reproducible(self, corpus, tiny_arch):
        train_ds = corpus[0]
        cfg = small_cfg("lfr")
        a, ma = tr.train(train_ds, tiny_arch, cfg)
        b, mb = tr.train(train_ds, tiny_arch, cfg)
        assert final_params_bytes(a) == final_params_bytes(b)
        assert ma == mb

    def test_seed_changes_trajectory(self, corpus, tiny_arch):
        train_ds = corpus[0]
        a, _ = tr.train(train_ds, tiny_arch, small_cfg("standard", seed=1))
        b, _ = tr.train(train_ds, tiny_arch, small_cfg("standard", seed=2))
        assert final_params_bytes(a) != final_params_bytes(b)

    def test_lfr_lambda_zero_matches_standard_bitwise(self, corpus, tiny_arch):
        train_ds = corpus[0]
        std_params, std_metrics = tr.train(train_ds, tiny_arch, small_cfg("standard"))
        lfr_params, lfr_metrics = tr.train(
            train_ds, tiny_arch, small_cfg("lfr", lam=0.0)
        )
        assert std_metrics.loss == lfr_metrics.loss
        assert final_params_bytes(std_params) == final_params_bytes(lfr_params)

    def test_gradreg_equals_lfr_zero_radius_bitwise(self, corpus, tiny_arch):
        # executable form of the special-case equivalence: shrinking the
        # inner ball to a point must reproduce the gradient-penalty method
        # exactly, not approximately
        train_ds = corpus[0]
        lam = 0.05
        gr_cfg = small_cfg("gradreg", lam=lam)
        lfr_cfg = tr.TrainConfig(
            method="lfr",
            lam=lam,
            inner=AttackConfig(epsilon=0.0, step=0.05, iters=3),
            eval_attack=gr_cfg.eval_attack,
            lr=gr_cfg.lr,
            batch=gr_cfg.batch,
            epochs=gr_cfg.epochs,
            seed=gr_cfg.seed,
        )
        gr_params, gr_metrics = tr.train(train_ds, tiny_arch, gr_cfg)
        lfr_params, lfr_metrics = tr.train(train_ds, tiny_arch, lfr_cfg)
        assert final_params_bytes(gr_params) == final_params_bytes(lfr_params)
        assert gr_metrics.loss == lfr_metrics.loss
        assert gr_metrics.reg == lfr_metrics.reg

    def test_standard_learns_corpus(self, corpus, tiny_arch):
        train_ds, test_ds = corpus
        params, metrics = tr.train(
            train_ds, tiny_arch, small_cfg("standard", epochs=10)
        )
        assert metrics.clean_acc[-1] >= 0.9
        assert md.accuracy(params, test_ds.images, test_ds.labels) >= 0.85
        assert metrics.loss[0] > metrics.loss[-1]

    def test_at_method_runs_and_improves_loss(self, corpus, tiny_arch):
        train_ds = corpus[0]
        cfg = tr.TrainConfig(
            method="at",
            lam=0.0,
            inner=AttackConfig(epsilon=0.2, step=0.1, iters=3, random_start=True),
            eval_attack=AttackConfig(epsilon=0.3, step=0.01, iters=10),
            lr=0.05,
            batch=64,
            epochs=2,
            seed=4,
        )
        params, metrics = tr.train(train_ds, tiny_arch, cfg)
        assert len(metrics.loss) == 2
        assert metrics.loss[1] < metrics.loss[0]
        assert (np.asarray(metrics.reg) == 0.0).all()

    def test_regularizer_logged_for_penalty_methods(self, corpus, tiny_arch):
        train_ds = corpus[0]
        _, metrics = tr.train(train_ds, tiny_arch, small_cfg("gradreg", epochs=1))
        assert metrics.reg[0] > 0.0

    def test_metrics_csv_stream(self, corpus, tiny_arch, tmp_path):
        train_ds = corpus[0]
        path = tmp_path / "metrics.csv"
        _, metrics = tr.train(
            train_ds, tiny_arch, small_cfg("standard", epochs=3),
            metrics_path=str(path),
        )
        rows = list(csv.reader(path.open()))
        assert rows[0] == ["epoch", "loss", "reg", "clean_acc"]
        assert len(rows) == 4
        for e, row in enumerate(rows[1:]):
            assert int(row[0]) == e
            assert float(row[1]) == metrics.loss[e]
            assert float(row[3]) == metrics.clean_acc[e]

    def test_robust_metrics_optional(self, corpus, tiny_arch):
        train_ds = corpus[0]
        _, metrics = tr.train(
            train_ds, tiny_arch, small_cfg("standard", epochs=1),
            robust_metrics=True, robust_sample=50,
        )
        assert metrics.robust_acc is not None
        assert len(metrics.robust_acc) == 1
        assert 0.0 <= metrics.robust_acc[0] <= 1.0
