"""Model-family tests: analytic values, finite-difference oracles, invariants."""

import math

import numpy as np
import pytest

from implicitreg.data import Dataset, gaussian_clusters
from implicitreg.models import (
    LogisticRegressionModel,
    QuadraticEnsemble,
    SmallMlp,
    random_quadratic_ensemble,
)


def quad_1d(a_list, b_list, c_list=None):
    n = len(a_list)
    a = np.asarray(a_list, dtype=float).reshape(n, 1, 1)
    b = np.asarray(b_list, dtype=float).reshape(n, 1)
    c = np.zeros(n) if c_list is None else np.asarray(c_list, dtype=float)
    return QuadraticEnsemble(a, b, c)


def small_dataset(n=8, dim=2, seed=3, classes=2):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((n, dim))
    y = rng.integers(0, classes, size=n)
    return Dataset(features=x, targets=y.astype(np.int64))


def fd_grad(f, params, h=1e-6):
    g = np.empty_like(params)
    for i in range(params.size):
        e = np.zeros_like(params)
        e[i] = h
        g[i] = (f(params + e) - f(params - e)) / (2 * h)
    return g


def fd_hvp(grad_fn, params, v, h=1e-5):
    return (grad_fn(params + h * v) - grad_fn(params - h * v)) / (2 * h)


ALL_KINDS = ["quadratic", "logistic", "mlp_tanh", "mlp_relu"]


def make_model(kind, seed=0):
    if kind == "quadratic":
        return random_quadratic_ensemble(8, 3, seed=seed)
    data = small_dataset(n=8, dim=3, seed=seed)
    if kind == "logistic":
        return LogisticRegressionModel(data)
    act = "tanh" if kind == "mlp_tanh" else "relu"
    return SmallMlp(data, [3, 4, 2], activation=act)


class TestQuadratic:
    def test_per_example_loss_analytic(self):
        model = quad_1d([1.0], [0.0])
        assert model.per_example_loss([2.0], 0) == 2.0

    def test_loss_at_origin_is_c(self):
        model = quad_1d([3.0, 0.5], [1.0, -2.0], [4.25, -0.5])
        assert model.per_example_loss([0.0], 0) == 4.25
        assert model.per_example_loss([0.0], 1) == -0.5

    def test_full_loss_and_grad_two_quadratics(self):
        # C_0 = w^2/2, C_1 = w^2  (A = 1 and 2)
        model = quad_1d([1.0, 2.0], [0.0, 0.0])
        assert model.full_loss([1.0]) == pytest.approx(0.75, abs=0)
        assert model.full_grad([1.0])[0] == pytest.approx(1.5, abs=0)

    def test_grad_vanishes_at_minimizer(self):
        model = random_quadratic_ensemble(6, 4, seed=11)
        a_bar = model.a.mean(axis=0)
        b_bar = model.b.mean(axis=0)
        w_star = np.linalg.solve(a_bar, -b_bar)
        assert np.all(np.abs(model.full_grad(w_star)) < 1e-12)

    def test_batch_grad_enumerated(self):
        # per-example gradients at w=1 are {0, 0, 2, 2}
        model = quad_1d([1.0] * 4, [-1.0, -1.0, 1.0, 1.0])
        grads = [model.per_example_grad([1.0], i)[0] for i in range(4)]
        assert grads == [0.0, 0.0, 2.0, 2.0]
        assert model.batch_grad([1.0], [2, 3])[0] == 2.0

    def test_hvp_is_mean_hessian_times_v(self):
        model = random_quadratic_ensemble(5, 3, seed=2)
        v = np.array([1.0, -2.0, 0.5])
        w = np.array([0.3, 0.1, -0.7])
        batch = [0, 2, 4]
        expect = np.mean([model.a[i] @ v for i in batch], axis=0)
        assert np.array_equal(model.batch_hvp(w, batch, v), expect)

    def test_hvp_zero_vector(self):
        model = random_quadratic_ensemble(5, 3, seed=2)
        out = model.batch_hvp(np.ones(3), [0, 1], np.zeros(3))
        assert np.array_equal(out, np.zeros(3))

    def test_grad_sq_norm_grad_1d(self):
        # C = a w^2 / 2, ||C'||^2 = a^2 w^2, gradient 2 a^2 w
        a = 1.7
        model = quad_1d([a], [0.0])
        w = 0.9
        assert model.grad_sq_norm_grad([w])[0] == pytest.approx(2 * a * a * w, rel=1e-15)

    def test_asymmetric_a_rejected(self):
        a = np.array([[[1.0, 2.0], [0.0, 1.0]]])
        with pytest.raises(ValueError, match="symmetric"):
            QuadraticEnsemble(a, np.zeros((1, 2)), np.zeros(1))


class TestMlpForwardOracle:
    def test_scalar_forward_pass_matches(self):
        """Re-implement the [2,3,2] forward pass with scalar python math."""
        data = Dataset(
            features=np.array([[1.0, 0.0]]), targets=np.array([0], dtype=np.int64)
        )
        model = SmallMlp(data, [2, 3, 2], activation="tanh")
        params = model.init_params(7)

        # manual unpack: W1 (3x2 row-major), b1 (3), W2 (2x3), b2 (2)
        w1 = [[params[2 * r + c] for c in range(2)] for r in range(3)]
        b1 = [params[6 + r] for r in range(3)]
        w2 = [[params[9 + 3 * r + c] for c in range(3)] for r in range(2)]
        b2 = [params[15 + r] for r in range(2)]

        x = [1.0, 0.0]
        h = [math.tanh(sum(w1[r][c] * x[c] for c in range(2)) + b1[r]) for r in range(3)]
        z = [sum(w2[r][c] * h[c] for c in range(3)) + b2[r] for r in range(2)]
        expected = math.log(math.exp(z[0]) + math.exp(z[1])) - z[0]

        assert model.per_example_loss(params, 0) == pytest.approx(expected, abs=1e-12)

    def test_full_grad_matches_fd_per_coordinate(self):
        data = small_dataset(n=6, dim=2, seed=5)
        model = SmallMlp(data, [2, 3, 2], activation="tanh")
        params = model.init_params(7)
        g = model.full_grad(params)
        fd = fd_grad(model.full_loss, params, h=1e-6)
        # rtol is the contract; atol 1e-9 covers the oracle's own rounding floor
        np.testing.assert_allclose(fd, g, rtol=1e-6, atol=1e-9)


class TestBatchSemantics:
    @pytest.mark.parametrize("kind", ALL_KINDS)
    def test_full_batch_is_bitwise_full_grad(self, kind):
        model = make_model(kind)
        params = model.random_params(1, scale=0.5)
        every = np.arange(model.n_examples)
        assert model.batch_loss(params, every) == model.full_loss(params)
        assert np.array_equal(model.batch_grad(params, every), model.full_grad(params))

    @pytest.mark.parametrize("kind", ALL_KINDS)
    def test_singleton_batch_is_per_example(self, kind):
        model = make_model(kind)
        params = model.random_params(2, scale=0.5)
        for j in (0, model.n_examples - 1):
            assert np.array_equal(
                model.batch_grad(params, [j]), model.per_example_grad(params, j)
            )

    def test_empty_batch_rejected(self):
        model = make_model("quadratic")
        with pytest.raises(ValueError, match="empty"):
            model.batch_grad(np.zeros(3), [])

    def test_index_out_of_range(self):
        model = make_model("quadratic")
        with pytest.raises(IndexError):
            model.batch_loss(np.zeros(3), [0, 8])
        with pytest.raises(IndexError):
            model.per_example_loss(np.zeros(3), -1)

    def test_dimension_mismatch(self):
        model = make_model("quadratic")
        with pytest.raises(ValueError, match="shape"):
            model.full_loss(np.zeros(4))


class TestFiniteDifferenceOracles:
    @pytest.mark.parametrize("kind", ALL_KINDS)
    def test_batch_grad_matches_fd_50_random_pairs(self, kind):
        model = make_model(kind)
        rng = np.random.default_rng(17)
        for _ in range(50):
            params = rng.standard_normal(model.dim) * 0.8
            bsize = int(rng.integers(1, model.n_examples + 1))
            batch = np.sort(rng.choice(model.n_examples, size=bsize, replace=False))
            g = model.batch_grad(params, batch)
            fd = fd_grad(lambda p: model.batch_loss(p, batch), params, h=1e-6)
            err = np.linalg.norm(fd - g) / max(np.linalg.norm(g), 1e-8)
            assert err < 1e-5, f"{kind}: fd mismatch {err:.2e}"

    @pytest.mark.parametrize("kind", ["logistic", "mlp_tanh"])
    def test_batch_hvp_matches_fd(self, kind):
        model = make_model(kind)
        rng = np.random.default_rng(23)
        for _ in range(10):
            params = rng.standard_normal(model.dim) * 0.6
            v = rng.standard_normal(model.dim)
            batch = np.arange(model.n_examples)
            hv = model.batch_hvp(params, batch, v)
            fd = fd_hvp(lambda p: model.batch_grad(p, batch), params, v, h=1e-5)
            err = np.linalg.norm(fd - hv) / max(np.linalg.norm(hv), 1e-8)
            assert err < 1e-4, f"{kind}: hvp fd mismatch {err:.2e}"

    def test_grad_sq_norm_grad_matches_fd(self):
        model = make_model("mlp_tanh")
        rng = np.random.default_rng(29)
        params = rng.standard_normal(model.dim) * 0.6
        batch = np.array([0, 2, 5])

        def sq(p):
            g = model.batch_grad(p, batch)
            return float(g @ g)

        got = model.grad_sq_norm_grad(params, batch)
        fd = fd_grad(sq, params, h=1e-5)
        err = np.linalg.norm(fd - got) / max(np.linalg.norm(got), 1e-8)
        assert err < 1e-4

    def test_grad_sq_norm_grad_zero_at_stationary_point(self):
        model = random_quadratic_ensemble(4, 3, seed=31)
        batch = [0, 1]
        a_bar = model.a[[0, 1]].mean(axis=0)
        b_bar = model.b[[0, 1]].mean(axis=0)
        w_star = np.linalg.solve(a_bar, -b_bar)
        assert np.all(np.abs(model.grad_sq_norm_grad(w_star, batch)) < 1e-12)


class TestInvariants:
    @pytest.mark.parametrize("kind", ALL_KINDS)
    def test_grad_linearity_over_partition(self, kind):
        model = make_model(kind)
        params = model.random_params(7, scale=0.5)
        full = model.full_grad(params)
        idx = np.arange(model.n_examples)
        for bsize in (1, 2, 4):
            batches = idx.reshape(-1, bsize)
            mean = np.mean([model.batch_grad(params, b) for b in batches], axis=0)
            assert np.all(np.abs(mean - full) < 1e-13 * model.dim)

    @pytest.mark.parametrize("kind", ALL_KINDS)
    def test_hvp_symmetry(self, kind):
        model = make_model(kind)
        rng = np.random.default_rng(41)
        params = rng.standard_normal(model.dim) * 0.5
        batch = np.arange(model.n_examples)
        for _ in range(5):
            u = rng.standard_normal(model.dim)
            v = rng.standard_normal(model.dim)
            vhu = float(v @ model.batch_hvp(params, batch, u))
            uhv = float(u @ model.batch_hvp(params, batch, v))
            assert abs(vhu - uhv) <= 1e-10 * max(abs(vhu), abs(uhv), 1e-8)

    @pytest.mark.parametrize("kind", ALL_KINDS)
    def test_purity_bitwise(self, kind):
        model = make_model(kind)
        params = model.random_params(3, scale=0.4)
        batch = np.array([1, 3, 4])
        v = model.random_params(4)
        assert model.batch_loss(params, batch) == model.batch_loss(params, batch)
        assert np.array_equal(
            model.batch_grad(params, batch), model.batch_grad(params, batch)
        )
        assert np.array_equal(
            model.batch_hvp(params, batch, v), model.batch_hvp(params, batch, v)
        )

    def test_l2_term_present_in_every_surface(self):
        base = random_quadratic_ensemble(4, 3, seed=13)
        model = base.with_l2(0.1)
        params = model.random_params(5)
        v = model.random_params(6)
        batch = [0, 3]
        assert model.batch_loss(params, batch) == pytest.approx(
            base.batch_loss(params, batch) + 0.05 * float(params @ params), rel=1e-15
        )
        np.testing.assert_allclose(
            model.batch_grad(params, batch),
            base.batch_grad(params, batch) + 0.1 * params,
            rtol=1e-15,
        )
        np.testing.assert_allclose(
            model.batch_hvp(params, batch, v),
            base.batch_hvp(params, batch, v) + 0.1 * v,
            rtol=1e-15,
        )


class TestLogisticAndMlpExtras:
    def test_logistic_rejects_regression_targets(self):
        data = Dataset(
            features=np.zeros((2, 2)), targets=np.array([0.5, 1.5], dtype=np.float64)
        )
        with pytest.raises(ValueError):
            LogisticRegressionModel(data)

    def test_mlp_rejects_bad_width(self):
        data = small_dataset(n=4, dim=2)
        with pytest.raises(ValueError, match="features"):
            SmallMlp(data, [3, 2, 2])

    def test_mlp_rejects_unknown_activation(self):
        data = small_dataset(n=4, dim=2)
        with pytest.raises(ValueError, match="activation"):
            SmallMlp(data, [2, 2], activation="gelu")

    def test_relu_derivative_zero_at_kink(self):
        data = Dataset(
            features=np.array([[0.0, 0.0]]), targets=np.array([0], dtype=np.int64)
        )
        model = SmallMlp(data, [2, 2, 2], activation="relu")
        # zero input and zero biases put every pre-activation exactly at 0
        params = np.zeros(model.dim)
        g = model.full_grad(params)
        assert np.all(np.isfinite(g))
        # first-layer weight gradients vanish under the derivative(0)=0 rule
        assert np.array_equal(g[:4], np.zeros(4))

    def test_accuracy_and_predict(self):
        data = gaussian_clusters(64, 2, separation=8.0, seed=0)
        model = LogisticRegressionModel(data)
        rng = np.random.default_rng(0)
        w = rng.standard_normal(3) * 0.1
        for _ in range(400):
            w -= 0.5 * model.full_grad(w)
        assert model.accuracy(w) > 0.95

    def test_rebind_keeps_l2(self):
        d1 = small_dataset(n=4, dim=2, seed=1)
        d2 = small_dataset(n=6, dim=2, seed=2)
        model = SmallMlp(d1, [2, 3, 2]).with_l2(0.25)
        other = model.rebind(d2)
        assert other.l2 == 0.25
        assert other.n_examples == 6
