"""Tests for losses, links and gradients"""
import pytest
import numpy as np
from numpy.testing import assert_allclose

from homopursuit.errors import ArgumentError
from homopursuit.model import (
    LINEAR,
    LOGISTIC,
    DatasetBundle,
    ParameterSet,
    coefficient_tensor,
    get_link,
    individual_loss,
    loss_at,
    map_individuals,
    partial_gradients,
    predict,
    slice_gradient,
)
from homopursuit.tensor_core import tucker_compose


def random_theta(rng, n=3, p1=5, p2=4, K1=3, K2=2, r=2):
    return ParameterSet(
        C=rng.standard_normal((p1, K1)),
        R=rng.standard_normal((p2, K2)),
        L1=[rng.standard_normal((K1, r)) for _ in range(n)],
        L2=[rng.standard_normal((K2, r)) for _ in range(n)],
    )


def random_data(rng, n=3, p1=5, p2=4, m=6, binary=False):
    xs = [rng.standard_normal((m, p1, p2)) for _ in range(n)]
    if binary:
        ys = [rng.integers(0, 2, m).astype(float) for _ in range(n)]
    else:
        ys = [rng.standard_normal(m) for _ in range(n)]
    return DatasetBundle(xs, ys)


def noiseless_data(rng, theta, m=8):
    B = coefficient_tensor(theta)
    p1, p2 = theta.dims
    xs, ys = [], []
    for i in range(theta.n):
        X = rng.standard_normal((m, p1, p2))
        xs.append(X)
        ys.append(X.reshape(m, -1) @ B[:, :, i].reshape(-1))
    return DatasetBundle(xs, ys)


def central_difference(f, x, h_scale=1e-6):
    grad = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        h = h_scale * (1.0 + abs(x[idx]))
        up, down = x.copy(), x.copy()
        up[idx] += h
        down[idx] -= h
        grad[idx] = (f(up) - f(down)) / (2 * h)
    return grad


@pytest.fixture
def rng():
    return np.random.default_rng(11)


class TestLinks:
    def test_linear(self):
        assert LINEAR.g(3.0) == 4.5
        assert LINEAR.g_prime(3.0) == 3.0

    def test_logistic_is_stable(self):
        assert np.isfinite(LOGISTIC.g(800.0))
        assert LOGISTIC.g(-800.0) >= 0.0
        s = LOGISTIC.g_prime(np.array([-800.0, 0.0, 800.0]))
        assert np.all((s > 0) & (s < 1))
        assert s[1] == pytest.approx(0.5)

    def test_logistic_value(self):
        assert LOGISTIC.g(0.0) == pytest.approx(np.log(2.0))
        assert LOGISTIC.g(2.0) == pytest.approx(np.log1p(np.exp(2.0)))

    def test_unknown_link(self):
        with pytest.raises(ArgumentError):
            get_link("probit")


class TestDatasetBundle:
    def test_dims(self, rng):
        data = random_data(rng, n=2, m=4)
        assert data.n == 2
        assert data.dims == (5, 4)
        assert data.m == [4, 4]
        assert data.total == 8

    def test_mismatched_counts(self, rng):
        with pytest.raises(ArgumentError):
            DatasetBundle([rng.standard_normal((3, 2, 2))], [np.zeros(4)])

    def test_mismatched_dims(self, rng):
        with pytest.raises(ArgumentError):
            DatasetBundle(
                [rng.standard_normal((3, 2, 2)), rng.standard_normal((3, 2, 3))],
                [np.zeros(3), np.zeros(3)],
            )

    def test_split_keeps_order(self, rng):
        data = random_data(rng, n=2, m=10)
        train, test = data.split(0.7)
        assert train.m == [7, 7]
        assert test.m == [3, 3]
        assert_allclose(train.ys[0], data.ys[0][:7])
        assert_allclose(test.xs[1], data.xs[1][7:])

    def test_pooled(self, rng):
        data = random_data(rng, n=3, m=4)
        pooled = data.pooled()
        assert pooled.n == 1
        assert pooled.m == [12]


class TestCoefficientTensor:
    def test_zero_loadings(self, rng):
        theta = random_theta(rng)
        theta.L1 = [np.zeros_like(a) for a in theta.L1]
        assert np.all(coefficient_tensor(theta) == 0)

    def test_identity_square(self):
        theta = ParameterSet(C=np.eye(3), R=np.eye(3), L1=[np.eye(3)], L2=[np.eye(3)])
        assert_allclose(coefficient_tensor(theta)[:, :, 0], np.eye(3))

    def test_matches_tucker_compose(self, rng):
        theta = random_theta(rng)
        assert_allclose(coefficient_tensor(theta), tucker_compose(theta.core(), theta.C, theta.R))
        for i in range(theta.n):
            assert_allclose(coefficient_tensor(theta)[:, :, i], theta.slice(i), atol=1e-12)

    def test_rank_bounded_by_r(self, rng):
        theta = random_theta(rng, r=1)
        for i in range(theta.n):
            assert np.linalg.matrix_rank(theta.slice(i)) == 1

    def test_gauge_invariance(self, rng):
        theta = random_theta(rng)
        B = coefficient_tensor(theta)
        for _ in range(50):
            Q1 = rng.standard_normal((3, 3)) + 3 * np.eye(3)
            Q2 = rng.standard_normal((2, 2)) + 3 * np.eye(2)
            P = [rng.standard_normal((2, 2)) + 3 * np.eye(2) for _ in range(theta.n)]
            assert_allclose(coefficient_tensor(theta.transformed(Q1, Q2, P)), B, atol=1e-10)

    def test_inconsistent_loadings(self, rng):
        with pytest.raises(ArgumentError):
            ParameterSet(C=np.eye(3), R=np.eye(2), L1=[np.ones((2, 1))], L2=[np.ones((2, 1))])


class TestLoss:
    def test_zero_residual(self, rng):
        theta = random_theta(rng)
        data = noiseless_data(rng, theta)
        expected = -0.5 * sum(float(np.sum(y ** 2)) for y in data.ys)
        assert loss_at(theta, data, LINEAR) == pytest.approx(expected, rel=1e-12)

    def test_logistic_at_zero(self, rng):
        data = random_data(rng, binary=True)
        theta = random_theta(rng)
        theta.L1 = [np.zeros_like(a) for a in theta.L1]
        assert loss_at(theta, data, LOGISTIC) == pytest.approx(data.total * np.log(2.0))

    def test_loop_oracle(self, rng):
        theta = random_theta(rng, n=2)
        data = random_data(rng, n=2, m=3)
        expected = 0.0
        for i in range(2):
            B = theta.slice(i)
            for j in range(3):
                t = float(np.sum(data.xs[i][j] * B))
                expected += 0.5 * t * t - data.ys[i][j] * t
        assert loss_at(theta, data, LINEAR) == pytest.approx(expected, rel=1e-12)

    def test_equals_per_slice_losses(self, rng):
        theta = random_theta(rng)
        data = random_data(rng)
        per_slice = sum(individual_loss(theta.slice(i), data, i, LOGISTIC) for i in range(theta.n))
        assert loss_at(theta, data, LOGISTIC) == pytest.approx(per_slice, rel=1e-12)

    def test_dimension_mismatch(self, rng):
        with pytest.raises(ArgumentError):
            loss_at(random_theta(rng, p1=6), random_data(rng), LINEAR)


class TestSliceGradient:
    def test_zero_residual(self, rng):
        B = rng.standard_normal((3, 2))
        X = rng.standard_normal((3, 2))
        assert np.all(slice_gradient(B, X, float(np.sum(B * X)), LINEAR) == 0)

    def test_logistic_at_zero(self, rng):
        X = rng.standard_normal((3, 2))
        assert_allclose(slice_gradient(np.zeros((3, 2)), X, 1.0, LOGISTIC), -0.5 * X)

    @pytest.mark.parametrize("link", [LINEAR, LOGISTIC])
    def test_finite_differences(self, rng, link):
        B = 0.3 * rng.standard_normal((3, 2))
        X = rng.standard_normal((3, 2))
        y = 1.0

        def f(b):
            t = float(np.sum(X * b))
            return float(link.g(t) - y * t)

        assert_allclose(slice_gradient(B, X, y, link), central_difference(f, B), rtol=1e-5, atol=1e-8)


class TestPartialGradients:
    def test_zero_at_noiseless_truth(self, rng):
        theta = random_theta(rng)
        data = noiseless_data(rng, theta)
        grads = partial_gradients(theta, data, LINEAR)
        scale = 1e-9 * (1 + max(np.abs(y).max() for y in data.ys)) ** 2
        assert np.abs(grads.gC).max() < scale
        assert np.abs(grads.gR).max() < scale
        assert all(np.abs(g).max() < scale for g in grads.g1 + grads.g2)

    def test_scalar_case(self):
        theta = ParameterSet(C=np.array([[2.0]]), R=np.array([[3.0]]), L1=[np.array([[0.5]])], L2=[np.array([[4.0]])])
        x, y = 1.5, 2.0
        data = DatasetBundle([np.array([[[x]]])], [np.array([y])])
        grads = partial_gradients(theta, data, LINEAR)
        b = 2.0 * 0.5 * 4.0 * 3.0
        resid = x * b - y
        assert grads.gC[0, 0] == pytest.approx(resid * x * 3.0 * 4.0 * 0.5)
        assert grads.gR[0, 0] == pytest.approx(resid * x * 2.0 * 0.5 * 4.0)
        assert grads.g1[0][0, 0] == pytest.approx(resid * x * 2.0 * 3.0 * 4.0)
        assert grads.g2[0][0, 0] == pytest.approx(resid * x * 3.0 * 2.0 * 0.5)

    @pytest.mark.parametrize("link", [LINEAR, LOGISTIC])
    def test_finite_differences(self, link):
        for seed in range(10):
            rng = np.random.default_rng(100 + seed)
            theta = random_theta(rng, n=2, p1=4, p2=3, K1=2, K2=2, r=1)
            theta.C *= 0.5
            data = random_data(rng, n=2, p1=4, p2=3, m=5, binary=link is LOGISTIC)
            grads = partial_gradients(theta, data, link)

            def with_block(name, value, i=None):
                C, R = theta.C, theta.R
                L1, L2 = list(theta.L1), list(theta.L2)
                if name == "C":
                    C = value
                elif name == "R":
                    R = value
                elif name == "L1":
                    L1[i] = value
                else:
                    L2[i] = value
                return loss_at(ParameterSet(C=C, R=R, L1=L1, L2=L2), data, link)

            assert_allclose(grads.gC, central_difference(lambda v: with_block("C", v), theta.C), rtol=1e-5, atol=1e-6)
            assert_allclose(grads.gR, central_difference(lambda v: with_block("R", v), theta.R), rtol=1e-5, atol=1e-6)
            for i in range(2):
                assert_allclose(
                    grads.g1[i], central_difference(lambda v: with_block("L1", v, i), theta.L1[i]), rtol=1e-5, atol=1e-6
                )
                assert_allclose(
                    grads.g2[i], central_difference(lambda v: with_block("L2", v, i), theta.L2[i]), rtol=1e-5, atol=1e-6
                )

    def test_grams_symmetric(self, rng):
        grads = partial_gradients(random_theta(rng), random_data(rng), LINEAR)
        for G in [grads.gramCtilde, grads.gramRtilde, grads.gramC, grads.gramR] + grads.gramRi + grads.gramCi:
            assert_allclose(G, G.T, atol=1e-10)

    def test_gram_definitions(self, rng):
        theta = random_theta(rng)
        grads = partial_gradients(theta, random_data(rng), LINEAR)
        RtR = theta.R.T @ theta.R
        expected = sum(a @ b.T @ RtR @ b @ a.T for a, b in zip(theta.L1, theta.L2))
        assert_allclose(grads.gramCtilde, expected, rtol=1e-12, atol=1e-12)
        assert_allclose(grads.gramRi[0], theta.L2[0].T @ RtR @ theta.L2[0], rtol=1e-12, atol=1e-12)

    def test_descent_direction(self, rng):
        theta = random_theta(rng)
        data = random_data(rng)
        grads = partial_gradients(theta, data, LINEAR)
        t = 1e-6
        stepped = ParameterSet(
            C=theta.C - t * grads.gC,
            R=theta.R - t * grads.gR,
            L1=[a - t * g for a, g in zip(theta.L1, grads.g1)],
            L2=[b - t * g for b, g in zip(theta.L2, grads.g2)],
        )
        assert loss_at(stepped, data, LINEAR) < loss_at(theta, data, LINEAR)

    def test_thread_count_does_not_change_result(self, rng):
        theta = random_theta(rng, n=5)
        data = random_data(rng, n=5)
        one = partial_gradients(theta, data, LINEAR, threads=1)
        four = partial_gradients(theta, data, LINEAR, threads=4)
        assert np.array_equal(one.gC, four.gC)
        assert np.array_equal(one.gramRtilde, four.gramRtilde)
        assert one.loss == four.loss


class TestHelpers:
    def test_map_individuals_keeps_order(self):
        assert map_individuals(lambda i: i * i, 6, threads=3) == [0, 1, 4, 9, 16, 25]

    def test_predict_linear(self, rng):
        theta = random_theta(rng)
        data = noiseless_data(rng, theta)
        fitted = predict(coefficient_tensor(theta), data, LINEAR)
        for y, f in zip(data.ys, fitted):
            assert_allclose(f, y, atol=1e-10)
