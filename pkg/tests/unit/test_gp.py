"""
tests/unit/test_gp.py - Gaussian-Process Surrogate Tests

Likelihood and gradient against independent references, interpolation
of noiseless data and the degenerate-input errors.
"""

import numpy as np
import pytest
from scipy.optimize import approx_fprime
from scipy.stats import multivariate_normal

from app.core.errors import NonFiniteObjectiveError, SingularKernelError
from app.services.gp import (
    PRIOR_LENGTHSCALE,
    Hyperparameters,
    _gram,
    _Objective,
    gp_fit,
    gp_posterior,
    log_marginal_likelihood,
    rbf,
)


@pytest.fixture
def data():
    rng = np.random.default_rng(42)
    X = rng.random((12, 2))
    y = np.sin(2 * np.pi * X[:, 0]) + 0.5 * X[:, 1] ** 2
    return X, y


class TestKernel:
    """RBF kernel and marginal likelihood."""

    def test_rbf_diagonal_is_signal_variance(self):
        """k(x, x) = s2."""
        X = np.random.default_rng(0).random((5, 3))
        np.testing.assert_allclose(np.diag(rbf(X, X, np.ones(3), 2.5)), 2.5)

    def test_lml_matches_gaussian_density(self, data):
        """The LML is the log density of y under N(0, K)."""
        X, y = data
        ys = (y - y.mean()) / y.std()
        hyper = Hyperparameters(np.array([0.3, 0.7]), 1.2, 1e-4)
        expected = multivariate_normal(mean=np.zeros(len(ys)), cov=_gram(X, hyper, 1e-8)).logpdf(ys)
        assert log_marginal_likelihood(X, ys, hyper) == pytest.approx(expected, rel=1e-8)

    @pytest.mark.parametrize("isotropic", [False, True])
    def test_gradient_matches_finite_differences(self, data, isotropic):
        """Analytic LML gradient in log-hyperparameter space."""
        X, y = data
        ys = (y - y.mean()) / y.std()
        objective = _Objective(X, ys, 1e-4, 1e-8, isotropic)
        theta = np.log([0.4, 0.9]) if not isotropic else np.log([0.5])
        theta = np.append(theta, np.log(1.3))
        _, grad = objective(theta)
        numeric = approx_fprime(theta, lambda t: objective(t)[0], 1e-6)
        np.testing.assert_allclose(grad, numeric, rtol=1e-4, atol=1e-5)


class TestFit:
    """gp_fit on smooth data."""

    def test_interpolates_noiseless_data(self):
        """With zero noise the mean passes through every observation."""
        X = np.random.default_rng(7).random((8, 2))
        y = np.sin(3 * X[:, 0]) + X[:, 1]
        model = gp_fit(X, y, noise_variance=0.0)
        mean, _ = model.predict(X)
        assert np.abs(mean - y).max() < 1e-8

    def test_small_noise_nearly_interpolates(self, data):
        """With the default noise the mean stays close to the observations."""
        X, y = data
        model = gp_fit(X, y, noise_variance=1e-6)
        mean, var = model.predict(X)
        np.testing.assert_allclose(mean, y, atol=1e-2 * y.std())
        assert var.max() < 1e-3 * y.var()

    def test_tiny_targets(self, data):
        """Standardization handles drags on a 1e-6 scale."""
        X, y = data
        model = gp_fit(X, 1e-6 * y)
        mean, _ = model.predict(X)
        np.testing.assert_allclose(mean, 1e-6 * y, atol=1e-8)

    def test_far_point_reverts_to_prior(self, data):
        """Far from the data the variance approaches the prior variance."""
        X, y = data
        model = gp_fit(X, y)
        _, var = gp_posterior(model, np.array([1e3, 1e3]))
        assert var == pytest.approx(model.prior_variance, rel=1e-6)

    def test_factorization_residual(self, data):
        """alpha solves the regularized system."""
        X, y = data
        assert gp_fit(X, y).factorization_residual() < 1e-8

    def test_hyperparameters_within_bounds(self, data):
        """Fitted values respect the box constraints."""
        X, y = data
        hyper = gp_fit(X, y).hyper
        assert np.all(hyper.lengthscales >= 1e-3) and np.all(hyper.lengthscales <= 10.0)
        assert 1e-6 <= hyper.signal_variance <= 1e3

    def test_isotropic(self, data):
        """One lengthscale shared by all dimensions."""
        X, y = data
        ls = gp_fit(X, y, isotropic=True).hyper.lengthscales
        assert len(ls) == 2
        assert ls[0] == ls[1]

    def test_deterministic(self, data):
        """Same seed, same hyperparameters."""
        X, y = data
        a, b = gp_fit(X, y, seed=3), gp_fit(X, y, seed=3)
        np.testing.assert_array_equal(a.hyper.lengthscales, b.hyper.lengthscales)
        assert a.log_marginal_likelihood == b.log_marginal_likelihood

    def test_single_observation(self):
        """n = 1 uses the prior hyperparameters and predicts the observation."""
        model = gp_fit(np.array([[0.5, 0.5]]), np.array([3.0]))
        np.testing.assert_allclose(model.hyper.lengthscales, PRIOR_LENGTHSCALE)
        mean, _ = gp_posterior(model, np.array([0.5, 0.5]))
        assert mean == pytest.approx(3.0)


class TestDegenerateInputs:
    """Inputs the surrogate refuses."""

    def test_duplicate_rows(self):
        """Two identical inputs make the kernel singular."""
        X = np.array([[0.1, 0.2], [0.1, 0.2], [0.5, 0.5]])
        with pytest.raises(SingularKernelError):
            gp_fit(X, np.array([1.0, 2.0, 3.0]))

    @pytest.mark.parametrize("bad", [np.nan, np.inf])
    def test_non_finite_target(self, bad):
        """NaN or infinite drags cannot be fitted."""
        with pytest.raises(NonFiniteObjectiveError):
            gp_fit(np.array([[0.1], [0.9]]), np.array([1.0, bad]))

    def test_shape_mismatch(self):
        """X and y must have matching rows."""
        with pytest.raises(ValueError):
            gp_fit(np.zeros((3, 2)), np.zeros(2))


class TestPosterior:
    """gp_posterior against the textbook formulas."""

    @pytest.mark.parametrize("n", [2, 5, 10])
    def test_matches_dense_inverse(self, n):
        """Mean and variance equal the explicit-inverse formulas for small n."""
        rng = np.random.default_rng(n)
        X = rng.random((n, 3))
        y = np.cos(4 * X[:, 0]) + X[:, 1] * X[:, 2]
        model = gp_fit(X, y, noise_variance=1e-3)
        Xs = rng.random((25, 3))

        ys = (y - model.y_mean) / model.y_std
        K_inv = np.linalg.inv(_gram(X, model.hyper, model.jitter))
        ks = rbf(X, Xs, model.hyper.lengthscales, model.hyper.signal_variance)
        expected_mean = model.y_mean + model.y_std * (ks.T @ K_inv @ ys)
        expected_var = (model.hyper.signal_variance - np.einsum("ij,ik,kj->j", ks, K_inv, ks)) * model.y_std**2

        mean, var = model.predict(Xs)
        np.testing.assert_allclose(mean, expected_mean, rtol=1e-10, atol=1e-10)
        np.testing.assert_allclose(var, np.maximum(expected_var, 0.0), rtol=1e-10, atol=1e-10)

    def test_variance_clamping_is_rare(self):
        """Negative variances from rounding are clamped on well under 0.1% of queries."""
        rng = np.random.default_rng(11)
        clamped = queried = 0
        for seed in range(5):
            X = rng.random((10, 4))
            y = rng.normal(size=10)
            model = gp_fit(X, y, seed=seed, restarts=2)
            model.predict(rng.random((2000, 4)))
            clamped += model.clamp_events
            queried += model.queries
        assert queried == 10000
        assert clamped / queried < 1e-3
