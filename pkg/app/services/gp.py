"""
app/services/gp.py - Gaussian-Process Surrogate

GP regression on the unit cube with an RBF + white-noise kernel:

    k(x, x') = s2 * exp(-0.5 * sum_i (x_i - x'_i)^2 / l_i^2) + noise * delta(x, x')

Targets are standardized before fitting. Lengthscales l_i and the signal
variance s2 are fitted by maximizing the log marginal likelihood. The noise
variance is not fitted: it comes from optimizer.noise_variance (standardized
units, within [0, 1]), so a run can ask for exact interpolation with 0.

Fit procedure:
1. screen 256 log-uniform hyperparameter draws within the bounds
2. run L-BFGS-B from the 8 best (analytic gradient)
3. factorize K + (noise + jitter) * I with the smallest jitter on the ladder
   0, 1e-12, 1e-11, ... 1e-4 that gives a numerically sound factor
"""

import math
from dataclasses import dataclass, field

import numpy as np
from loguru import logger
from scipy.linalg import LinAlgError, cho_solve, cholesky, solve_triangular
from scipy.optimize import minimize
from scipy.spatial.distance import pdist

from app.core.errors import NonFiniteObjectiveError, SingularKernelError

LENGTHSCALE_BOUNDS = (1e-3, 10.0)
SIGNAL_VARIANCE_BOUNDS = (1e-6, 1e3)
DEFAULT_JITTER = 1e-8
# Final factorization: no jitter first, then 1e-12 up to 1e-4
JITTER_LADDER = (0.0, *(10.0**e for e in range(-12, -3)))
# Rows closer than this count as duplicates
DUPLICATE_TOL = 1e-12
SCREEN_SIZE = 256

# Hyperparameters used when a single observation leaves nothing to fit
PRIOR_LENGTHSCALE = 0.5
PRIOR_SIGNAL_VARIANCE = 1.0


@dataclass(frozen=True)
class Hyperparameters:
    lengthscales: np.ndarray  # (d,)
    signal_variance: float  # standardized units
    noise_variance: float  # standardized units

    def as_dict(self) -> dict:
        return {
            "lengthscales": [float(v) for v in self.lengthscales],
            "signal_variance": float(self.signal_variance),
            "noise_variance": float(self.noise_variance),
        }


def rbf(a: np.ndarray, b: np.ndarray, lengthscales: np.ndarray, signal_variance: float) -> np.ndarray:
    diff = (a[:, None, :] - b[None, :, :]) / lengthscales
    return signal_variance * np.exp(-0.5 * (diff * diff).sum(axis=-1))


@dataclass(eq=False)
class GpModel:
    X: np.ndarray  # (n, d) unit cube
    y: np.ndarray  # (n,) raw targets
    y_mean: float
    y_std: float
    hyper: Hyperparameters
    jitter: float
    chol: np.ndarray  # lower Cholesky factor of K + (noise + jitter) * I
    alpha: np.ndarray  # K^-1 y_standardized
    log_marginal_likelihood: float
    # Posterior variances below zero that were clamped, out of all queried points
    clamp_events: int = field(default=0)
    queries: int = field(default=0)

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def prior_variance(self) -> float:
        """Latent prior variance in raw target units."""
        return self.hyper.signal_variance * self.y_std**2

    def predict(self, Xs: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """
        Posterior mean and latent variance at many points.

        Args:
            Xs: (m, d) points in the unit cube

        Returns:
            (mean (m,), variance (m,)) in raw target units
        """
        Xs = np.atleast_2d(np.asarray(Xs, dtype=np.float64))
        ks = rbf(self.X, Xs, self.hyper.lengthscales, self.hyper.signal_variance)
        mean = ks.T @ self.alpha
        v = solve_triangular(self.chol, ks, lower=True, check_finite=False)
        var = self.hyper.signal_variance - (v * v).sum(axis=0)

        negative = var < 0
        self.clamp_events += int(np.count_nonzero(negative))
        self.queries += len(var)
        var = np.where(negative, 0.0, var)
        return self.y_mean + self.y_std * mean, var * self.y_std**2

    def factorization_residual(self) -> float:
        """||(K + (noise + jitter) I) alpha - y|| / ||y|| in standardized units."""
        K = _gram(self.X, self.hyper, self.jitter)
        y = (self.y - self.y_mean) / self.y_std
        return float(np.linalg.norm(K @ self.alpha - y) / max(np.linalg.norm(y), 1e-300))


def _gram(X: np.ndarray, hyper: Hyperparameters, jitter: float) -> np.ndarray:
    K = rbf(X, X, hyper.lengthscales, hyper.signal_variance)
    K[np.diag_indices_from(K)] += hyper.noise_variance + jitter
    return K


# ============ Marginal likelihood ============


class _Objective:
    """Log marginal likelihood and gradient in log-hyperparameter space."""

    def __init__(self, X: np.ndarray, y: np.ndarray, noise: float, jitter: float, isotropic: bool) -> None:
        self.y = y
        self.noise = noise
        self.jitter = jitter
        self.isotropic = isotropic
        self.d = X.shape[1]
        diff = X[:, None, :] - X[None, :, :]
        self.sq = diff * diff  # (n, n, d)

    def unpack(self, theta: np.ndarray) -> tuple[np.ndarray, float]:
        ls = np.exp(theta[:-1])
        if self.isotropic:
            ls = np.full(self.d, ls[0])
        return ls, float(np.exp(theta[-1]))

    def __call__(self, theta: np.ndarray) -> tuple[float, np.ndarray]:
        ls, sf2 = self.unpack(theta)
        scaled = self.sq / (ls * ls)
        Kr = sf2 * np.exp(-0.5 * scaled.sum(axis=-1))
        K = Kr.copy()
        K[np.diag_indices_from(K)] += self.noise + self.jitter
        try:
            L = cholesky(K, lower=True, check_finite=False)
        except LinAlgError:
            return -math.inf, np.zeros_like(theta)

        n = len(self.y)
        alpha = cho_solve((L, True), self.y, check_finite=False)
        lml = -0.5 * float(self.y @ alpha) - float(np.log(np.diag(L)).sum()) - 0.5 * n * math.log(2 * math.pi)

        # 0.5 * tr((alpha alpha^T - K^-1) dK/dtheta)
        inner = np.outer(alpha, alpha) - cho_solve((L, True), np.eye(n), check_finite=False)
        weighted = inner * Kr
        grad_ls = 0.5 * np.einsum("jk,jki->i", weighted, scaled)
        if self.isotropic:
            grad_ls = np.array([grad_ls.sum()])
        grad_sf = 0.5 * weighted.sum()
        return lml, np.concatenate([grad_ls, [grad_sf]])

    def negative(self, theta: np.ndarray) -> tuple[float, np.ndarray]:
        lml, grad = self(theta)
        if not math.isfinite(lml):
            return 1e25, np.zeros_like(theta)
        return -lml, -grad


def log_marginal_likelihood(
    X: np.ndarray, y: np.ndarray, hyper: Hyperparameters, jitter: float = DEFAULT_JITTER
) -> float:
    """LML of standardized targets y under the given hyperparameters."""
    objective = _Objective(X, y, hyper.noise_variance, jitter, isotropic=False)
    theta = np.concatenate([np.log(hyper.lengthscales), [math.log(hyper.signal_variance)]])
    return objective(theta)[0]


# ============ Fitting ============


def _factorize(X: np.ndarray, hyper: Hyperparameters) -> tuple[np.ndarray, float]:
    # Pivots below this are rounding noise, not information
    floor = len(X) * np.finfo(np.float64).eps * (hyper.signal_variance + hyper.noise_variance)
    for jitter in JITTER_LADDER:
        try:
            chol = cholesky(_gram(X, hyper, jitter), lower=True, check_finite=False)
        except LinAlgError:
            logger.debug(f"cholesky failed with jitter {jitter:g}")
            continue
        if float(np.diag(chol).min()) ** 2 > floor:
            return chol, jitter
    raise SingularKernelError(f"kernel matrix not positive definite with jitter {JITTER_LADDER[-1]:g}")


def gp_fit(
    X: np.ndarray,
    y: np.ndarray,
    noise_variance: float = 1e-6,
    isotropic: bool = False,
    seed: int = 0,
    restarts: int = 8,
    jitter: float = DEFAULT_JITTER,
) -> GpModel:
    """
    Fit a GP to observations on the unit cube.

    Args:
        X: (n, d) inputs in [0, 1]^d, rows unique
        y: (n,) finite targets
        noise_variance: White-noise variance in standardized units
        isotropic: Share one lengthscale across dimensions
        seed: Seed of the hyperparameter screen
        restarts: Number of L-BFGS-B starts
        jitter: Diagonal jitter of the likelihood during the hyperparameter search

    Returns:
        Trained GpModel

    Raises:
        NonFiniteObjectiveError: If any target is NaN or infinite
        SingularKernelError: If two rows coincide or the kernel cannot be factorized
    """
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    y = np.asarray(y, dtype=np.float64).ravel()
    n, d = X.shape
    if n < 1 or len(y) != n:
        raise ValueError(f"need n >= 1 matching rows, got X {X.shape} and y {y.shape}")
    if not np.all(np.isfinite(y)):
        raise NonFiniteObjectiveError("targets contain NaN or infinity")
    if n > 1 and pdist(X).min() <= DUPLICATE_TOL:
        raise SingularKernelError("duplicate input rows")

    # 1. Standardize
    y_mean = float(y.mean())
    y_std = float(y.std())
    if not y_std > 0:
        y_std = 1.0
    ys = (y - y_mean) / y_std

    # 2. Hyperparameters
    if n == 1:
        hyper = Hyperparameters(np.full(d, PRIOR_LENGTHSCALE), PRIOR_SIGNAL_VARIANCE, noise_variance)
    else:
        hyper = _optimize(X, ys, noise_variance, isotropic, seed, restarts, jitter)

    # 3. Factorize
    chol, used_jitter = _factorize(X, hyper)
    alpha = cho_solve((chol, True), ys, check_finite=False)
    lml = (
        -0.5 * float(ys @ alpha) - float(np.log(np.diag(chol)).sum()) - 0.5 * n * math.log(2 * math.pi)
    )
    return GpModel(
        X=X,
        y=y,
        y_mean=y_mean,
        y_std=y_std,
        hyper=hyper,
        jitter=used_jitter,
        chol=chol,
        alpha=alpha,
        log_marginal_likelihood=lml,
    )


def _optimize(
    X: np.ndarray, ys: np.ndarray, noise: float, isotropic: bool, seed: int, restarts: int, jitter: float
) -> Hyperparameters:
    d = X.shape[1]
    objective = _Objective(X, ys, noise, jitter, isotropic)
    n_ls = 1 if isotropic else d
    lo = np.array([math.log(LENGTHSCALE_BOUNDS[0])] * n_ls + [math.log(SIGNAL_VARIANCE_BOUNDS[0])])
    hi = np.array([math.log(LENGTHSCALE_BOUNDS[1])] * n_ls + [math.log(SIGNAL_VARIANCE_BOUNDS[1])])

    # 1. Screen
    rng = np.random.Generator(np.random.PCG64(seed))
    screen = rng.uniform(lo, hi, size=(SCREEN_SIZE, len(lo)))
    values = np.array([objective(theta)[0] for theta in screen])
    if not np.any(np.isfinite(values)):
        raise SingularKernelError("no hyperparameter draw gives a positive definite kernel")
    order = np.argsort(-np.where(np.isfinite(values), values, -np.inf), kind="stable")

    # 2. Multi-start ascent
    best_theta = screen[order[0]]
    best_value = values[order[0]]
    for start in screen[order[:restarts]]:
        result = minimize(
            objective.negative, start, jac=True, method="L-BFGS-B", bounds=list(zip(lo, hi))
        )
        value = -float(result.fun)
        if math.isfinite(value) and value > best_value:
            best_theta, best_value = np.clip(result.x, lo, hi), value

    ls, sf2 = objective.unpack(best_theta)
    logger.debug(f"gp fit n={len(ys)} d={d} lml={best_value:.4f} signal={sf2:.3g} ls={np.round(ls, 4).tolist()}")
    return Hyperparameters(lengthscales=ls, signal_variance=sf2, noise_variance=noise)


def gp_posterior(model: GpModel, x: np.ndarray) -> tuple[float, float]:
    """(mean, variance) at a single point."""
    mean, var = model.predict(np.asarray(x, dtype=np.float64).reshape(1, -1))
    return float(mean[0]), float(var[0])
