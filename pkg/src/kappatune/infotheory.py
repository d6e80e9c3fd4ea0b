"""Entropy of Gaussian signals through linear units and element-wise activations.

For ``Z = W x`` with ``x ~ N(0, sigma_x^2 I_n)`` and ``W`` of full row rank,
``h(Z) = (m/2) log2(2 pi e sigma_x^2) + sum_i log2 sigma_i(W)`` bits. Two
independent routes to that number are provided (singular values and a
Cholesky log-determinant), plus numerical checks of the equal-spectrum
optimum under a Frobenius constraint and of the contractive-activation bound
``h(phi(Z)) <= h(Z)``. All entropies are in bits.
"""

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree
from scipy.special import digamma, gammaln

from .errors import (
    ConfigError,
    ConvergenceFailure,
    DegenerateScale,
    DegenerateSpectrum,
    InsufficientSamples,
    SingularCovariance,
)
from .rng import box_muller, make_rng

LOG2_2PIE = math.log2(2.0 * math.pi * math.e)
MIN_MC_SAMPLES = 1000
EPS = float(np.finfo(np.float64).eps)
ACTIVATIONS = ("identity", "tanh", "sigmoid", "softplus", "leaky_relu")


@dataclass
class CheckReport:
    name: str
    passed: bool
    measured: dict
    tolerance: dict
    seed: int = None
    details: dict = field(default_factory=dict)

    def to_dict(self):
        return {
            "name": self.name,
            "passed": bool(self.passed),
            "measured": self.measured,
            "tolerance": self.tolerance,
            "seed": self.seed,
            "details": self.details,
        }


@dataclass
class EntropyReport:
    h_formula: float
    h_det: float
    h_mc: float
    mc_std_err: float
    n_samples: int
    seed: int
    correction: float = 0.0
    correction_bound: float = 0.0
    bound_holds: bool = True

    def to_dict(self):
        return dict(self.__dict__)


@dataclass
class GaussianChannel:
    W: np.ndarray
    sigma_x: float = 1.0

    def __post_init__(self):
        self.W = np.atleast_2d(np.asarray(self.W, dtype=np.float64))
        if self.W.ndim != 2:
            raise ConfigError("W must be a matrix")
        if not np.all(np.isfinite(self.W)):
            raise ConfigError("W must be finite")
        if not self.sigma_x > 0:
            raise ConfigError("sigma_x must be positive")

    @property
    def m(self):
        return self.W.shape[0]

    @property
    def n(self):
        return self.W.shape[1]

    def sample(self, n_samples, rng, mean=None):
        """``n_samples`` draws of ``W x`` as rows, ``x ~ N(mean, sigma_x^2 I)``."""
        x = self.sigma_x * box_muller(rng, (n_samples, self.n))
        if mean is not None:
            x = x + np.asarray(mean, dtype=np.float64)
        return x @ self.W.T


@dataclass(frozen=True)
class ActivationSpec:
    kind: str = "tanh"
    alpha: float = 0.01

    def __post_init__(self):
        if self.kind not in ACTIVATIONS:
            raise ConfigError(f"unknown activation {self.kind!r}; expected one of {ACTIVATIONS}")
        if self.kind == "leaky_relu" and not 0.0 <= self.alpha <= 1.0:
            raise ConfigError("leaky_relu slope must lie in [0, 1] to stay contractive")

    @classmethod
    def parse(cls, text):
        """``"tanh"``, ``"leaky_relu"`` or ``"leaky_relu(0.05)"``."""
        text = text.strip()
        if text.startswith("leaky_relu(") and text.endswith(")"):
            return cls("leaky_relu", float(text[len("leaky_relu("):-1]))
        return cls(text)

    def __str__(self):
        return f"leaky_relu({self.alpha:g})" if self.kind == "leaky_relu" else self.kind

    @property
    def contractive(self):
        return True

    def __call__(self, z):
        z = np.asarray(z, dtype=np.float64)
        if self.kind == "identity":
            return z.copy()
        if self.kind == "tanh":
            return np.tanh(z)
        if self.kind == "sigmoid":
            return 0.5 * (1.0 + np.tanh(0.5 * z))
        if self.kind == "softplus":
            return np.logaddexp(0.0, z)
        return np.where(z >= 0, z, self.alpha * z)

    def derivative(self, z):
        z = np.asarray(z, dtype=np.float64)
        if self.kind == "identity":
            return np.ones_like(z)
        if self.kind == "tanh":
            t = np.tanh(z)
            return 1.0 - t * t
        if self.kind == "sigmoid":
            s = 0.5 * (1.0 + np.tanh(0.5 * z))
            return s * (1.0 - s)
        if self.kind == "softplus":
            return 0.5 * (1.0 + np.tanh(0.5 * z))
        # kink at 0 is nudged to +eps, i.e. the right derivative
        return np.where(z >= 0, 1.0, self.alpha)

    def log_abs_derivative(self, z):
        """Natural log of ``|phi'(z)|``, evaluated without underflow."""
        z = np.asarray(z, dtype=np.float64)
        if self.kind == "identity":
            return np.zeros_like(z)
        if self.kind == "tanh":
            # 1 - tanh^2 = sech^2 = 4 e^{-2|z|} / (1 + e^{-2|z|})^2
            a = np.abs(z)
            return 2.0 * (math.log(2.0) - a - np.log1p(np.exp(-2.0 * a)))
        if self.kind == "sigmoid":
            return -np.logaddexp(0.0, -z) - np.logaddexp(0.0, z)
        if self.kind == "softplus":
            return -np.logaddexp(0.0, -z)
        with np.errstate(divide="ignore"):
            return np.where(z >= 0, 0.0, math.log(self.alpha) if self.alpha > 0 else -np.inf)

    @property
    def sup_log2_derivative(self):
        """Upper bound of ``log2 |phi'|`` over the real line."""
        return -2.0 if self.kind == "sigmoid" else 0.0


def gaussian_output_entropy(sigmas, m, sigma_x=1.0):
    """Output entropy in bits from the singular values of ``W`` (m outputs)."""
    s = np.asarray(sigmas, dtype=np.float64).reshape(-1)
    if s.size < m:
        raise DegenerateSpectrum(
            f"{s.size} singular values for {m} outputs: output covariance is singular"
        )
    if s.size > m:
        raise ValueError(f"at most {m} singular values expected, got {s.size}")
    if np.any(~(s > 0)):
        raise DegenerateSpectrum("singular values must all be positive")
    if not sigma_x > 0:
        raise ValueError("sigma_x must be positive")
    return 0.5 * m * math.log2(2.0 * math.pi * math.e * sigma_x * sigma_x) + float(np.sum(np.log2(s)))


def entropy_via_det(channel):
    """Output entropy from ``log det(sigma_x^2 W W^T)`` by Cholesky factorization."""
    W = channel.W
    m, n = W.shape
    if m > n:
        raise SingularCovariance(f"{m}x{n} channel: W W^T has rank at most {n} < {m}")
    gram = W @ W.T
    try:
        L = np.linalg.cholesky(gram)
    except np.linalg.LinAlgError:
        raise SingularCovariance("W W^T is not positive definite") from None
    diag = np.diag(L)
    if np.min(diag) <= 1e-12 * np.max(diag):
        raise SingularCovariance("W is numerically rank deficient")
    log2_det_gram = 2.0 * float(np.sum(np.log2(diag)))
    log2_det_cov = m * math.log2(channel.sigma_x**2) + log2_det_gram
    return 0.5 * (m * LOG2_2PIE + log2_det_cov)


def log_volume_objective(sigmas):
    return float(np.sum(np.log2(np.asarray(sigmas, dtype=np.float64))))


def theorem1_optimum(C, p):
    """Equal-spectrum maximizer of ``sum log2 sigma_k`` subject to ``sum sigma_k^2 = C``."""
    if not C > 0 or p < 1:
        raise ValueError("need C > 0 and p >= 1")
    s = math.sqrt(C / p)
    return [s] * p, 0.5 * p * math.log2(C / p)


def random_feasible_points(C, p, count, rng):
    """``count`` points on the positive part of the sphere ``sum sigma^2 = C``."""
    g = np.abs(box_muller(rng, (count, p)))
    g = np.maximum(g, 1e-300)
    return g * (math.sqrt(C) / np.linalg.norm(g, axis=1, keepdims=True))


def _project(sigma, C):
    return sigma * (math.sqrt(C) / np.linalg.norm(sigma))


def projected_ascent(start, C, max_iter=10_000, tol=1e-12):
    """Maximize ``sum log2 sigma`` on the sphere from ``start``.

    Each step moves along the gradient and renormalizes onto the sphere;
    the step is halved whenever the objective fails to improve or a
    coordinate would leave the positive orthant, and doubled (up to ``C``)
    after an accepted move. Stops when the tangential
    gradient vanishes or the step collapses below ``tol * C`` (no step
    improves the objective at float resolution). Returns
    ``(sigma, iterations)``.
    """
    sigma = _project(np.asarray(start, dtype=np.float64), C)
    value = log_volume_objective(sigma)
    step = float(C)
    trace = []
    for it in range(1, max_iter + 1):
        grad = 1.0 / (sigma * math.log(2.0))
        unit = sigma / np.linalg.norm(sigma)
        tangent = grad - np.dot(grad, unit) * unit
        if np.linalg.norm(tangent) <= tol * np.linalg.norm(grad) or step < tol * C:
            return sigma, it
        candidate = sigma + step * grad
        if np.all(candidate > 0):
            candidate = _project(candidate, C)
            cand_value = log_volume_objective(candidate)
            # gains within a few ulps are projection round-off, not progress
            if cand_value > value + 4.0 * EPS * max(1.0, abs(value)):
                sigma, value = candidate, cand_value
                step = min(2.0 * step, float(C))
                if len(trace) < 50:
                    trace.append(value)
                continue
        step *= 0.5
    raise ConvergenceFailure(
        f"projected ascent did not converge in {max_iter} iterations (C={C})", trace
    )


def theorem1_numeric_check(C, p, n_restarts=100, seed=0, n_random_points=1000):
    if not C > 0 or p < 1 or n_restarts < 1:
        raise ValueError("need C > 0, p >= 1, n_restarts >= 1")
    rng = make_rng((seed, 1))
    target, f_opt = theorem1_optimum(C, p)
    target = target[0]
    starts = random_feasible_points(C, p, n_restarts, rng)
    max_dev = 0.0
    max_excess = -math.inf
    iterations = []
    for start in starts:
        sigma, its = projected_ascent(start, C)
        iterations.append(its)
        max_dev = max(max_dev, float(np.max(np.abs(sigma - target))))
        max_excess = max(max_excess, log_volume_objective(sigma) - f_opt)

    points = random_feasible_points(C, p, n_random_points, make_rng((seed, 2)))
    point_excess = float(np.max(np.sum(np.log2(points), axis=1)) - f_opt)

    dev_tol = 1e-6 * max(1.0, target)
    passed = max_dev < dev_tol and max_excess <= 1e-9 and point_excess <= 1e-9
    return CheckReport(
        name=f"theorem1[C={C:g},p={p}]",
        passed=passed,
        measured={
            "max_sigma_deviation": max_dev,
            "max_ascent_excess": max_excess,
            "max_random_point_excess": point_excess,
            "optimum": f_opt,
            "max_iterations": max(iterations),
        },
        tolerance={"sigma_deviation": dev_tol, "excess": 1e-9},
        seed=seed,
    )


def jacobian_log_det(activation, z, base=2.0):
    """``log|det J_phi(z)| = sum_i log|phi'(z_i)|`` in the given base.

    Returns ``-inf`` when some ``phi'(z_i)`` is exactly zero.
    """
    total = float(np.sum(activation.log_abs_derivative(np.asarray(z, dtype=np.float64))))
    return total / math.log(base) if base != math.e else total


def check_contractive(activation, n_samples=100_000, seed=0, scale=10.0):
    """Largest ``|phi'(z)|`` over a seeded sample of ``z`` (expected <= 1)."""
    z = scale * box_muller(make_rng((seed, 7)), n_samples)
    z = np.concatenate([z, [0.0, -0.0, 1e-300, -1e-300]])
    return float(np.max(np.abs(activation.derivative(z))))


def mc_entropy_bound_check(channel, activation, n_samples=100_000, seed=0):
    """Monte Carlo estimate of the post-activation entropy shift.

    Samples ``Z = W x``, averages ``log2|det J_phi(Z)|`` and reports
    ``h(phi(Z)) = h(Z) + correction`` with the standard error of the
    correction. The bound holds when the correction does not exceed
    ``m * sup log2|phi'|`` by more than three standard errors.
    """
    if n_samples < MIN_MC_SAMPLES:
        raise InsufficientSamples(f"{n_samples} samples; at least {MIN_MC_SAMPLES} required")
    sigmas = np.linalg.svd(channel.W, compute_uv=False)
    h_formula = gaussian_output_entropy(sigmas, channel.m, channel.sigma_x)
    try:
        h_det = entropy_via_det(channel)
    except SingularCovariance:
        h_det = float("nan")

    z = channel.sample(n_samples, make_rng(seed))
    per_sample = np.sum(activation.log_abs_derivative(z), axis=1) / math.log(2.0)
    mean = float(np.mean(per_sample))
    se = float(np.std(per_sample, ddof=1) / math.sqrt(n_samples))
    bound = channel.m * activation.sup_log2_derivative
    return EntropyReport(
        h_formula=h_formula,
        h_det=h_det,
        h_mc=h_formula + mean,
        mc_std_err=se,
        n_samples=int(n_samples),
        seed=int(seed),
        correction=mean,
        correction_bound=bound,
        bound_holds=bool(mean <= bound + 3.0 * se),
    )


def gaussian_plugin_entropy(samples, variance):
    """MC estimate ``-mean log2 f(z)`` for isotropic ``N(0, variance I)`` samples.

    Returns ``(estimate, standard_error)``.
    """
    samples = np.atleast_2d(samples)
    m = samples.shape[1]
    nll = 0.5 * m * math.log(2.0 * math.pi * variance) + 0.5 * np.sum(samples**2, axis=1) / variance
    nll = nll / math.log(2.0)
    return float(np.mean(nll)), float(np.std(nll, ddof=1) / math.sqrt(len(nll)))


def scale_shift_check(m, c, n_samples=100_000, seed=0, sigma_x=1.0):
    """Check ``h(cZ) - h(Z) = m log2|c|`` analytically and by Monte Carlo."""
    if c == 0:
        raise DegenerateScale("scale factor must be non-zero")
    if n_samples < MIN_MC_SAMPLES:
        raise InsufficientSamples(f"{n_samples} samples; at least {MIN_MC_SAMPLES} required")
    expected = m * math.log2(abs(c))
    ones = np.ones(m)
    analytic = (gaussian_output_entropy(abs(c) * ones, m, sigma_x)
                - gaussian_output_entropy(ones, m, sigma_x))
    base = sigma_x * box_muller(make_rng((seed, 11)), (n_samples, m))
    scaled = c * sigma_x * box_muller(make_rng((seed, 12)), (n_samples, m))
    h0, se0 = gaussian_plugin_entropy(base, sigma_x**2)
    h1, se1 = gaussian_plugin_entropy(scaled, (c * sigma_x) ** 2)
    mc_shift = h1 - h0
    se = math.hypot(se0, se1)
    analytic_ok = abs(analytic - expected) <= 1e-9
    mc_ok = abs(mc_shift - expected) <= 3.0 * se
    return CheckReport(
        name=f"scale_shift[m={m},c={c:g}]",
        passed=analytic_ok and mc_ok,
        measured={"expected": expected, "analytic": analytic, "mc_shift": mc_shift, "mc_std_err": se},
        tolerance={"analytic_abs": 1e-9, "mc_std_errs": 3.0},
        seed=seed,
    )


def knn_entropy(samples, k=3, base=2.0):
    """Kozachenko-Leonenko k-nearest-neighbour entropy estimate.

    Uses Euclidean distances: ``psi(N) - psi(k) + log V_d + d * mean log eps``
    where ``eps`` is the distance to the k-th neighbour and ``V_d`` the unit
    ball volume. Duplicate points give zero distances and are rejected.
    """
    x = np.asarray(samples, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    n, d = x.shape
    if k >= n:
        raise ValueError("k must be smaller than the number of samples")
    dist, _ = cKDTree(x).query(x, k=k + 1)
    eps = dist[:, k]
    if np.any(eps <= 0):
        raise ValueError("duplicate samples: zero neighbour distance")
    log_unit_ball = 0.5 * d * math.log(math.pi) - gammaln(0.5 * d + 1.0)
    h = digamma(n) - digamma(k) + log_unit_ball + d * float(np.mean(np.log(eps)))
    return float(h) / math.log(base)


def mean_invariance_check(channel, shift, n_samples=100_000, seed=0, tol=1e-9):
    """k-NN entropy of ``W x`` is unchanged when the input mean moves by ``shift``."""
    if n_samples < MIN_MC_SAMPLES:
        raise InsufficientSamples(f"{n_samples} samples; at least {MIN_MC_SAMPLES} required")
    z0 = channel.sample(n_samples, make_rng((seed, 21)))
    z1 = channel.sample(n_samples, make_rng((seed, 21)), mean=shift)
    h0 = knn_entropy(z0)
    h1 = knn_entropy(z1)
    return CheckReport(
        name=f"mean_invariance[m={channel.m},n={channel.n}]",
        passed=abs(h1 - h0) <= tol * max(1.0, abs(h0)),
        measured={"h_centered": h0, "h_shifted": h1},
        tolerance={"relative": tol},
        seed=seed,
    )
