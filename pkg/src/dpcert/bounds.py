"""Approximate max-information bounds for DP-SGD and the Gaussian mechanism.

All quantities are in nats. The one-dimensional infima appearing in the
bounds are located by a dense log-spaced grid scan followed by golden-section
refinement around the best grid point. The reported value is always the
objective evaluated at a feasible point, so it is a valid upper bound even
when the refinement does not reach the exact infimum.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Callable, NamedTuple

import numpy as np

GRID_POINTS = 4096
GOLDEN_ITERATIONS = 60
_INV_PHI = (math.sqrt(5.0) - 1.0) / 2.0
_EPS = float(np.finfo(float).eps)

METHODS = ("optimized", "explicit", "gaussian-single", "pure-dp", "tau-closed-form")


class DomainError(ValueError):
    """Argument outside the region where a bound's formula is defined."""


def _check_beta(beta: float) -> None:
    if not (0.0 < beta < 1.0):
        raise ValueError(f"beta must lie in (0, 1), got {beta}")


@dataclass(frozen=True)
class TrainingRecipe:
    """DP-SGD hyperparameters that enter the max-information bounds.

    ``clip`` may be 0 (zero-sensitivity updates) or ``inf`` (clipping
    disabled), and ``noise`` may be 0; such recipes can be trained but only
    ``clip == 0`` has a finite bound.
    """

    epochs: int
    steps_per_epoch: int
    batch_size: int
    clip: float
    noise: float
    dataset_size: int | None = None

    def __post_init__(self):
        for name in ("epochs", "steps_per_epoch", "batch_size"):
            value = getattr(self, name)
            if int(value) != value or value < 1:
                raise ValueError(f"{name} must be a positive integer, got {value}")
        if not (self.clip >= 0.0):
            raise ValueError(f"clip must be non-negative, got {self.clip}")
        if not (self.noise >= 0.0) or math.isinf(self.noise):
            raise ValueError(f"noise must be finite and non-negative, got {self.noise}")
        if self.dataset_size is not None:
            if self.dataset_size < self.steps_per_epoch * self.batch_size:
                raise ValueError(
                    f"dataset_size={self.dataset_size} is smaller than "
                    f"steps_per_epoch * batch_size = {self.steps_per_epoch * self.batch_size}"
                )

    @property
    def nu(self) -> float:
        return noise_ratio(self.batch_size, self.clip, self.noise)

    def to_dict(self) -> dict:
        return asdict(self)


def noise_ratio(batch_size: int, clip: float, noise: float) -> float:
    """``m * clip**2 / noise**2``; 0 for zero clipping, inf for zero noise."""
    if clip == 0.0:
        return 0.0
    if noise == 0.0 or math.isinf(clip):
        return math.inf
    return batch_size * clip**2 / noise**2


class NoiseRatio(NamedTuple):
    nu: float
    r: float

    @classmethod
    def of(cls, nu: float) -> "NoiseRatio":
        return cls(nu, lambda_domain(nu))


@dataclass(frozen=True)
class MaxInfoBound:
    value: float
    beta: float
    method: str
    recipe: TrainingRecipe | None = None
    minimizer: float | None = None

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}")
        if not (self.value >= 0.0):
            raise ValueError(f"max-information bound must be non-negative, got {self.value}")
        _check_beta(self.beta)

    def to_dict(self) -> dict:
        return {
            "value": self.value,
            "beta": self.beta,
            "method": self.method,
            "minimizer": self.minimizer,
            "recipe": None if self.recipe is None else self.recipe.to_dict(),
        }


# ---------------------------------------------------------------------------
# One-dimensional minimization


def _golden(fun: Callable[[float], float], a: float, b: float, iterations: int):
    c = b - _INV_PHI * (b - a)
    d = a + _INV_PHI * (b - a)
    fc, fd = fun(c), fun(d)
    for _ in range(iterations):
        if fc <= fd:
            b, d, fd = d, c, fc
            c = b - _INV_PHI * (b - a)
            fc = fun(c)
        else:
            a, c, fc = c, d, fd
            d = a + _INV_PHI * (b - a)
            fd = fun(d)
    return (c, fc) if fc <= fd else (d, fd)


def minimize_log_grid(objective, lo: float, hi: float, points: int = GRID_POINTS,
                      iterations: int = GOLDEN_ITERATIONS) -> tuple[float, float]:
    """Minimize ``objective`` over ``[lo, hi]`` (both > 0).

    ``objective`` must accept numpy arrays and return ``inf`` where
    infeasible. Scans ``points`` log-spaced abscissae, then runs golden-section
    search in log coordinates on the bracket formed by the best point's grid
    neighbours. Returns ``(argmin, min)``; never worse than the grid minimum.
    """
    t = np.linspace(math.log(lo), math.log(hi), points)
    x = np.exp(t)
    x[0], x[-1] = lo, hi
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        values = np.asarray(objective(x), dtype=float)
    values = np.where(np.isnan(values), np.inf, values)
    i = int(np.argmin(values))
    best_x, best_f = float(x[i]), float(values[i])
    if not math.isfinite(best_f):
        raise DomainError("objective is infeasible on the whole search interval")

    def in_log(s: float) -> float:
        xs = min(max(math.exp(s), lo), hi)
        with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
            v = float(objective(np.array([xs]))[0])
        return v if math.isfinite(v) else math.inf

    a = t[max(i - 1, 0)]
    b = t[min(i + 1, points - 1)]
    s, f = _golden(in_log, a, b, iterations)
    if f < best_f:
        best_x, best_f = min(max(math.exp(s), lo), hi), f
    return best_x, best_f


# ---------------------------------------------------------------------------
# DP-SGD bounds


def bernstein_F(x: float, nu: float) -> float:
    """Exponent of the moment-generating-function bound, ``(16 nu^2 x^2 + nu x) / (1 - 2 nu x)``."""
    if nu < 0 or x < 0:
        raise ValueError(f"need x >= 0 and nu >= 0, got x={x}, nu={nu}")
    if nu == 0.0:
        return 0.0
    denom = 1.0 - 2.0 * nu * x
    if denom <= 0.0:
        raise DomainError(f"x={x} outside [0, 1/(2 nu)) for nu={nu}")
    return (16.0 * nu * nu * x * x + nu * x) / denom


def _F_vec(x: np.ndarray, nu: float) -> np.ndarray:
    denom = 1.0 - 2.0 * nu * x
    out = (16.0 * nu * nu * x * x + nu * x) / np.where(denom > 0, denom, 1.0)
    return np.where(denom > 0, out, np.inf)


def lambda_domain(nu: float) -> float:
    """Right end ``r = sqrt(1/nu + 1/4) - 1/2`` of the admissible lambda interval."""
    if not (nu > 0.0) or math.isinf(nu):
        raise ValueError(f"nu must be positive and finite, got {nu}")
    # (1/nu) / (sqrt(1/nu + 1/4) + 1/2) avoids cancellation for large nu
    inv = 1.0 / nu
    return inv / (math.sqrt(inv + 0.25) + 0.5)


def _chernoff_objective(steps: int, nu: float, log_term: float):
    def objective(lam):
        return (steps * _F_vec((lam + lam * lam) / 2.0, nu) + log_term) / lam

    return objective


def _tau_tight(steps: int, nu: float, log_term: float) -> tuple[float, float]:
    r = lambda_domain(nu)
    return minimize_log_grid(_chernoff_objective(steps, nu, log_term), _EPS * r, (1.0 - 1e-9) * r)


def tau_tight(steps: int, nu: float, beta: float) -> tuple[float, float]:
    """Grid-minimized ``inf_lambda (T F((lambda+lambda^2)/2) + log(1/beta)) / lambda``.

    Returns ``(value, lambda*)``; ``(0, nan)`` when ``nu == 0``.
    """
    _check_beta(beta)
    if nu == 0.0:
        return 0.0, math.nan
    lam, value = _tau_tight(steps, nu, -math.log(beta))
    return value, lam


def _require_finite_nu(recipe: TrainingRecipe) -> float:
    nu = recipe.nu
    if math.isinf(nu):
        raise ValueError("bounds need finite clip and positive noise (nu is infinite)")
    return nu


def maxinfo_dpsgd_optimized(recipe: TrainingRecipe, beta: float) -> MaxInfoBound:
    """Tightest DP-SGD bound: ``E T nu / 2 + E inf_lambda (T F(.) + log(E/beta)) / lambda``."""
    _check_beta(beta)
    nu = _require_finite_nu(recipe)
    if nu == 0.0:
        return MaxInfoBound(0.0, beta, "optimized", recipe, None)
    E, T = recipe.epochs, recipe.steps_per_epoch
    lam, tau = _tau_tight(T, nu, math.log(E / beta))
    value = 0.5 * E * T * nu + E * tau
    return MaxInfoBound(value, beta, "optimized", recipe, lam)


def maxinfo_dpsgd_explicit(recipe: TrainingRecipe, beta: float) -> MaxInfoBound:
    _check_beta(beta)
    E, T, m = recipe.epochs, recipe.steps_per_epoch, recipe.batch_size
    if E / beta <= 1.0:
        raise ValueError(f"need E / beta > 1, got E={E}, beta={beta}")
    nu = _require_finite_nu(recipe)
    if nu == 0.0:
        return MaxInfoBound(0.0, beta, "explicit", recipe, None)
    q = math.sqrt(2.0 / T * math.log(E / beta))
    snr = recipe.clip / recipe.noise
    value = (E * T * m * snr**2 * (1.0 + 3.0 * q + 0.5 * q * q)
             + E * T * math.sqrt(m) * snr * (0.5 + 3.0 * q + 0.5 * q * q))
    return MaxInfoBound(value, beta, "explicit", recipe, None)


def tau_closed_form(steps: int, nu: float, beta: float) -> float:
    """Closed-form upper bound ``T (nu + min(1, sqrt nu)) (1/2 + 3q + q^2/2)``."""
    _check_beta(beta)
    if steps < 1 or nu < 0:
        raise ValueError(f"need steps >= 1 and nu >= 0, got {steps}, {nu}")
    q = math.sqrt(2.0 / steps * math.log(1.0 / beta))
    return steps * (nu + min(1.0, math.sqrt(nu))) * (0.5 + 3.0 * q + 0.5 * q * q)


def tau_u_objective(u, log_rate):
    """``G(u) = -4 + 9 / (2 (1-u)) + L / u`` on ``u in (0, 1)``."""
    u = np.asarray(u, dtype=float)
    return -4.0 + 9.0 / (2.0 * (1.0 - u)) + log_rate / u


def tau_u_minimizer(log_rate: float) -> float:
    """Interior minimizer ``sqrt(2L) / (3 + sqrt(2L))`` of :func:`tau_u_objective`."""
    root = math.sqrt(2.0 * log_rate)
    return root / (3.0 + root)


def tau_u_bound(steps: int, nu: float, beta: float) -> float:
    """Intermediate bound ``T nu (1 + r_nu) inf_u G(u)``, with the infimum in closed form."""
    _check_beta(beta)
    if nu == 0.0:
        return 0.0
    L = math.log(1.0 / beta) / steps
    return steps * nu * (1.0 + lambda_domain(nu)) * (0.5 + 3.0 * math.sqrt(2.0 * L) + L)


# ---------------------------------------------------------------------------
# Single Gaussian mechanism and the pure-DP comparator


def _gaussian_objective(quad: float, lin: float, beta: float):
    log_beta = math.log(beta)

    def objective(alpha):
        q2 = np.log1p(alpha / 2.0) - log_beta
        slack = np.log(1.0 / alpha + 0.5) - log_beta  # q^2 - log(alpha), cancellation-free
        q = np.sqrt(q2)
        val = quad * (0.75 + 0.5 * q + 0.25 * q2) + lin * (1.0 + q) * np.sqrt(np.maximum(slack, 0.0))
        return np.where(slack >= 0.0, val, np.inf)

    return objective


def gaussian_alpha_range(beta: float) -> tuple[float, float]:
    hi = 1e30
    if beta > 0.5:
        hi = min(hi, 1.0 / (beta - 0.5))
    return 1e-30, hi


def maxinfo_gaussian_mechanism(m: int, sensitivity: float, noise: float, beta: float) -> MaxInfoBound:
    """Max-information of one release ``Psi(S) + noise * Z`` over ``m`` independent samples.

    ``sensitivity`` is the bounded-difference constant of ``Psi``. The
    balancing parameter alpha is optimized over its feasible set.
    """
    _check_beta(beta)
    if m < 1 or not (sensitivity > 0.0) or not (noise > 0.0):
        raise ValueError("need m >= 1, sensitivity > 0, noise > 0")
    quad = m * sensitivity**2 / noise**2
    lin = math.sqrt(m) * sensitivity / noise
    lo, hi = gaussian_alpha_range(beta)
    alpha, value = minimize_log_grid(_gaussian_objective(quad, lin, beta), lo, hi)
    return MaxInfoBound(value, beta, "gaussian-single", None, alpha)


def gaussian_mechanism_objective(alpha, m: int, sensitivity: float, noise: float, beta: float):
    """The bracketed expression minimized by :func:`maxinfo_gaussian_mechanism` (vectorized)."""
    quad = m * sensitivity**2 / noise**2
    lin = math.sqrt(m) * sensitivity / noise
    with np.errstate(divide="ignore", invalid="ignore"):
        return _gaussian_objective(quad, lin, beta)(np.asarray(alpha, dtype=float))


def maxinfo_pure_dp(n: int, epsilon: float, beta: float) -> MaxInfoBound:
    """Max-information of an ``epsilon``-DP algorithm on ``n`` samples."""
    _check_beta(beta)
    if n < 1 or epsilon < 0:
        raise ValueError(f"need n >= 1 and epsilon >= 0, got {n}, {epsilon}")
    value = 0.5 * n * epsilon**2 + epsilon * math.sqrt(n / 2.0 * math.log(2.0 / beta))
    return MaxInfoBound(value, beta, "pure-dp", None, None)


def gaussian_sigma_for_dp(sensitivity: float, epsilon: float, delta: float) -> float:
    """Smallest noise scale of the classic (epsilon, delta) Gaussian-mechanism calibration."""
    if not (0.0 < epsilon < 1.0):
        raise ValueError(f"epsilon must lie in (0, 1), got {epsilon}")
    if not (0.0 < delta < 1.0):
        raise ValueError(f"delta must lie in (0, 1), got {delta}")
    if not (sensitivity > 0.0):
        raise ValueError(f"sensitivity must be positive, got {sensitivity}")
    return sensitivity / epsilon * math.sqrt(2.0 * math.log(1.25 / delta))


def ratio_R(alpha: float, beta: float) -> float:
    """Ratio of the quadratic-term coefficients of the Gaussian-mechanism bound and
    the pure-DP bound at the calibrated epsilon with ``delta = beta``."""
    if not (0.0 < alpha <= 3.0):
        raise ValueError(f"alpha must lie in (0, 3], got {alpha}")
    if not (0.0 < beta <= 0.5):
        raise ValueError(f"beta must lie in (0, 1/2], got {beta}")
    L = math.log1p(alpha / 2.0) - math.log(beta)
    return (0.75 + 0.5 * math.sqrt(L) + 0.25 * L) / (math.log(1.25) - math.log(beta))


def ratio_slope_numerator(a: float, b: float) -> float:
    """Numerator of d/db of the ratio in ``a = log(1 + alpha/2)``, ``b = log(1/beta)``.

    Negative values mean the ratio decreases in ``b`` (increases in beta).
    """
    s = math.sqrt(a + b)
    return (1.0 / s + 1.0) * (math.log(1.25) + b) - (3.0 + 2.0 * s + a + b)
