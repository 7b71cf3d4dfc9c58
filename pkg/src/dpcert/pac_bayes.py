"""Binary-kl arithmetic, diagonal-Gaussian KL and PAC-Bayes certificate right-hand sides."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .bounds import MaxInfoBound

KL_INV_TOL = 1e-10
KL_INV_MAX_ITER = 200
_P_CEIL = 1.0 - 1e-12
ROUND_UP_GRANULARITY = 1e-9


def _h(x: float) -> float:
    # x - log(1 + x) >= 0, with a series near 0 where the subtraction cancels
    if abs(x) < 1e-3:
        return x * x * (0.5 - x * (1.0 / 3.0 - x * (0.25 - x * (0.2 - x / 6.0))))
    return x - math.log1p(x)


def binary_kl(q: float, p: float) -> float:
    """``kl(q || p)`` between Bernoulli(q) and Bernoulli(p).

    Written as ``q h(d/q) + (1-q) h(-d/(1-q))`` with ``d = p - q`` and
    ``h(x) = x - log1p(x)``: the first-order terms cancel analytically, so
    the result keeps full relative accuracy when ``p`` is close to ``q``.
    """
    if not (0.0 <= q <= 1.0) or not (0.0 <= p <= 1.0):
        raise ValueError(f"need q, p in [0, 1], got q={q}, p={p}")
    if q == p:
        return 0.0
    if (p == 0.0 and q > 0.0) or (p == 1.0 and q < 1.0):
        return math.inf
    if q == 0.0:
        return -math.log1p(-p)
    if q == 1.0:
        return -math.log(p)
    d = p - q
    return max(q * _h(d / q) + (1.0 - q) * _h(-d / (1.0 - q)), 0.0)


def kl_inverse(q: float, budget: float) -> float:
    """Largest ``p in [q, 1]`` with ``kl(q || p) <= budget``.

    Bisection keeps the lower end feasible, so the result always satisfies
    the constraint. It stops once the bracket is narrower than 1e-10 *and*
    the constraint is tight to 1e-10, or the bracket hits float resolution.
    """
    if not (0.0 <= q <= 1.0):
        raise ValueError(f"q must lie in [0, 1], got {q}")
    if not (budget >= 0.0):
        raise ValueError(f"budget must be non-negative, got {budget}")
    if budget == 0.0 or q == 1.0:
        return q
    if budget >= binary_kl(q, max(q, _P_CEIL)):
        return 1.0
    lo, hi = q, _P_CEIL
    for _ in range(KL_INV_MAX_ITER):
        mid = 0.5 * (lo + hi)
        if mid <= lo or mid >= hi:
            break
        if binary_kl(q, mid) <= budget:
            lo = mid
        else:
            hi = mid
        if hi - lo <= KL_INV_TOL and budget - binary_kl(q, lo) <= KL_INV_TOL:
            break
    return lo


def pinsker_gap(q: float, budget: float) -> float:
    """``min(1, q + sqrt(budget / 2))``: the relaxed, always-larger counterpart of :func:`kl_inverse`."""
    if not (0.0 <= q <= 1.0) or budget < 0.0:
        raise ValueError(f"need q in [0, 1] and budget >= 0, got {q}, {budget}")
    return min(1.0, q + math.sqrt(budget / 2.0))


@dataclass
class StochasticModel:
    """Diagonal Gaussian over parameter vectors."""

    mean: np.ndarray
    variance: np.ndarray

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=float).ravel()
        variance = np.asarray(self.variance, dtype=float)
        if variance.ndim == 0:
            variance = np.full_like(self.mean, float(variance))
        self.variance = variance.ravel()
        if self.mean.shape != self.variance.shape:
            raise ValueError(f"mean has {self.mean.size} entries but variance has {self.variance.size}")
        if not np.all(self.variance > 0) or not np.all(np.isfinite(self.variance)):
            raise ValueError("variance must be positive and finite in every coordinate")

    @classmethod
    def isotropic(cls, mean, tau: float) -> "StochasticModel":
        mean = np.asarray(mean, dtype=float)
        return cls(mean, np.full(mean.size, float(tau)))

    @property
    def dim(self) -> int:
        return self.mean.size

    def sample(self, rng: np.random.Generator, size: int) -> np.ndarray:
        return self.mean + np.sqrt(self.variance) * rng.standard_normal((size, self.dim))


def gaussian_kl(posterior: StochasticModel, prior: StochasticModel) -> float:
    """``KL(posterior || prior)`` for diagonal Gaussians."""
    if posterior.dim != prior.dim:
        raise ValueError(f"dimension mismatch: {posterior.dim} vs {prior.dim}")
    vr, vp = posterior.variance, prior.variance
    diff = posterior.mean - prior.mean
    terms = vr / vp + diff * diff / vp - 1.0 + np.log(vp) - np.log(vr)
    return max(0.5 * float(np.sum(terms)), 0.0)


class RiskEstimate(NamedTuple):
    value: float
    num_samples: int
    kind: str = "monte-carlo"  # or "exact"


class ConfidenceSplit(NamedTuple):
    delta: float
    delta_prime: float
    beta: float

    def validate(self) -> None:
        for name, v in zip(self._fields, self):
            if not (0.0 < v < 1.0):
                raise ValueError(f"{name} must lie in (0, 1), got {v}")
        if self.delta + self.delta_prime >= 1.0:
            raise ValueError("delta + delta_prime must be < 1")
        if self.slack <= 0.0:
            raise ValueError(
                f"delta - delta_prime - beta must be positive, got {self.slack:.6g}"
            )

    @property
    def slack(self) -> float:
        return self.delta - self.delta_prime - self.beta


def round_up(x: float, granularity: float = ROUND_UP_GRANULARITY) -> float:
    """Round ``x`` up to a multiple of ``granularity`` (never below ``x``), capped at 1."""
    y = math.ceil(x / granularity) * granularity
    if y < x:
        y = math.nextafter(y, math.inf)
    return min(y, 1.0)


def pac_bayes_rhs(kl_divergence: float, kappa: float, n: int, delta: float) -> float:
    """``(KL + kappa + log(4 sqrt(n) / delta)) / n``: the kl budget with a DP-SGD-trained prior."""
    if kl_divergence < 0 or kappa < 0 or n < 1 or not (0.0 < delta <= 1.0):
        raise ValueError("need kl >= 0, kappa >= 0, n >= 1, delta in (0, 1]")
    return (kl_divergence + kappa + math.log(4.0 * math.sqrt(n) / delta)) / n


def mc_erisk_upper(mean_risk: float, num_samples: int, delta_prime: float) -> float:
    """High-probability upper bound on the expected empirical risk from ``num_samples`` draws."""
    if not (0.0 <= mean_risk <= 1.0) or num_samples < 1 or not (0.0 < delta_prime < 1.0):
        raise ValueError("need mean_risk in [0, 1], num_samples >= 1, delta_prime in (0, 1)")
    budget = math.log(2.0 * math.sqrt(num_samples) / delta_prime) / num_samples
    return kl_inverse(mean_risk, budget)


@dataclass
class RiskCertificate:
    empirical_risk: float
    empirical_risk_upper: float
    kl_divergence: float
    kappa: MaxInfoBound | None
    n: int
    confidence_split: ConfidenceSplit
    grid_sizes: tuple[int, int]
    budget: float
    risk_upper_bound: float
    num_samples: int = 0
    notes: dict = field(default_factory=dict)

    @property
    def kappa_value(self) -> float:
        return 0.0 if self.kappa is None else self.kappa.value

    @property
    def failure_probability(self) -> float:
        return self.confidence_split.delta + self.confidence_split.delta_prime

    def to_dict(self) -> dict:
        return {
            "empirical_risk": self.empirical_risk,
            "empirical_risk_upper": self.empirical_risk_upper,
            "kl_divergence": self.kl_divergence,
            "kappa": None if self.kappa is None else self.kappa.to_dict(),
            "n": self.n,
            "confidence_split": self.confidence_split._asdict(),
            "failure_probability": self.failure_probability,
            "grid_sizes": list(self.grid_sizes),
            "kl_budget": self.budget,
            "num_samples": self.num_samples,
            "risk_upper_bound": self.risk_upper_bound,
        }


def union_bound_certificate(erisk: RiskEstimate, kl_divergence: float, kappa: MaxInfoBound | None,
                            n: int, split: ConfidenceSplit, grid: tuple[int, int]) -> RiskCertificate:
    """Risk certificate valid simultaneously for a ``K1 x K2`` grid of priors.

    ``kappa`` must have been computed at failure budget ``beta / K1`` (``None``
    stands for a data-independent prior). An ``exact`` risk estimate is used
    as is; a Monte-Carlo one is first inflated with :func:`mc_erisk_upper`.
    """
    split = ConfidenceSplit(*split)
    split.validate()
    k1, k2 = grid
    if k1 < 1 or k2 < 1:
        raise ValueError(f"grid sizes must be positive, got {grid}")
    if kl_divergence < 0:
        raise ValueError(f"kl_divergence must be non-negative, got {kl_divergence}")
    if kappa is not None and not math.isclose(kappa.beta, split.beta / k1, rel_tol=1e-12):
        raise ValueError(
            f"kappa was computed at beta={kappa.beta}, expected beta/K1={split.beta / k1}"
        )
    if erisk.kind == "exact":
        upper = erisk.value
    else:
        upper = mc_erisk_upper(erisk.value, erisk.num_samples, split.delta_prime)
    kappa_value = 0.0 if kappa is None else kappa.value
    budget = (kl_divergence + kappa_value
              + math.log(2.0 * k1 * k2 * math.sqrt(n) / split.slack)) / n
    bound = round_up(kl_inverse(upper, budget))
    return RiskCertificate(
        empirical_risk=erisk.value,
        empirical_risk_upper=upper,
        kl_divergence=kl_divergence,
        kappa=kappa,
        n=n,
        confidence_split=split,
        grid_sizes=(k1, k2),
        budget=budget,
        risk_upper_bound=max(bound, upper),
        num_samples=erisk.num_samples,
    )
