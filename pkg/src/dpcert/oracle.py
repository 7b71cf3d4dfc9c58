"""Exact-enumeration check of max-information tail bounds on tiny data domains.

For a finite domain the density ratio ``f(S, Y) = log p(Y|S) / p(Y)`` can be
computed exactly: ``p(Y)`` is a finite mixture over every dataset the
sampling distribution can produce. Sampling ``(S, Y)`` from the real joint
process and counting how often ``f`` exceeds a proposed bound ``kappa`` then
checks ``P{f > kappa} <= beta`` directly.

Two mechanisms are supported:

``single_shot``
    one Gaussian release ``Y = sum_i phi(x_i) + sigma Z`` over all ``n`` samples.
``dpsgd_chain``
    DP-SGD with plain updates on a parameter of dimension ``d``. The output
    is the extended one: initial parameters, batch plans and every update
    vector. Plans and ``theta0`` do not depend on the data, so their
    probabilities cancel in ``f`` and only the update densities remain.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.special import logsumexp

from . import rng as rngmod
from .bounds import (MaxInfoBound, TrainingRecipe, maxinfo_dpsgd_explicit,
                     maxinfo_dpsgd_optimized, maxinfo_gaussian_mechanism)

MAX_DATASETS = 2**20
MECHANISMS = ("single_shot", "dpsgd_chain")
EXCEEDANCE_TOL = 1e-9
_CHUNK_ELEMENTS = 2**22

Statistic = Callable[[np.ndarray, np.ndarray, float], np.ndarray]


def _identity(values, theta, clip):
    return np.broadcast_to(values[None], (theta.shape[0], *values.shape))


def _zero(values, theta, clip):
    return np.zeros((theta.shape[0], values.shape[0], theta.shape[1]))


def _clipped_residual(values, theta, clip):
    # gradient of (theta - x)^2 / 2, norm-clipped to `clip`
    g = theta[:, None, :] - values[None, :, :]
    norms = np.linalg.norm(g, axis=-1, keepdims=True)
    return g * np.minimum(1.0, clip / np.where(norms > 0, norms, 1.0))


STATISTICS: dict[str, Statistic] = {
    "identity": _identity,
    "zero": _zero,
    "clipped_residual": _clipped_residual,
}


@dataclass
class TinyInstance:
    """A finite data domain, its sampling law, and the statistic a mechanism releases.

    ``statistic(values, theta, clip)`` maps the ``(k, dx)`` domain values and a
    ``(N, d)`` batch of parameters to ``(N, k, d)`` per-sample contributions.
    """

    domain: np.ndarray
    probabilities: np.ndarray
    n: int
    noise: float
    mechanism: str = "single_shot"
    statistic: str = "identity"
    clip: float | None = None
    steps: int = 1
    batch_size: int | None = None
    epochs: int = 1
    learning_rate: float = 0.1
    theta0: np.ndarray | None = None
    name: str = ""

    def __post_init__(self):
        self.domain = np.asarray(self.domain, dtype=float)
        if self.domain.ndim == 1:
            self.domain = self.domain[:, None]
        self.probabilities = np.asarray(self.probabilities, dtype=float)
        k = self.domain.shape[0]
        if self.probabilities.shape != (k,):
            raise ValueError(f"need {k} probabilities, got {self.probabilities.shape}")
        if np.any(self.probabilities < 0) or not math.isclose(self.probabilities.sum(), 1.0, abs_tol=1e-12):
            raise ValueError("probabilities must be non-negative and sum to 1")
        if self.mechanism not in MECHANISMS:
            raise ValueError(f"unknown mechanism {self.mechanism!r}")
        if self.statistic not in STATISTICS:
            raise ValueError(f"unknown statistic {self.statistic!r}")
        if self.n < 1 or not (self.noise > 0):
            raise ValueError("need n >= 1 and noise > 0")
        if float(k) ** self.n > MAX_DATASETS:
            raise ValueError(f"enumeration infeasible: {k}^{self.n} datasets exceeds {MAX_DATASETS}")
        if self.mechanism == "single_shot":
            self.steps, self.epochs, self.batch_size = 1, 1, self.n
        elif self.batch_size is None:
            self.batch_size = self.n // self.steps
        if self.batch_size < 1 or self.steps * self.batch_size > self.n:
            raise ValueError("need 1 <= steps * batch_size <= n")
        d = self.dim
        self.theta0 = (np.zeros(d) if self.theta0 is None
                       else np.asarray(self.theta0, dtype=float).reshape(d))
        if self.clip is None:
            self.clip = float(np.linalg.norm(self.phi(self.theta0[None])[0], axis=-1).max())
        self._datasets = None

    @property
    def dim(self) -> int:
        return self.domain.shape[1]

    @property
    def num_datasets(self) -> int:
        return self.domain.shape[0] ** self.n

    def phi(self, theta: np.ndarray) -> np.ndarray:
        return STATISTICS[self.statistic](self.domain, theta, self.clip)

    def datasets(self) -> tuple[np.ndarray, np.ndarray]:
        """All datasets as ``(K, n)`` domain indices and their log-probabilities."""
        if self._datasets is None:
            k = self.domain.shape[0]
            idx = np.indices((k,) * self.n).reshape(self.n, -1).T
            with np.errstate(divide="ignore"):
                logp = np.log(self.probabilities)[idx].sum(axis=1)
            keep = np.isfinite(logp)
            self._datasets = (idx[keep], logp[keep])
        return self._datasets

    def sensitivity(self) -> float:
        """Exact bounded-difference constant ``max ||phi(x) - phi(x')||`` at ``theta0``."""
        phi = self.phi(self.theta0[None])[0]
        diffs = phi[:, None, :] - phi[None, :, :]
        return float(np.linalg.norm(diffs, axis=-1).max())

    def recipe(self) -> TrainingRecipe:
        return TrainingRecipe(self.epochs, self.steps, self.batch_size, self.clip, self.noise, self.n)

    def to_dict(self) -> dict:
        return {
            "name": self.name, "mechanism": self.mechanism, "statistic": self.statistic,
            "domain": self.domain.tolist(), "probabilities": self.probabilities.tolist(),
            "n": self.n, "noise": self.noise, "clip": self.clip, "steps": self.steps,
            "batch_size": self.batch_size, "epochs": self.epochs,
            "learning_rate": self.learning_rate, "theta0": self.theta0.tolist(),
        }


@dataclass
class ChainOutput:
    """Extended DP-SGD output: batch plans ``(E, T, m)`` and updates ``(E*T, d)``."""

    plans: np.ndarray
    updates: np.ndarray


def _gauss_loglik(u: np.ndarray, mean: np.ndarray, noise: float) -> np.ndarray:
    d = u.shape[-1]
    sq = np.sum((u - mean) ** 2, axis=-1)
    return -sq / (2.0 * noise**2) - 0.5 * d * math.log(2.0 * math.pi * noise**2)


def exact_log_marginal_density(instance: TinyInstance, y) -> float:
    """``log p(y)`` by summing over every dataset (log-sum-exp over the mixture).

    For ``single_shot`` ``y`` is the release vector. For ``dpsgd_chain`` it is
    a :class:`ChainOutput`; the value returned is the density of the update
    vectors given ``theta0`` and the plans.
    """
    D, logp = instance.datasets()
    if instance.mechanism == "single_shot":
        y = np.asarray(y, dtype=float).reshape(instance.dim)
        psi = instance.phi(instance.theta0[None])[0][D].sum(axis=1)
        return float(logsumexp(logp + _gauss_loglik(y[None], psi, instance.noise)))
    if not isinstance(y, ChainOutput):
        raise TypeError("dpsgd_chain densities need a ChainOutput")
    theta = instance.theta0[None].copy()
    total = logp.copy()
    k = 0
    for plan in y.plans:
        for I in plan:
            phi = instance.phi(theta)[0]
            psi = phi[D[:, I]].sum(axis=1)
            u = y.updates[k]
            total += _gauss_loglik(u[None], psi, instance.noise)
            theta = theta - instance.learning_rate * u
            k += 1
    return float(logsumexp(total))


def exact_marginal_density(instance: TinyInstance, y) -> float:
    return math.exp(exact_log_marginal_density(instance, y))


def _sample_single_shot(instance: TinyInstance, gen: np.random.Generator, trials: int) -> np.ndarray:
    D, logp = instance.datasets()
    phi = instance.phi(instance.theta0[None])[0]
    psi_all = phi[D].sum(axis=1)  # (K, d)
    S = gen.choice(instance.domain.shape[0], size=(trials, instance.n), p=instance.probabilities)
    psi = phi[S].sum(axis=1)
    y = psi + instance.noise * gen.standard_normal((trials, instance.dim))
    ll_true = _gauss_loglik(y, psi, instance.noise)
    ll_all = _gauss_loglik(y[:, None, :], psi_all[None], instance.noise)
    return ll_true - logsumexp(logp[None] + ll_all, axis=1)


def _sample_chain(instance: TinyInstance, gen: np.random.Generator, trials: int) -> np.ndarray:
    D, logp = instance.datasets()
    n, m, T = instance.n, instance.batch_size, instance.steps
    rows = np.arange(trials)
    S = gen.choice(instance.domain.shape[0], size=(trials, n), p=instance.probabilities)
    theta = np.broadcast_to(instance.theta0, (trials, instance.dim)).copy()
    ll_true = np.zeros(trials)
    ll_all = np.zeros((trials, D.shape[0]))
    limit = instance.clip * (1.0 + 1e-12)
    for _ in range(instance.epochs):
        perms = gen.permuted(np.tile(np.arange(n), (trials, 1)), axis=1)
        plans = perms[:, : T * m].reshape(trials, T, m)
        for t in range(T):
            phi = instance.phi(theta)  # (N, k, d)
            if np.linalg.norm(phi, axis=-1).max() > limit:
                raise ValueError("statistic exceeds its declared clip bound at a visited theta")
            I = plans[:, t]  # (N, m)
            psi = np.take_along_axis(phi, S[rows[:, None], I][..., None], axis=1).sum(axis=1)
            u = psi + instance.noise * gen.standard_normal(psi.shape)
            cand = D[:, I].transpose(1, 0, 2)  # (N, K, m)
            psi_all = phi[rows[:, None, None], cand].sum(axis=2)  # (N, K, d)
            ll_true += _gauss_loglik(u, psi, instance.noise)
            ll_all += _gauss_loglik(u[:, None, :], psi_all, instance.noise)
            theta = theta - instance.learning_rate * u
    return ll_true - logsumexp(logp[None] + ll_all, axis=1)


def sample_f(instance: TinyInstance, trials: int, seed: int, workers: int = 1) -> np.ndarray:
    """Exact ``f(S, Y)`` for ``trials`` independent draws of ``(S, Y)``.

    Trials are processed in fixed-size chunks with their own substreams, so
    the result is independent of ``workers``.
    """
    if trials < 1:
        raise ValueError(f"trials must be >= 1, got {trials}")
    per_trial = instance.num_datasets * instance.batch_size * instance.dim
    chunk = max(1, _CHUNK_ELEMENTS // per_trial)
    sampler = _sample_single_shot if instance.mechanism == "single_shot" else _sample_chain

    def run(start: int) -> np.ndarray:
        gen = rngmod.generator(seed, "oracle", start // chunk)
        return sampler(instance, gen, min(chunk, trials - start))

    starts = range(0, trials, chunk)
    if workers > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(run, starts))
    else:
        parts = [run(s) for s in starts]
    return np.concatenate(parts)


@dataclass(frozen=True)
class TailEstimate:
    probability: float
    radius: float
    trials: int


def tail_probability(f: np.ndarray, threshold: float) -> TailEstimate:
    """Fraction of ``f`` strictly above ``threshold`` (plus 1e-9 float slack) and its 3-sigma radius."""
    exceed = f > threshold + EXCEEDANCE_TOL * max(1.0, abs(threshold)) if math.isfinite(threshold) else f > threshold
    p = float(np.mean(exceed))
    return TailEstimate(p, 3.0 * math.sqrt(p * (1.0 - p) / f.size), int(f.size))


def sample_f_tail(instance: TinyInstance, trials: int, threshold: float, seed: int,
                  workers: int = 1) -> TailEstimate:
    return tail_probability(sample_f(instance, trials, seed, workers), threshold)


def kappa_for(instance: TinyInstance, method: str, beta: float) -> MaxInfoBound:
    """The analytic bound matched to ``instance``.

    ``gaussian`` uses the single-release bound with the instance's exact
    bounded-difference constant and ``m = n``; ``optimized`` / ``explicit``
    use the DP-SGD bounds with ``clip`` as the per-sample norm bound.
    """
    if method == "gaussian":
        if instance.mechanism != "single_shot":
            raise ValueError("the single-release bound only applies to single_shot instances")
        s = instance.sensitivity()
        if s == 0.0:
            return MaxInfoBound(0.0, beta, "gaussian-single", None, None)
        return maxinfo_gaussian_mechanism(instance.n, s, instance.noise, beta)
    if method == "optimized":
        return maxinfo_dpsgd_optimized(instance.recipe(), beta)
    if method == "explicit":
        return maxinfo_dpsgd_explicit(instance.recipe(), beta)
    raise ValueError(f"unknown bound method {method!r}")


@dataclass
class OracleReport:
    name: str
    method: str
    beta: float
    kappa: float
    threshold: float
    tails: list[TailEstimate] = field(default_factory=list)
    log_mean_exp_f: float = math.nan

    @property
    def passed(self) -> bool:
        return all(t.probability <= self.beta + t.radius for t in self.tails)

    def to_dict(self) -> dict:
        return {
            "name": self.name, "method": self.method, "beta": self.beta,
            "kappa": self.kappa, "threshold": self.threshold, "passed": self.passed,
            "max_tail": max(t.probability for t in self.tails),
            "tails": [{"probability": t.probability, "radius": t.radius, "trials": t.trials}
                      for t in self.tails],
            "log_mean_exp_f": self.log_mean_exp_f,
        }


def validate_bound(instance: TinyInstance, method: str, beta: float, trials: int, seed: int,
                   repetitions: int = 1, threshold_scale: float = 1.0, workers: int = 1) -> OracleReport:
    """Check ``P{f > threshold_scale * kappa} <= beta + radius`` in each of ``repetitions`` seeded runs."""
    kappa = kappa_for(instance, method, beta)
    threshold = threshold_scale * kappa.value
    report = OracleReport(instance.name, method, beta, kappa.value, threshold)
    all_f = []
    for rep in range(repetitions):
        f = sample_f(instance, trials, rngmod.derive_seed(seed, "repetition", rep), workers)
        report.tails.append(tail_probability(f, threshold))
        all_f.append(f)
    f = np.concatenate(all_f)
    report.log_mean_exp_f = float(logsumexp(f) - math.log(f.size))
    return report
