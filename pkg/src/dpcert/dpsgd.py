"""DP-SGD: per-sample clipping, fixed-size disjoint batches, Gaussian noise on the batch sum.

The trainer is deterministic given its seed. Shuffling and noise use
separate labelled substreams of that seed (see :mod:`dpcert.rng`).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Iterator, Sequence

import numpy as np

from . import rng as rngmod
from .bounds import TrainingRecipe

RULES = ("plain", "momentum_wd", "adam_like")

LossGradient = Callable[[np.ndarray, object], np.ndarray]


class TrainingDivergedError(FloatingPointError):
    pass


def clip(g: np.ndarray, threshold: float) -> np.ndarray:
    """Rescale ``g`` to norm at most ``threshold``: ``g * min(1, threshold / ||g||)``."""
    g = np.asarray(g, dtype=float)
    if not np.all(np.isfinite(g)):
        raise ValueError("gradient has non-finite components")
    if threshold < 0:
        raise ValueError(f"clip threshold must be non-negative, got {threshold}")
    return clip_rows(g[None, :], threshold)[0]


def clip_rows(G: np.ndarray, threshold: float) -> np.ndarray:
    """Row-wise :func:`clip` of a ``(m, d)`` array."""
    if math.isinf(threshold):
        return G.copy()
    norms = np.linalg.norm(G, axis=1, keepdims=True)
    # aim a few ulps inside the threshold so that every way of computing the
    # norm (dot product, sum of squares, BLAS nrm2) stays at or below it
    target = threshold * (1.0 - 8.0 * np.finfo(float).eps)
    with np.errstate(divide="ignore", invalid="ignore"):
        scale = np.where(norms > threshold, target / norms, 1.0)
    out = G * scale
    shrink = 1.0
    over = np.linalg.norm(out, axis=1) > threshold
    while np.any(over):
        shrink = np.nextafter(shrink, 0.0)
        out[over] = G[over] * (scale[over] * shrink)
        over = np.linalg.norm(out, axis=1) > threshold
    return out


@dataclass(frozen=True)
class BatchPlan:
    index_sets: np.ndarray  # (T, m)
    epoch_seed: int

    @property
    def steps(self) -> int:
        return self.index_sets.shape[0]

    def is_valid(self, n: int) -> bool:
        flat = self.index_sets.ravel()
        return bool(np.unique(flat).size == flat.size and flat.min() >= 0 and flat.max() < n)


def create_batches(n: int, m: int, steps: int, seed: int) -> BatchPlan:
    """Shuffle ``range(n)`` and cut the first ``steps * m`` indices into consecutive batches."""
    if n < 1 or m < 1 or steps < 1:
        raise ValueError("n, m and steps must be positive")
    if steps * m > n:
        raise ValueError(f"steps * m = {steps * m} exceeds n = {n}")
    perm = rngmod.generator(seed, "batches").permutation(n)
    return BatchPlan(perm[: steps * m].reshape(steps, m), int(seed))


@dataclass(frozen=True)
class UpdateRule:
    """How a privatized update vector moves the parameters.

    ``learning_rates`` is a scalar or one rate per step of an epoch. Only the
    fields relevant to ``kind`` are read.
    """

    kind: str = "plain"
    learning_rates: float | Sequence[float] = 0.1
    momentum: float = 0.9
    weight_decay: float = 0.0
    second_moment: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.kind not in RULES:
            raise ValueError(f"unknown update rule {self.kind!r}")
        rates = np.atleast_1d(np.asarray(self.learning_rates, dtype=float))
        if not np.all(rates > 0):
            raise ValueError("learning rates must be positive")
        if not (0 <= self.momentum < 1 and 0 <= self.weight_decay < 1 and 0 <= self.second_moment < 1):
            raise ValueError("momentum, weight_decay and second_moment must lie in [0, 1)")
        if not (self.eps > 0):
            raise ValueError("eps must be positive")
        if not np.isscalar(self.learning_rates):
            object.__setattr__(self, "learning_rates", tuple(float(r) for r in rates))

    def rate(self, step: int) -> float:
        """Learning rate for 1-based step ``step`` within an epoch."""
        if isinstance(self.learning_rates, tuple):
            return self.learning_rates[step - 1]
        return float(self.learning_rates)

    def to_dict(self) -> dict:
        rates = self.learning_rates
        return {"kind": self.kind, "learning_rates": list(rates) if isinstance(rates, tuple) else rates,
                "momentum": self.momentum, "weight_decay": self.weight_decay,
                "second_moment": self.second_moment, "eps": self.eps}


@dataclass
class RuleState:
    theta: np.ndarray
    m: np.ndarray
    v: np.ndarray

    @classmethod
    def start(cls, theta0: np.ndarray) -> "RuleState":
        theta0 = np.asarray(theta0, dtype=float).copy()
        return cls(theta0, np.zeros_like(theta0), np.zeros_like(theta0))


def gradient_update(rule: UpdateRule, state: RuleState, u: np.ndarray, lr: float, t: int) -> RuleState:
    """Apply one update; ``t`` is the 1-based global step used for bias correction."""
    theta = state.theta
    if rule.kind == "plain":
        return RuleState(theta - lr * u, state.m, state.v)
    if rule.kind == "momentum_wd":
        m = rule.momentum * state.m + (1.0 - rule.momentum) * u
        return RuleState((1.0 - rule.weight_decay) * theta - lr * m, m, state.v)
    b1, b2 = rule.momentum, rule.second_moment
    m = b1 * state.m + (1.0 - b1) * u
    v = b2 * state.v + (1.0 - b2) * u * u
    m_hat = m / (1.0 - b1**t)
    v_hat = v / (1.0 - b2**t)
    return RuleState(theta - lr * m_hat / (np.sqrt(v_hat) + rule.eps), m, v)


@dataclass
class StepRecord:
    epoch: int
    step: int
    theta: np.ndarray
    update: np.ndarray
    noise: np.ndarray
    max_clipped_norm: float


@dataclass
class TrainTrace:
    theta0: np.ndarray
    thetas: np.ndarray
    updates: np.ndarray
    noises: np.ndarray
    max_clipped_norms: np.ndarray
    plans: list[BatchPlan] = field(default_factory=list)
    seed: int = 0

    def __len__(self) -> int:
        return self.thetas.shape[0]

    @property
    def final(self) -> np.ndarray:
        return self.thetas[-1] if len(self) else self.theta0


def _take(data, idx):
    return data[idx]


def dpsgd_stream(data, recipe: TrainingRecipe, rule: UpdateRule, loss_gradient: LossGradient,
                 seed: int, theta0: np.ndarray, plans: list[BatchPlan] | None = None
                 ) -> Iterator[StepRecord]:
    """Run DP-SGD and yield the parameters after every step.

    ``loss_gradient(theta, batch)`` must return per-sample gradients of shape
    ``(m, d)`` for ``batch = data[index_set]``. If ``plans`` is a list, each
    epoch's :class:`BatchPlan` is appended to it.
    """
    n = len(data)
    E, T, m = recipe.epochs, recipe.steps_per_epoch, recipe.batch_size
    if T * m > n:
        raise ValueError(f"steps_per_epoch * batch_size = {T * m} exceeds dataset size {n}")
    noise_gen = rngmod.generator(seed, "noise")
    state = RuleState.start(theta0)
    d = state.theta.size
    global_step = 0
    for epoch in range(1, E + 1):
        plan = create_batches(n, m, T, rngmod.derive_seed(seed, "shuffle", epoch))
        if plans is not None:
            plans.append(plan)
        for t in range(1, T + 1):
            global_step += 1
            grads = np.asarray(loss_gradient(state.theta, _take(data, plan.index_sets[t - 1])), dtype=float)
            if grads.shape != (m, d):
                raise ValueError(f"loss_gradient returned shape {grads.shape}, expected {(m, d)}")
            if not np.all(np.isfinite(grads)):
                raise TrainingDivergedError(f"non-finite gradient at epoch {epoch}, step {t}")
            clipped = clip_rows(grads, recipe.clip)
            max_norm = float(np.linalg.norm(clipped, axis=1).max())
            z = noise_gen.standard_normal(d)
            u = clipped.sum(axis=0) + recipe.noise * z
            with np.errstate(over="ignore", invalid="ignore"):
                state = gradient_update(rule, state, u, rule.rate(t), global_step)
            if not np.all(np.isfinite(state.theta)):
                raise TrainingDivergedError(
                    f"parameters became non-finite at epoch {epoch}, step {t} "
                    f"(|u|={np.linalg.norm(u):.3g}, lr={rule.rate(t):.3g})"
                )
            yield StepRecord(epoch, t, state.theta.copy(), u, z, max_norm)


def train(data, recipe: TrainingRecipe, rule: UpdateRule, loss_gradient: LossGradient,
          seed: int, theta0: np.ndarray) -> TrainTrace:
    """Collect the full :class:`TrainTrace` of :func:`dpsgd_stream`."""
    plans: list[BatchPlan] = []
    records = list(dpsgd_stream(data, recipe, rule, loss_gradient, seed, theta0, plans))
    theta0 = np.asarray(theta0, dtype=float).copy()
    d = theta0.size

    def stack(attr):
        return np.array([getattr(r, attr) for r in records]).reshape(len(records), d)

    return TrainTrace(theta0, stack("theta"), stack("update"), stack("noise"),
                      np.array([r.max_clipped_norm for r in records]), plans, seed)


def dpsgd_batch(data, recipe: TrainingRecipe, rule: UpdateRule, loss_gradient: LossGradient,
                seed: int, theta0: np.ndarray) -> np.ndarray:
    """Final parameters of :func:`dpsgd_stream`."""
    theta = np.asarray(theta0, dtype=float).copy()
    for record in dpsgd_stream(data, recipe, rule, loss_gradient, seed, theta0):
        theta = record.theta
    return theta


def replay(theta0: np.ndarray, updates: np.ndarray, rule: UpdateRule, steps_per_epoch: int) -> np.ndarray:
    """Recompute the parameter sequence from recorded update vectors alone."""
    state = RuleState.start(theta0)
    out = []
    for k, u in enumerate(updates, start=1):
        t = (k - 1) % steps_per_epoch + 1
        state = gradient_update(rule, state, u, rule.rate(t), k)
        out.append(state.theta.copy())
    return np.array(out)
