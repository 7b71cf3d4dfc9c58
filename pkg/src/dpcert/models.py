"""Small differentiable classifiers with analytic gradients, bounded losses and datasets."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import rng as rngmod
from .pac_bayes import RiskEstimate, StochasticModel

ARCHITECTURES = ("linear_softmax", "mlp")
LOSSES = ("zero_one", "clamped_cross_entropy")


class CSVFormatError(ValueError):
    pass


@dataclass(frozen=True)
class ModelSpec:
    architecture: str
    input_dim: int
    num_classes: int
    hidden: tuple[int, ...] = (32, 32)
    activation: str = "relu"

    def __post_init__(self):
        if self.architecture not in ARCHITECTURES:
            raise ValueError(f"unknown architecture {self.architecture!r}")
        if self.activation != "relu":
            raise ValueError("only relu activations are supported")
        if self.input_dim < 1 or self.num_classes < 2:
            raise ValueError("need input_dim >= 1 and num_classes >= 2")
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))

    @property
    def widths(self) -> tuple[int, ...]:
        inner = self.hidden if self.architecture == "mlp" else ()
        return (self.input_dim, *inner, self.num_classes)

    @property
    def layer_shapes(self) -> list[tuple[int, int]]:
        w = self.widths
        return [(w[i + 1], w[i]) for i in range(len(w) - 1)]

    @property
    def dim(self) -> int:
        return sum(o * i + o for o, i in self.layer_shapes)

    def to_dict(self) -> dict:
        return {"architecture": self.architecture, "input_dim": self.input_dim,
                "num_classes": self.num_classes, "hidden": list(self.hidden),
                "activation": self.activation, "dim": self.dim}


@dataclass(frozen=True)
class BoundedLoss:
    kind: str = "clamped_cross_entropy"
    c_max: float = 4.0

    def __post_init__(self):
        if self.kind not in LOSSES:
            raise ValueError(f"unknown loss {self.kind!r}")
        if not (self.c_max > 0):
            raise ValueError(f"c_max must be positive, got {self.c_max}")


ZERO_ONE = BoundedLoss("zero_one")


@dataclass
class DatasetHandle:
    features: np.ndarray
    labels: np.ndarray
    provenance: str = "synthetic"
    num_classes: int | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.features = np.atleast_2d(np.asarray(self.features, dtype=float))
        self.labels = np.asarray(self.labels).astype(np.int64).ravel()
        if self.features.shape[0] != self.labels.size:
            raise ValueError("features and labels disagree on the number of rows")
        if self.labels.size < 1:
            raise ValueError("dataset is empty")
        if self.num_classes is None:
            self.num_classes = max(int(self.labels.max()) + 1, 2)
        if self.labels.min() < 0 or self.labels.max() >= self.num_classes:
            raise ValueError(f"labels must lie in [0, {self.num_classes})")

    def __len__(self) -> int:
        return self.labels.size

    def __getitem__(self, idx) -> "DatasetHandle":
        idx = np.atleast_1d(np.asarray(idx))
        return DatasetHandle(self.features[idx], self.labels[idx], self.provenance, self.num_classes)

    @property
    def n(self) -> int:
        return self.labels.size

    @property
    def p(self) -> int:
        return self.features.shape[1]


# ---------------------------------------------------------------------------
# Parameters and forward/backward passes


def unpack(spec: ModelSpec, params: np.ndarray) -> list[tuple[np.ndarray, np.ndarray]]:
    params = np.asarray(params, dtype=float)
    if params.shape[-1] != spec.dim:
        raise ValueError(f"expected {spec.dim} parameters, got {params.shape[-1]}")
    layers, k = [], 0
    lead = params.shape[:-1]
    for out, inp in spec.layer_shapes:
        W = params[..., k:k + out * inp].reshape(*lead, out, inp)
        k += out * inp
        b = params[..., k:k + out]
        k += out
        layers.append((W, b))
    return layers


def init_params(spec: ModelSpec, seed: int, scale: float | None = None) -> np.ndarray:
    """Uniform(-a, a) weights and biases, ``a = 1/sqrt(fan_in)`` per layer unless ``scale`` is given."""
    gen = rngmod.generator(seed, "init")
    chunks = []
    for out, inp in spec.layer_shapes:
        a = scale if scale is not None else 1.0 / math.sqrt(inp)
        chunks.append(gen.uniform(-a, a, size=out * inp + out))
    return np.concatenate(chunks)


def _forward(spec: ModelSpec, params: np.ndarray, X: np.ndarray):
    layers = unpack(spec, params)
    acts, pre = [X], []
    h = X
    for i, (W, b) in enumerate(layers):
        z = h @ W.T + b
        pre.append(z)
        h = np.maximum(z, 0.0) if i < len(layers) - 1 else z
        acts.append(h)
    return layers, acts, pre


def logits(spec: ModelSpec, params: np.ndarray, X: np.ndarray) -> np.ndarray:
    return _forward(spec, params, np.atleast_2d(X))[1][-1]


def _cross_entropy(z: np.ndarray, y: np.ndarray):
    zmax = z.max(axis=-1, keepdims=True)
    expz = np.exp(z - zmax)
    total = expz.sum(axis=-1, keepdims=True)
    lse = (zmax + np.log(total))[..., 0]
    ce = lse - np.take_along_axis(z, y[..., None], axis=-1)[..., 0]
    return ce, expz / total


def _loss_from_logits(z: np.ndarray, y: np.ndarray, loss: BoundedLoss) -> np.ndarray:
    if loss.kind == "zero_one":
        return (np.argmax(z, axis=-1) != y).astype(float)
    ce, _ = _cross_entropy(z, y)
    return np.minimum(ce, loss.c_max) / loss.c_max


def loss_values(spec: ModelSpec, params: np.ndarray, X: np.ndarray, y: np.ndarray,
                loss: BoundedLoss) -> np.ndarray:
    """Per-sample bounded losses in [0, 1]."""
    return _loss_from_logits(logits(spec, params, X), np.asarray(y), loss)


def _backward(spec, params, X, y, loss, per_sample: bool):
    if loss.kind != "clamped_cross_entropy":
        raise ValueError("zero_one loss has no gradient; train with clamped_cross_entropy")
    layers, acts, pre = _forward(spec, params, X)
    ce, probs = _cross_entropy(acts[-1], y)
    values = np.minimum(ce, loss.c_max) / loss.c_max
    live = (ce < loss.c_max).astype(float)[:, None] / loss.c_max
    delta = probs.copy()
    delta[np.arange(y.size), y] -= 1.0
    delta *= live
    m = X.shape[0]
    grads = [None] * len(layers)
    for i in range(len(layers) - 1, -1, -1):
        W, _ = layers[i]
        h = acts[i]
        if per_sample:
            gW = (delta[:, :, None] * h[:, None, :]).reshape(m, -1)
            grads[i] = np.concatenate([gW, delta], axis=1)
        else:
            gW = (delta.T @ h) / m
            grads[i] = np.concatenate([gW.ravel(), delta.mean(axis=0)])
        if i > 0:
            delta = (delta @ W) * (pre[i - 1] > 0)
    grad = np.concatenate(grads, axis=-1)
    return values, grad


def per_sample_gradients(spec: ModelSpec, params: np.ndarray, X: np.ndarray, y: np.ndarray,
                         loss: BoundedLoss) -> tuple[np.ndarray, np.ndarray]:
    """Per-sample loss values ``(m,)`` and gradients ``(m, d)`` of the clamped surrogate."""
    return _backward(spec, params, np.atleast_2d(X), np.asarray(y).ravel(), loss, per_sample=True)


def mean_loss_and_gradient(spec: ModelSpec, params: np.ndarray, data: DatasetHandle,
                           loss: BoundedLoss) -> tuple[float, np.ndarray]:
    values, grad = _backward(spec, params, data.features, data.labels, loss, per_sample=False)
    return float(values.mean()), grad


def loss_and_gradient(spec: ModelSpec, params: np.ndarray, sample, loss: BoundedLoss):
    """Loss of one ``(features, label)`` sample and its parameter gradient.

    The gradient is ``None`` for the zero-one loss, which is evaluation-only.
    """
    x, y = sample
    X = np.asarray(x, dtype=float).reshape(1, -1)
    Y = np.array([int(y)])
    if loss.kind == "zero_one":
        return float(loss_values(spec, params, X, Y, loss)[0]), None
    values, grads = per_sample_gradients(spec, params, X, Y, loss)
    return float(values[0]), grads[0]


def risk(spec: ModelSpec, params: np.ndarray, data: DatasetHandle, loss: BoundedLoss) -> float:
    """Mean loss over the dataset."""
    if len(data) == 0:
        raise ValueError("empty dataset")
    return float(loss_values(spec, params, data.features, data.labels, loss).mean())


def risks_for_draws(spec: ModelSpec, draws: np.ndarray, data: DatasetHandle,
                    loss: BoundedLoss) -> np.ndarray:
    """Risk of each parameter vector in ``draws`` (shape ``(N, d)``)."""
    draws = np.atleast_2d(draws)
    if spec.architecture == "linear_softmax":
        (W, b), = unpack(spec, draws)
        z = np.einsum("np,kcp->knc", data.features, W) + b[:, None, :]
        y = np.broadcast_to(data.labels, z.shape[:2])
        return _loss_from_logits(z, y, loss).mean(axis=1)
    return np.array([risk(spec, theta, data, loss) for theta in draws])


def mc_risk_of_stochastic_model(spec: ModelSpec, model: StochasticModel, data: DatasetHandle,
                                loss: BoundedLoss, num_draws: int, seed: int,
                                chunk: int = 512, workers: int = 1) -> RiskEstimate:
    """Average risk over ``num_draws`` parameter draws from ``model``.

    Draws are generated in fixed chunks, each from its own labelled
    substream, so the estimate does not depend on ``workers``.
    """
    if num_draws < 1:
        raise ValueError(f"num_draws must be >= 1, got {num_draws}")
    if model.dim != spec.dim:
        raise ValueError(f"model has dimension {model.dim}, spec needs {spec.dim}")
    starts = range(0, num_draws, chunk)

    def run(start: int) -> float:
        size = min(chunk, num_draws - start)
        gen = rngmod.generator(seed, "mc-risk", start // chunk)
        return float(risks_for_draws(spec, model.sample(gen, size), data, loss).sum())

    if workers > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=workers) as pool:
            sums = list(pool.map(run, starts))
    else:
        sums = [run(s) for s in starts]
    value = min(max(math.fsum(sums) / num_draws, 0.0), 1.0)
    return RiskEstimate(value, num_draws, "monte-carlo")


# ---------------------------------------------------------------------------
# Datasets


def synth_dataset(kind: str, n: int, p: int, seed: int, separation: float = 3.0) -> DatasetHandle:
    """Seeded synthetic binary classification data.

    ``two_gaussians``: unit-variance Gaussians centred at ``+-separation/2``
    along the first axis. ``xor``: four unit-variance clusters at
    ``(+-separation/2, +-separation/2)``, label = sign agreement of the first
    two coordinates. Labels are balanced up to rounding.
    """
    if n < 2:
        raise ValueError(f"n must be >= 2, got {n}")
    if kind not in ("two_gaussians", "xor"):
        raise ValueError(f"unknown dataset kind {kind!r}")
    if kind == "xor" and p < 2:
        raise ValueError("xor needs p >= 2")
    gen = rngmod.generator(seed, "synth", kind)
    labels = np.arange(n) % 2
    gen.shuffle(labels)
    X = gen.standard_normal((n, p))
    half = separation / 2.0
    if kind == "two_gaussians":
        X[:, 0] += np.where(labels == 1, half, -half)
    else:
        quadrant = gen.integers(0, 2, size=n)
        s0 = np.where(quadrant == 1, 1.0, -1.0)
        s1 = np.where(labels == 1, s0, -s0)
        X[:, 0] += half * s0
        X[:, 1] += half * s1
    return DatasetHandle(X, labels, "synthetic", 2, {"kind": kind, "separation": separation, "seed": seed})


def _is_number(cell: str) -> bool:
    try:
        float(cell)
    except ValueError:
        return False
    return True


def load_csv(path) -> DatasetHandle:
    """Read ``p`` feature columns followed by an integer label column.

    A single leading header line is tolerated (detected by a non-numeric
    cell). Raises :class:`CSVFormatError` naming the offending line.
    """
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    rows = [(i + 1, r) for i, r in enumerate(rows) if r and any(c.strip() for c in r)]
    if rows and not all(_is_number(c) for c in rows[0][1]):
        rows = rows[1:]
    if not rows:
        raise ValueError(f"{path}: no data rows")
    width = len(rows[0][1])
    if width < 2:
        raise CSVFormatError(f"{path}:{rows[0][0]}: need at least one feature and a label")
    feats, labels = [], []
    for lineno, row in rows:
        if len(row) != width:
            raise CSVFormatError(f"{path}:{lineno}: expected {width} columns, got {len(row)}")
        try:
            values = [float(c) for c in row[:-1]]
            label = float(row[-1])
        except ValueError as exc:
            raise CSVFormatError(f"{path}:{lineno}: non-numeric cell ({exc})") from None
        if label != int(label) or label < 0:
            raise CSVFormatError(f"{path}:{lineno}: label {row[-1]!r} is not a non-negative integer")
        feats.append(values)
        labels.append(int(label))
    return DatasetHandle(np.array(feats), np.array(labels), "csv", meta={"path": str(path)})


def save_csv(data: DatasetHandle, path, header: bool = True) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        if header:
            w.writerow([f"x{i}" for i in range(data.p)] + ["label"])
        for x, y in zip(data.features, data.labels):
            w.writerow([repr(float(v)) for v in x] + [int(y)])
