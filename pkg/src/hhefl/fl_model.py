"""Local training, weight quantization into Z_p, and FedAvg aggregation.

The model is a single-hidden-layer perceptron sized to roughly 8k
parameters, trained with SGD + momentum on 8x8 digit images (or a
synthetic two-class task for fast tests). Weights are clipped to a
symmetric range, scaled to integers and carried through the encrypted
pipeline exactly; the server sums n_i-weighted integer vectors and the
final division by the round's total sample count happens on the clients
after decryption, since the ciphertext space has no division.

The scale S and the admission bound n_max obey 2*alpha*S*n_max < p, so a
round's weighted integer sum can never wrap around the plaintext modulus.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import ring_he
from .errors import ConfigError, ParameterError
from .rng import Drbg


@dataclass(frozen=True)
class QuantParams:
    """Clip range, integer scale and aggregation headroom for quantization."""

    clip_range: float
    scale: int
    modulus: int
    n_max: int

    def __post_init__(self):
        if self.clip_range <= 0 or self.scale < 1 or self.n_max < 1:
            raise ConfigError("clip_range, scale and n_max must be positive")
        if 2 * self.clip_range * self.scale * self.n_max >= self.modulus:
            raise ConfigError(
                "2*alpha*S*n_max must stay below the plaintext modulus; "
                f"got alpha={self.clip_range} S={self.scale} n_max={self.n_max}"
            )

    @classmethod
    def with_max_scale(
        cls, clip_range: float = 5.0, n_max: int = 16, modulus: int = 65537
    ) -> "QuantParams":
        scale = int((modulus - 1) // (2 * clip_range * n_max))
        return cls(clip_range, scale, modulus, n_max)


def quantize(weights: np.ndarray, qp: QuantParams) -> np.ndarray:
    """Clip, scale and round half-away-from-zero into [0, p)."""
    w = np.asarray(weights, dtype=np.float64)
    if not np.all(np.isfinite(w)):
        raise ParameterError("weights must be finite")
    clipped = np.clip(w, -qp.clip_range, qp.clip_range)
    scaled = clipped * qp.scale
    rounded = np.sign(scaled) * np.floor(np.abs(scaled) + 0.5)
    return rounded.astype(np.int64) % qp.modulus


def dequantize(values: np.ndarray, qp: QuantParams, divisor: int) -> np.ndarray:
    """Centered lift out of [0, p), then divide by S * divisor as reals."""
    if divisor < 1:
        raise ParameterError("divisor must be positive")
    v = np.asarray(values, dtype=np.int64)
    centered = np.where(v > qp.modulus // 2, v - qp.modulus, v)
    return centered.astype(np.float64) / (qp.scale * divisor)


def centered(values: np.ndarray, modulus: int) -> np.ndarray:
    v = np.asarray(values, dtype=np.int64)
    return np.where(v > modulus // 2, v - modulus, v)


# ---------------------------------------------------------------------------
# Model.
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class MlpSpec:
    """Shapes of the two-layer perceptron; weights travel as flat vectors."""

    in_dim: int
    hidden: int
    n_classes: int

    @property
    def param_count(self) -> int:
        return self.in_dim * self.hidden + self.hidden + self.hidden * self.n_classes + self.n_classes

    @classmethod
    def sized_for(cls, in_dim: int, n_classes: int, target_params: int = 8000) -> "MlpSpec":
        hidden = max(1, round((target_params - n_classes) / (in_dim + 1 + n_classes)))
        return cls(in_dim, hidden, n_classes)

    def unpack(self, flat: np.ndarray):
        i, h, c = self.in_dim, self.hidden, self.n_classes
        if flat.shape != (self.param_count,):
            raise ParameterError("weight vector does not match model spec")
        pos = 0
        w1 = flat[pos : pos + i * h].reshape(i, h)
        pos += i * h
        b1 = flat[pos : pos + h]
        pos += h
        w2 = flat[pos : pos + h * c].reshape(h, c)
        pos += h * c
        b2 = flat[pos:]
        return w1, b1, w2, b2

    def pack(self, w1, b1, w2, b2) -> np.ndarray:
        return np.concatenate([w1.ravel(), b1.ravel(), w2.ravel(), b2.ravel()])


@dataclass
class EvalMetrics:
    accuracy: float
    loss: float
    test_sample_count: int


def init_weights(spec: MlpSpec, rng: Drbg) -> np.ndarray:
    w1 = rng.normal(spec.in_dim * spec.hidden) * np.sqrt(2.0 / spec.in_dim)
    w2 = rng.normal(spec.hidden * spec.n_classes) * np.sqrt(2.0 / spec.hidden)
    return np.concatenate(
        [w1, np.zeros(spec.hidden), w2, np.zeros(spec.n_classes)]
    )


def _forward(spec: MlpSpec, flat: np.ndarray, x: np.ndarray):
    w1, b1, w2, b2 = spec.unpack(flat)
    pre = x @ w1 + b1
    hid = np.maximum(pre, 0.0)
    logits = hid @ w2 + b2
    logits = logits - logits.max(axis=1, keepdims=True)
    expd = np.exp(logits)
    probs = expd / expd.sum(axis=1, keepdims=True)
    return pre, hid, probs


def _loss_acc(probs: np.ndarray, y: np.ndarray) -> tuple[float, float]:
    n = len(y)
    eps = 1e-12
    loss = float(-np.log(probs[np.arange(n), y] + eps).mean())
    acc = float((probs.argmax(axis=1) == y).mean())
    return loss, acc


def batch_count(n_samples: int, batch_size: int) -> int:
    """Training batches per epoch; this is the sample-count weight n_i."""
    if batch_size < 1:
        raise ParameterError("batch_size must be positive")
    return max(1, -(-n_samples // batch_size))


def train_local(
    spec: MlpSpec,
    weights: np.ndarray,
    x: np.ndarray,
    y: np.ndarray,
    epochs: int,
    lr: float,
    batch_size: int,
    rng: Drbg,
    momentum: float = 0.9,
) -> tuple[np.ndarray, int]:
    """SGD with momentum; deterministic given the rng stream.

    Returns the updated flat weights and n_i = batches per epoch, which is
    computed even when epochs == 0.
    """
    if len(x) == 0:
        raise ParameterError("dataset must be non-empty")
    n_i = batch_count(len(x), batch_size)
    w = np.asarray(weights, dtype=np.float64).copy()
    vel = np.zeros_like(w)
    w1, b1, w2, b2 = (a.copy() for a in spec.unpack(w))
    for epoch in range(epochs):
        order = rng.child(f"epoch{epoch}").permutation(len(x))
        for start in range(0, len(x), batch_size):
            idx = order[start : start + batch_size]
            xb, yb = x[idx], y[idx]
            flat = spec.pack(w1, b1, w2, b2)
            pre, hid, probs = _forward(spec, flat, xb)
            m = len(yb)
            dl = probs
            dl[np.arange(m), yb] -= 1.0
            dl /= m
            gw2 = hid.T @ dl
            gb2 = dl.sum(axis=0)
            dh = (dl @ w2.T) * (pre > 0)
            gw1 = xb.T @ dh
            gb1 = dh.sum(axis=0)
            grad = spec.pack(gw1, gb1, gw2, gb2)
            vel = momentum * vel - lr * grad
            neww = spec.pack(w1, b1, w2, b2) + vel
            w1, b1, w2, b2 = (a.copy() for a in spec.unpack(neww))
    return spec.pack(w1, b1, w2, b2), n_i


def evaluate(spec: MlpSpec, weights: np.ndarray, x: np.ndarray, y: np.ndarray) -> EvalMetrics:
    if len(x) == 0:
        raise ParameterError("test set must be non-empty")
    _, _, probs = _forward(spec, np.asarray(weights, dtype=np.float64), x)
    loss, acc = _loss_acc(probs, y)
    return EvalMetrics(accuracy=acc, loss=loss, test_sample_count=len(y))


# ---------------------------------------------------------------------------
# Aggregation.
# ---------------------------------------------------------------------------


def fedavg_plain(updates: list[tuple[np.ndarray, int]]) -> np.ndarray:
    """Ground-truth weighted average over real-valued weight vectors."""
    if not updates:
        raise ParameterError("no updates to aggregate")
    total = sum(n for _, n in updates)
    if total <= 0:
        raise ParameterError("sample counts must be positive")
    acc = np.zeros_like(np.asarray(updates[0][0], dtype=np.float64))
    for vec, n in updates:
        acc = acc + (n / total) * np.asarray(vec, dtype=np.float64)
    return acc


def fedavg_quantized_plain(
    updates: list[tuple[np.ndarray, int]], qp: QuantParams
) -> tuple[np.ndarray, int]:
    """Plaintext shadow of the encrypted aggregation: integer weighted sum.

    Asserts the no-wraparound invariant on the centered integer sum.
    """
    if not updates:
        raise ParameterError("no updates to aggregate")
    total = sum(n for _, n in updates)
    if total > qp.n_max:
        raise ParameterError(f"total sample count {total} exceeds n_max {qp.n_max}")
    acc = np.zeros_like(np.asarray(updates[0][0], dtype=np.int64))
    exact = np.zeros(len(updates[0][0]), dtype=np.int64)
    for vec, n in updates:
        v = np.asarray(vec, dtype=np.int64)
        if v.shape != acc.shape:
            raise ParameterError("update length mismatch")
        acc = (acc + n * v) % qp.modulus
        exact = exact + n * centered(v, qp.modulus)
    half = qp.modulus // 2
    assert exact.min() > -half - 1 and exact.max() <= half, "weighted sum wrapped"
    return acc, total


def fedavg_encrypted(
    updates: list[tuple[list[ring_he.RingCiphertext], int]], qp: QuantParams
) -> tuple[list[ring_he.RingCiphertext], int]:
    """Homomorphic FedAvg numerator: Enc(sum_k n_k * q(w_k)) plus plain n.

    Division by n is delegated to the clients after decryption.
    """
    if not updates:
        raise ParameterError("no updates to aggregate")
    total = sum(n for _, n in updates)
    if total > qp.n_max:
        raise ParameterError(f"total sample count {total} exceeds n_max {qp.n_max}")
    width = len(updates[0][0])
    acc: list[ring_he.RingCiphertext] | None = None
    for cts, n in updates:
        if len(cts) != width:
            raise ParameterError("update ciphertext counts differ")
        if n < 1:
            raise ParameterError("sample counts must be positive")
        scaled = [ring_he.mul_scalar(ct, n) for ct in cts]
        acc = scaled if acc is None else [ring_he.add(a, s) for a, s in zip(acc, scaled)]
    return acc, total


def aggregate_metrics(reports: list[EvalMetrics]) -> EvalMetrics:
    """Test-sample-count-weighted mean of accuracy and loss."""
    if not reports:
        raise ParameterError("no metrics to aggregate")
    total = sum(r.test_sample_count for r in reports)
    if total <= 0:
        raise ParameterError("test sample counts must be positive")
    acc = sum(r.accuracy * r.test_sample_count for r in reports) / total
    loss = sum(r.loss * r.test_sample_count for r in reports) / total
    return EvalMetrics(accuracy=acc, loss=loss, test_sample_count=total)


# ---------------------------------------------------------------------------
# Datasets and partitioning.
# ---------------------------------------------------------------------------


def load_digits_dataset() -> tuple[np.ndarray, np.ndarray]:
    """The 8x8 handwritten digits set bundled with scikit-learn."""
    from sklearn.datasets import load_digits

    data = load_digits()
    return data.data.astype(np.float64) / 16.0, data.target.astype(np.int64)


def synthetic_dataset(
    n_samples: int, in_dim: int, seed: int, n_classes: int = 2
) -> tuple[np.ndarray, np.ndarray]:
    """Gaussian blobs, one per class, linearly separable-ish."""
    rng = Drbg.from_seed(seed, "synthetic-data")
    y = rng.uniform(n_classes, n_samples)
    means = rng.normal(n_classes * in_dim).reshape(n_classes, in_dim) * 2.0
    x = rng.normal(n_samples * in_dim).reshape(n_samples, in_dim) * 0.8
    x = x + means[y]
    return x, y.astype(np.int64)


def load_csv_dataset(path: str | Path) -> tuple[np.ndarray, np.ndarray]:
    """CSV of feature columns with a trailing integer label column."""
    arr = np.genfromtxt(path, delimiter=",", dtype=np.float64)
    if arr.ndim == 1:
        arr = arr[None, :]
    if arr.size == 0 or arr.shape[1] < 2:
        raise ConfigError(f"dataset {path} needs feature columns plus a label")
    if np.isnan(arr).any():
        raise ConfigError(f"dataset {path} contains missing values")
    return arr[:, :-1], arr[:, -1].astype(np.int64)


def partition_iid(n_rows: int, n_clients: int) -> list[np.ndarray]:
    """Deterministic round-robin partition by row index."""
    if n_clients < 1 or n_rows < n_clients:
        raise ConfigError("need at least one row per client")
    return [np.arange(i, n_rows, n_clients) for i in range(n_clients)]


def local_split(indices: np.ndarray, train_frac: float = 0.8):
    """Leading share trains, trailing share is the local test split."""
    cut = max(1, int(len(indices) * train_frac))
    if cut >= len(indices):
        cut = len(indices) - 1
    if cut < 1:
        raise ConfigError("partition too small to split")
    return indices[:cut], indices[cut:]
