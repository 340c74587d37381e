"""Triple-scoring MLP: forward pass, exact gradients, and Adam training.

The network maps a concatenated feature vector to a single logit; the
training objective is the mean per-triple binary log-likelihood (positives
are the weak-label triples, negatives the rest of the candidate set), with
an optional positive-class weight.
"""
from __future__ import annotations

import hashlib
import logging
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import FingerprintError, StoreFormatError, TrainingError

logger = logging.getLogger(__name__)

PARAMS_MAGIC = b"MLPS"
PARAMS_VERSION = 1


@dataclass
class MlpParams:
    """Layer weights (input_dim x output_dim) and biases, final output dim 1."""

    weights: list[np.ndarray]
    biases: list[np.ndarray]

    def __post_init__(self):
        if not self.weights or len(self.weights) != len(self.biases):
            raise ValueError("weights and biases must be nonempty and aligned")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or b.shape != (w.shape[1],):
                raise ValueError(f"layer {i}: bad shapes {w.shape} / {b.shape}")
            if i > 0 and w.shape[0] != self.weights[i - 1].shape[1]:
                raise ValueError(f"layer {i}: input dim does not chain")
        if self.weights[-1].shape[1] != 1:
            raise ValueError("final layer must produce a scalar logit")

    @property
    def input_dim(self) -> int:
        return self.weights[0].shape[0]

    def copy(self) -> "MlpParams":
        return MlpParams([w.copy() for w in self.weights], [b.copy() for b in self.biases])

    def flat(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.weights + self.biases])


def init_params(
    input_dim: int, hidden_sizes: Sequence[int], seed: int = 0
) -> MlpParams:
    """He-style initialization for the ReLU stack, driven by one seed."""
    rng = np.random.default_rng(seed)
    sizes = [input_dim, *hidden_sizes, 1]
    weights, biases = [], []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        scale = np.sqrt(2.0 / fan_in)
        weights.append(rng.standard_normal((fan_in, fan_out)) * scale)
        biases.append(np.zeros(fan_out))
    return MlpParams(weights, biases)


def forward_logits(params: MlpParams, features: np.ndarray) -> np.ndarray:
    """Batch logits for a (n, input_dim) feature matrix."""
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 2 or features.shape[1] != params.input_dim:
        raise ValueError(
            f"features have dim {features.shape}, expected (n, {params.input_dim})"
        )
    a = features
    last = len(params.weights) - 1
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        z = a @ w + b
        a = z if i == last else np.maximum(z, 0.0)
    return a[:, 0]


def sigmoid(z: np.ndarray) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def mlp_forward(params: MlpParams, feature: np.ndarray) -> float:
    """Probability that a single triple belongs to the evidence subgraph."""
    logit = forward_logits(params, np.asarray(feature, dtype=np.float64)[None, :])[0]
    return float(sigmoid(np.array([logit]))[0])


def _softplus(z: np.ndarray) -> np.ndarray:
    return np.maximum(z, 0.0) + np.log1p(np.exp(-np.abs(z)))


def loss_and_grad(
    params: MlpParams,
    features: np.ndarray,
    labels: np.ndarray,
    positive_weight: float = 1.0,
) -> tuple[float, MlpParams]:
    """Mean negative log-likelihood of the per-triple factorized objective
    and its exact gradient (same shapes as the parameters)."""
    X = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64)
    if X.shape[0] != y.shape[0]:
        raise ValueError(f"{X.shape[0]} features vs {y.shape[0]} labels")
    n = X.shape[0]

    activations = [X]
    pre = []
    a = X
    last = len(params.weights) - 1
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        z = a @ w + b
        pre.append(z)
        a = z if i == last else np.maximum(z, 0.0)
        activations.append(a)
    logits = pre[-1][:, 0]

    losses = positive_weight * y * _softplus(-logits) + (1.0 - y) * _softplus(logits)
    loss = float(losses.mean())

    # dL/dlogit of the mean loss
    dlogit = ((1.0 - y) * sigmoid(logits) - positive_weight * y * sigmoid(-logits)) / n
    delta = dlogit[:, None]
    grad_w = [np.empty(0)] * len(params.weights)
    grad_b = [np.empty(0)] * len(params.biases)
    for i in range(last, -1, -1):
        grad_w[i] = activations[i].T @ delta
        grad_b[i] = delta.sum(axis=0)
        if i > 0:
            delta = (delta @ params.weights[i].T) * (pre[i - 1] > 0)
    return loss, MlpParams(grad_w, grad_b)


def _sharded_loss_and_grad(
    params: MlpParams,
    X: np.ndarray,
    y: np.ndarray,
    positive_weight: float,
    shards: int,
) -> tuple[float, MlpParams]:
    """Opt-in data-parallel gradient: shards reduced in fixed order."""
    n = X.shape[0]
    bounds = np.linspace(0, n, shards + 1, dtype=int)
    pieces = [(X[a:b], y[a:b]) for a, b in zip(bounds[:-1], bounds[1:]) if b > a]
    with ThreadPoolExecutor(max_workers=len(pieces)) as pool:
        results = list(
            pool.map(lambda p: loss_and_grad(params, p[0], p[1], positive_weight), pieces)
        )
    loss = 0.0
    grads = None
    for (piece, _), (piece_loss, piece_grad) in zip(pieces, results):
        w = piece.shape[0] / n
        loss += piece_loss * w
        if grads is None:
            grads = MlpParams(
                [g * w for g in piece_grad.weights], [g * w for g in piece_grad.biases]
            )
        else:
            for gw, pw in zip(grads.weights, piece_grad.weights):
                gw += pw * w
            for gb, pb in zip(grads.biases, piece_grad.biases):
                gb += pb * w
    assert grads is not None
    return loss, grads


@dataclass
class TrainConfig:
    epochs: int = 20
    batch_size: int = 1024
    learning_rate: float = 1e-3
    seed: int = 0
    positive_weight: float = 1.0
    hidden_sizes: tuple[int, ...] = (1024, 1024)
    val_fraction: float = 0.0
    parallel_shards: int = 1
    standardize: bool = True
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8


class _RowDataset:
    """Flattened (features, labels) rows with per-sample grouping."""

    def __init__(self, samples: Sequence[tuple[np.ndarray, np.ndarray]]):
        mats = [np.asarray(f, dtype=np.float64) for f, _ in samples]
        labels = [np.asarray(y, dtype=np.float64) for _, y in samples]
        sizes = [m.shape[0] for m in mats]
        offsets = np.concatenate([[0], np.cumsum(sizes)]).astype(int)
        self.groups = [np.arange(a, b) for a, b in zip(offsets[:-1], offsets[1:])]
        self.num_rows = int(offsets[-1])
        self._X = np.concatenate(mats, axis=0)
        self._y = np.concatenate(labels)

    def gather(self, row_ids: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        return self._X[row_ids], self._y[row_ids]


def _feature_moments(dataset, batch_size: int = 8192) -> tuple[np.ndarray, np.ndarray]:
    """Per-feature mean and standard deviation over all rows."""
    total = np.zeros(0)
    total_sq = np.zeros(0)
    n = dataset.num_rows
    for start in range(0, n, batch_size):
        X, _ = dataset.gather(np.arange(start, min(start + batch_size, n)))
        if total.shape[0] == 0:
            total = np.zeros(X.shape[1])
            total_sq = np.zeros(X.shape[1])
        total += X.sum(axis=0)
        total_sq += (X * X).sum(axis=0)
    mean = total / n
    var = np.maximum(total_sq / n - mean * mean, 0.0)
    std = np.sqrt(var)
    std[std < 1e-12] = 1.0
    return mean, std


def _fold_standardization(
    params: MlpParams, mean: np.ndarray, std: np.ndarray
) -> MlpParams:
    """Rewrite the first layer so the network consumes raw features:
    ((x - mean)/std) @ W + b == x @ (W/std) + (b - mean/std @ W)."""
    scaled_w = params.weights[0] / std[:, None]
    new_bias = params.biases[0] - mean @ scaled_w
    return MlpParams(
        [scaled_w] + [w.copy() for w in params.weights[1:]],
        [new_bias] + [b.copy() for b in params.biases[1:]],
    )


def train(dataset, config: TrainConfig = TrainConfig()) -> MlpParams:
    """Adam on the factorized objective; deterministic for a fixed seed.

    `dataset` is either a sequence of per-sample (features, labels) pairs or
    any object exposing `num_rows`, `groups`, and `gather(row_ids)`.
    Features are standardized during optimization (the scaling is folded
    back into the first layer, so the returned params consume raw
    features). Returns the final parameters, or the best-validation
    parameters when config.val_fraction > 0.
    """
    if not hasattr(dataset, "gather"):
        if not dataset:
            raise ValueError("training dataset is empty")
        dataset = _RowDataset(dataset)
    if dataset.num_rows == 0:
        raise ValueError("training dataset has no rows")

    probe_X, _ = dataset.gather(np.array([0]))
    input_dim = probe_X.shape[1]
    rng = np.random.default_rng(config.seed)
    params = init_params(input_dim, config.hidden_sizes, seed=config.seed)
    if config.epochs == 0:
        return params

    if config.standardize:
        feat_mean, feat_std = _feature_moments(dataset)
    else:
        feat_mean = np.zeros(input_dim)
        feat_std = np.ones(input_dim)

    groups = list(dataset.groups)
    val_rows = np.empty(0, dtype=int)
    if config.val_fraction > 0.0 and len(groups) > 1:
        order = rng.permutation(len(groups))
        n_val = max(1, int(round(config.val_fraction * len(groups))))
        if n_val >= len(groups):
            n_val = len(groups) - 1
        val_rows = np.concatenate([groups[i] for i in order[:n_val]])
        train_rows = np.concatenate([groups[i] for i in order[n_val:]])
    else:
        train_rows = np.concatenate(groups)

    # Adam state, written out explicitly
    m_w = [np.zeros_like(w) for w in params.weights]
    v_w = [np.zeros_like(w) for w in params.weights]
    m_b = [np.zeros_like(b) for b in params.biases]
    v_b = [np.zeros_like(b) for b in params.biases]
    step = 0
    b1, b2, eps = config.adam_beta1, config.adam_beta2, config.adam_eps

    best_val = np.inf
    best_params = params.copy()

    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(len(train_rows))
        epoch_loss = 0.0
        for start in range(0, len(train_rows), config.batch_size):
            batch_rows = train_rows[order[start : start + config.batch_size]]
            X, y = dataset.gather(batch_rows)
            X = (X - feat_mean) / feat_std
            if config.parallel_shards > 1:
                loss, grads = _sharded_loss_and_grad(
                    params, X, y, config.positive_weight, config.parallel_shards
                )
            else:
                loss, grads = loss_and_grad(params, X, y, config.positive_weight)
            if not np.isfinite(loss):
                raise TrainingError(
                    f"non-finite loss {loss} at epoch {epoch}, step {step}; "
                    f"lr={config.learning_rate}, batch={len(batch_rows)}"
                )
            epoch_loss += loss * len(batch_rows)
            step += 1
            for group, grad_group, m_group, v_group in (
                (params.weights, grads.weights, m_w, v_w),
                (params.biases, grads.biases, m_b, v_b),
            ):
                for p, g, m, v in zip(group, grad_group, m_group, v_group):
                    m *= b1
                    m += (1 - b1) * g
                    v *= b2
                    v += (1 - b2) * g * g
                    m_hat = m / (1 - b1**step)
                    v_hat = v / (1 - b2**step)
                    p -= config.learning_rate * m_hat / (np.sqrt(v_hat) + eps)

        epoch_loss /= len(train_rows)
        if len(val_rows):
            Xv, yv = dataset.gather(val_rows)
            Xv = (Xv - feat_mean) / feat_std
            val_loss, _ = loss_and_grad(params, Xv, yv, config.positive_weight)
            logger.info("epoch %d: train loss %.6f, val loss %.6f", epoch, epoch_loss, val_loss)
            if val_loss < best_val:
                best_val = val_loss
                best_params = params.copy()
        else:
            logger.info("epoch %d: train loss %.6f", epoch, epoch_loss)

    final = best_params if len(val_rows) else params
    return _fold_standardization(final, feat_mean, feat_std)


def params_fingerprint(input_dim: int, dde_rounds: int) -> int:
    digest = hashlib.blake2b(
        f"input_dim={input_dim};dde_rounds={dde_rounds}".encode(), digest_size=8
    ).digest()
    return struct.unpack("<Q", digest)[0]


def save_params(
    params: MlpParams, path: str | Path, input_dim: int, dde_rounds: int
) -> None:
    with open(path, "wb") as f:
        f.write(PARAMS_MAGIC)
        f.write(struct.pack("<B", PARAMS_VERSION))
        f.write(struct.pack("<I", len(params.weights)))
        for w, b in zip(params.weights, params.biases):
            f.write(struct.pack("<II", w.shape[0], w.shape[1]))
            f.write(w.astype("<f4").tobytes(order="C"))
            f.write(b.astype("<f4").tobytes(order="C"))
        f.write(struct.pack("<Q", params_fingerprint(input_dim, dde_rounds)))


def load_params(
    path: str | Path,
    expected_input_dim: int | None = None,
    expected_dde_rounds: int | None = None,
) -> MlpParams:
    data = Path(path).read_bytes()
    if len(data) < 9 or data[:4] != PARAMS_MAGIC:
        raise StoreFormatError(f"{path}: not a params file")
    if data[4] != PARAMS_VERSION:
        raise StoreFormatError(f"{path}: unsupported version {data[4]}")
    (layer_count,) = struct.unpack_from("<I", data, 5)
    offset = 9
    weights, biases = [], []
    for _ in range(layer_count):
        rows, cols = struct.unpack_from("<II", data, offset)
        offset += 8
        w = np.frombuffer(data, dtype="<f4", count=rows * cols, offset=offset)
        offset += rows * cols * 4
        b = np.frombuffer(data, dtype="<f4", count=cols, offset=offset)
        offset += cols * 4
        weights.append(w.reshape(rows, cols).astype(np.float64))
        biases.append(b.astype(np.float64))
    if offset + 8 != len(data):
        raise StoreFormatError(f"{path}: truncated or trailing bytes")
    (stored_fp,) = struct.unpack_from("<Q", data, offset)
    if expected_input_dim is not None and expected_dde_rounds is not None:
        expected_fp = params_fingerprint(expected_input_dim, expected_dde_rounds)
        if stored_fp != expected_fp:
            raise FingerprintError(
                f"{path}: params were trained under a different configuration "
                f"(input dim / propagation rounds mismatch)"
            )
    return MlpParams(weights, biases)
