"""Loss/gradient oracles and synthetic data for desk-scale training.

Each worker owns one ``Objective`` bound to its ``DataShard``; the global
objective is the mean of the local ones. Three kinds are provided:

* ``quadratic``: f_i(x) = 1/2 ||x - b_i||^2, exact optimum mean(b_i);
* ``logistic``: binary cross-entropy with l2 regularization on Gaussian
  class clusters;
* ``mlp``: one tanh hidden layer with a softmax output, trained by backprop.
"""
import logging
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np

from .core import ParameterVector, frozen_array
from .errors import InvalidInput

logger = logging.getLogger(__name__)

LOGISTIC_L2 = 1e-4
PARTITIONS = ("iid", "label_skew")

_MATRIX_HEADER = struct.Struct("<II")  # N columns, rows


# ---- Data shards ----
@dataclass(frozen=True, eq=False)
class DataShard:
    features: np.ndarray  # (m, d)
    labels: np.ndarray  # (m,)
    partition: str = "iid"

    @property
    def size(self) -> int:
        return int(self.features.shape[0])

    def label_histogram(self, n_classes: int) -> np.ndarray:
        return np.bincount(self.labels.astype(np.int64), minlength=n_classes)


def partition_indices(
    labels: np.ndarray,
    n_workers: int,
    scheme: str,
    rng: np.random.Generator,
    skew: float = 0.8,
) -> List[np.ndarray]:
    """Disjoint index sets covering every sample.

    ``label_skew`` deals label-sorted chunks, then reshuffles a ``1 - skew``
    share of every chunk across all workers.
    """
    m = labels.shape[0]
    if m < n_workers:
        raise InvalidInput(f"{m} samples cannot cover {n_workers} workers")
    if scheme == "iid":
        return [np.sort(part) for part in np.array_split(rng.permutation(m), n_workers)]
    if scheme != "label_skew":
        raise InvalidInput(f"unknown partition scheme {scheme!r}, expected one of {PARTITIONS}")
    if not 0.0 <= skew <= 1.0:
        raise InvalidInput(f"skew must lie in [0, 1], got {skew}")

    shuffled = rng.permutation(m)
    by_label = shuffled[np.argsort(labels[shuffled], kind="stable")]
    chunks = np.array_split(by_label, n_workers)
    kept, pool = [], []
    for chunk in chunks:
        chunk = rng.permutation(chunk)
        n_keep = int(round(skew * chunk.shape[0]))
        kept.append(chunk[:n_keep])
        pool.append(chunk[n_keep:])
    pool = rng.permutation(np.concatenate(pool))
    # refill each shard back to its original size
    out, offset = [], 0
    for chunk, keep in zip(chunks, kept):
        need = chunk.shape[0] - keep.shape[0]
        out.append(np.sort(np.concatenate([keep, pool[offset:offset + need]])))
        offset += need
    return out


# ---- Objectives ----
class Objective:
    kind = "abstract"

    def __init__(self, shard: DataShard, dim: int):
        self.shard = shard
        self.dim = dim

    def loss_and_grad(self, x: ParameterVector, idx: Optional[np.ndarray] = None) -> Tuple[float, np.ndarray]:
        raise NotImplementedError

    def loss(self, x: ParameterVector, idx: Optional[np.ndarray] = None) -> float:
        return self.loss_and_grad(x, idx)[0]

    def gradient(self, x: ParameterVector, idx: Optional[np.ndarray] = None) -> np.ndarray:
        return self.loss_and_grad(x, idx)[1]

    def sample_batch(self, rng: np.random.Generator, batch_size: Optional[int]) -> Optional[np.ndarray]:
        """Mini-batch indices into the shard, or None for the whole shard."""
        if self.shard.size == 0:
            raise InvalidInput("data shard is empty")
        if batch_size is None or batch_size >= self.shard.size:
            return None
        return np.sort(rng.choice(self.shard.size, size=batch_size, replace=False))

    def _batch(self, idx: Optional[np.ndarray]) -> Tuple[np.ndarray, np.ndarray]:
        if idx is None:
            return self.shard.features, self.shard.labels
        return self.shard.features[idx], self.shard.labels[idx]

    def _check(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.shape != (self.dim,):
            raise InvalidInput(f"{self.kind} objective expects {self.dim} parameters, got {x.shape}")
        return x


class QuadraticObjective(Objective):
    kind = "quadratic"

    def __init__(self, target: np.ndarray):
        target = frozen_array(np.asarray(target, dtype=np.float64).reshape(-1))
        super().__init__(DataShard(target[None, :], np.zeros(1)), target.shape[0])
        self.target = target

    def loss_and_grad(self, x, idx=None):
        diff = self._check(x) - self.target
        return 0.5 * float(diff @ diff), diff


def _sigmoid(z: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * z))


class LogisticObjective(Objective):
    kind = "logistic"

    def __init__(self, shard: DataShard, l2: float = LOGISTIC_L2):
        super().__init__(shard, shard.features.shape[1])
        self.l2 = l2

    def loss_and_grad(self, x, idx=None):
        w = self._check(x)
        X, y = self._batch(idx)
        z = X @ w
        # log(1 + e^z) - y z, stable for large |z|
        data_loss = float(np.mean(np.logaddexp(0.0, z) - y * z))
        grad = X.T @ (_sigmoid(z) - y) / X.shape[0] + self.l2 * w
        return data_loss + 0.5 * self.l2 * float(w @ w), grad


def mlp_size(n_features: int, hidden: int, n_classes: int) -> int:
    return hidden * n_features + hidden + n_classes * hidden + n_classes


class MlpObjective(Objective):
    kind = "mlp"

    def __init__(self, shard: DataShard, hidden: int, n_classes: int):
        self.n_features = shard.features.shape[1]
        self.hidden = hidden
        self.n_classes = n_classes
        super().__init__(shard, mlp_size(self.n_features, hidden, n_classes))

    def unpack(self, x: np.ndarray):
        d, h, k = self.n_features, self.hidden, self.n_classes
        o1, o2, o3 = h * d, h * d + h, h * d + h + k * h
        return x[:o1].reshape(h, d), x[o1:o2], x[o2:o3].reshape(k, h), x[o3:]

    def initial_point(self, rng: np.random.Generator) -> np.ndarray:
        x = np.zeros(self.dim)
        w1, _, w2, _ = self.unpack(x)
        w1[...] = rng.normal(scale=1.0 / np.sqrt(self.n_features), size=w1.shape)
        w2[...] = rng.normal(scale=1.0 / np.sqrt(self.hidden), size=w2.shape)
        return x

    def predict_proba(self, x, features: np.ndarray) -> np.ndarray:
        w1, b1, w2, b2 = self.unpack(self._check(x))
        logits = np.tanh(features @ w1.T + b1) @ w2.T + b2
        logits -= logits.max(axis=1, keepdims=True)
        p = np.exp(logits)
        return p / p.sum(axis=1, keepdims=True)

    def loss_and_grad(self, x, idx=None):
        x = self._check(x)
        w1, b1, w2, b2 = self.unpack(x)
        X, y = self._batch(idx)
        m = X.shape[0]
        labels = y.astype(np.int64)

        hidden = np.tanh(X @ w1.T + b1)
        logits = hidden @ w2.T + b2
        logits -= logits.max(axis=1, keepdims=True)
        log_p = logits - np.log(np.exp(logits).sum(axis=1, keepdims=True))
        loss = -float(np.mean(log_p[np.arange(m), labels]))

        d_logits = np.exp(log_p)
        d_logits[np.arange(m), labels] -= 1.0
        d_logits /= m
        d_hidden = (d_logits @ w2) * (1.0 - hidden ** 2)

        grad = np.zeros_like(x)
        g1, gb1, g2, gb2 = self.unpack(grad)
        g2[...] = d_logits.T @ hidden
        gb2[...] = d_logits.sum(axis=0)
        g1[...] = d_hidden.T @ X
        gb1[...] = d_hidden.sum(axis=0)
        return loss, grad


# ---- Objective sets ----
@dataclass(frozen=True, eq=False)
class ObjectiveSet:
    objectives: Tuple[Objective, ...]
    optimum: Optional[np.ndarray] = None

    @property
    def n_workers(self) -> int:
        return len(self.objectives)

    @property
    def dim(self) -> int:
        return self.objectives[0].dim

    @property
    def kind(self) -> str:
        return self.objectives[0].kind

    def global_loss(self, x: ParameterVector) -> float:
        return float(np.mean([o.loss(x) for o in self.objectives]))

    def global_gradient(self, x: ParameterVector) -> np.ndarray:
        return np.mean([o.gradient(x) for o in self.objectives], axis=0)

    def heterogeneity(self, x: ParameterVector) -> float:
        """(1/n) sum_i ||grad f_i(x) - grad f(x)||^2 at ``x``."""
        grads = np.array([o.gradient(x) for o in self.objectives])
        return float(np.mean(np.sum((grads - grads.mean(axis=0)) ** 2, axis=1)))

    @property
    def f_star(self) -> Optional[float]:
        return None if self.optimum is None else self.global_loss(self.optimum)

    def initial_point(self, rng: np.random.Generator) -> np.ndarray:
        first = self.objectives[0]
        if isinstance(first, MlpObjective):
            return first.initial_point(rng)
        return np.zeros(self.dim)


def quadratic_from_targets(targets: Sequence[Sequence[float]]) -> ObjectiveSet:
    b = np.atleast_2d(np.asarray(targets, dtype=np.float64))
    if b.shape[1] < 1:
        raise InvalidInput("model dimension must be >= 1")
    objectives = tuple(QuadraticObjective(row) for row in b)
    return ObjectiveSet(objectives, optimum=frozen_array(b.mean(axis=0)))


def make_quadratic(
    n_workers: int,
    N: int,
    rng: np.random.Generator,
    spread: float = 1.0,
    centre: Optional[Union[float, Sequence[float]]] = None,
) -> ObjectiveSet:
    """Targets b_i = centre + spread * xi_i with xi_i standard normal."""
    if N < 1:
        raise InvalidInput(f"model dimension must be >= 1, got {N}")
    base = rng.normal(size=N) if centre is None else np.broadcast_to(np.asarray(centre, dtype=np.float64), (N,))
    return quadratic_from_targets(base + spread * rng.normal(size=(n_workers, N)))


def gaussian_clusters(
    n_samples: int,
    n_features: int,
    n_classes: int,
    rng: np.random.Generator,
    separation: float = 1.0,
) -> Tuple[np.ndarray, np.ndarray]:
    labels = rng.integers(0, n_classes, size=n_samples)
    means = rng.normal(scale=separation, size=(n_classes, n_features))
    features = means[labels] + rng.normal(size=(n_samples, n_features))
    return features, labels.astype(np.float64)


def _shards(features, labels, n_workers, partition, rng, skew) -> List[DataShard]:
    parts = partition_indices(labels, n_workers, partition, rng, skew)
    return [DataShard(frozen_array(features[p]), frozen_array(labels[p]), partition) for p in parts]


def make_logistic(
    n_workers: int,
    n_samples: int,
    N: int,
    partition: str,
    rng: np.random.Generator,
    skew: float = 0.8,
    separation: float = 1.0,
) -> ObjectiveSet:
    """Two Gaussian classes in N dimensions; the last feature is a constant bias."""
    if n_samples < n_workers:
        raise InvalidInput(f"n_samples ({n_samples}) must be >= n_workers ({n_workers})")
    if N < 1:
        raise InvalidInput(f"model dimension must be >= 1, got {N}")
    features, labels = gaussian_clusters(n_samples, N, 2, rng, separation)
    if N > 1:
        features[:, -1] = 1.0
    shards = _shards(features, labels, n_workers, partition, rng, skew)
    return ObjectiveSet(tuple(LogisticObjective(s) for s in shards))


def make_mlp(
    n_workers: int,
    n_samples: int,
    n_features: int,
    hidden: int,
    n_classes: int,
    partition: str,
    rng: np.random.Generator,
    skew: float = 0.8,
    separation: float = 2.0,
) -> ObjectiveSet:
    if n_samples < n_workers:
        raise InvalidInput(f"n_samples ({n_samples}) must be >= n_workers ({n_workers})")
    if hidden < 1 or n_classes < 2:
        raise InvalidInput("mlp needs hidden >= 1 and n_classes >= 2")
    features, labels = gaussian_clusters(n_samples, n_features, n_classes, rng, separation)
    shards = _shards(features, labels, n_workers, partition, rng, skew)
    return ObjectiveSet(tuple(MlpObjective(s, hidden, n_classes) for s in shards))


def logistic_from_matrix(
    matrix: np.ndarray,
    n_workers: int,
    partition: str,
    rng: np.random.Generator,
    skew: float = 0.8,
) -> ObjectiveSet:
    """Rows of ``matrix`` are samples; the last column holds the 0/1 label."""
    matrix = np.asarray(matrix, dtype=np.float64)
    if matrix.ndim != 2 or matrix.shape[1] < 2:
        raise InvalidInput("dataset matrix needs at least one feature column and a label column")
    labels = matrix[:, -1]
    if not np.all(np.isin(labels, (0.0, 1.0))):
        raise InvalidInput("logistic labels must be 0 or 1")
    shards = _shards(matrix[:, :-1], labels, n_workers, partition, rng, skew)
    return ObjectiveSet(tuple(LogisticObjective(s) for s in shards))


# ---- Binary matrix files ----
def save_matrix_file(path: Union[str, Path], matrix: np.ndarray) -> None:
    matrix = np.atleast_2d(np.asarray(matrix, dtype="<f8"))
    rows, cols = matrix.shape
    with open(path, "wb") as fh:
        fh.write(_MATRIX_HEADER.pack(cols, rows))
        fh.write(np.ascontiguousarray(matrix).tobytes())


def load_matrix_file(path: Union[str, Path]) -> np.ndarray:
    data = Path(path).read_bytes()
    if len(data) < _MATRIX_HEADER.size:
        raise InvalidInput(f"{path}: missing matrix header")
    cols, rows = _MATRIX_HEADER.unpack_from(data)
    expected = _MATRIX_HEADER.size + 8 * rows * cols
    if len(data) != expected:
        raise InvalidInput(f"{path}: header declares {rows}x{cols} values, file holds {len(data)} bytes")
    values = np.frombuffer(data, dtype="<f8", offset=_MATRIX_HEADER.size).astype(np.float64)
    if not np.all(np.isfinite(values)):
        raise InvalidInput(f"{path}: matrix contains NaN or Inf")
    logger.debug("loaded %dx%d matrix from %s", rows, cols, path)
    return values.reshape(rows, cols)
