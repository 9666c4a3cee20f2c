"""Domain types shared by every module, plus the SplitMix64 generator.

All types are immutable once built: numpy buffers are copied and flagged
read-only, dataclasses are frozen. Anything that "changes" (the timestamp
matrix, a worker's model) is replaced by a new value.
"""
from dataclasses import dataclass, field
from typing import FrozenSet, Iterable, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from .errors import InvalidInput

MASK64 = (1 << 64) - 1
GOLDEN_GAMMA = 0x9E3779B97F4A7C15
_MIX1 = 0xBF58476D1CE4E5B9
_MIX2 = 0x94D049BB133111EB

# Models are f64 in memory and on the wire.
ParameterVector = np.ndarray
Pair = Tuple[int, int]


def frozen_array(a: np.ndarray) -> np.ndarray:
    a = np.array(a, copy=True)
    a.setflags(write=False)
    return a


# ---- SplitMix64 ----
def _mix64(z: int) -> int:
    z = ((z ^ (z >> 30)) * _MIX1) & MASK64
    z = ((z ^ (z >> 27)) * _MIX2) & MASK64
    return z ^ (z >> 31)


def splitmix_stream(seed: int) -> Iterator[int]:
    """Infinite SplitMix64 output stream for ``seed`` (bit-exact reference recurrence)."""
    state = seed & MASK64
    while True:
        state = (state + GOLDEN_GAMMA) & MASK64
        yield _mix64(state)


def splitmix_block(seed: int, count: int, offset: int = 0) -> np.ndarray:
    """Outputs ``offset .. offset+count-1`` of the stream as a uint64 array.

    Output k only depends on seed + (k+1)·gamma, so the block is computed
    without walking the stream. uint64 array arithmetic wraps modulo 2**64.
    """
    if count <= 0:
        return np.zeros(0, dtype=np.uint64)
    k = np.arange(offset + 1, offset + count + 1, dtype=np.uint64)
    z = np.uint64(seed & MASK64) + k * np.uint64(GOLDEN_GAMMA)
    z = (z ^ (z >> np.uint64(30))) * np.uint64(_MIX1)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(_MIX2)
    return z ^ (z >> np.uint64(31))


class SplitMix64:
    """Stateful convenience wrapper; every draw consumes whole stream outputs."""

    def __init__(self, seed: int):
        self.seed = seed & MASK64
        self._state = self.seed

    def next_u64(self) -> int:
        self._state = (self._state + GOLDEN_GAMMA) & MASK64
        return _mix64(self._state)

    def next_below(self, bound: int) -> int:
        # rejection sampling keeps the draw unbiased
        if bound <= 0:
            raise InvalidInput("bound must be positive")
        limit = (1 << 64) - ((1 << 64) % bound)
        while True:
            v = self.next_u64()
            if v < limit:
                return v % bound

    def uniform(self) -> float:
        return (self.next_u64() >> 11) * (1.0 / (1 << 53))

    def permutation(self, n: int) -> List[int]:
        items = list(range(n))
        for i in range(n - 1, 0, -1):
            j = self.next_below(i + 1)
            items[i], items[j] = items[j], items[i]
        return items


# ---- Parameter vectors ----
def parameter_vector(values: Sequence[float], n_dims: Optional[int] = None) -> ParameterVector:
    x = np.asarray(values, dtype=np.float64).reshape(-1)
    if n_dims is not None and x.shape[0] != n_dims:
        raise InvalidInput(f"expected {n_dims} parameters, got {x.shape[0]}")
    if not np.all(np.isfinite(x)):
        raise InvalidInput("parameter vector contains NaN or Inf")
    return frozen_array(x)


# ---- Bandwidth ----
@dataclass(frozen=True, eq=False)
class BandwidthMatrix:
    speeds: np.ndarray  # bytes/second, symmetric, zero diagonal

    @property
    def n(self) -> int:
        return self.speeds.shape[0]

    def __getitem__(self, ij: Pair) -> float:
        return float(self.speeds[ij])

    def positive_graph(self) -> "AdjacencyMatrix":
        return AdjacencyMatrix(self.speeds > 0)

    def positive_values(self) -> np.ndarray:
        iu = np.triu_indices(self.n, k=1)
        v = self.speeds[iu]
        return v[v > 0]

    def link_speeds(self, pairs: Iterable[Pair]) -> List[float]:
        return [float(self.speeds[i, j]) for i, j in pairs]


def symmetrize_bandwidth(raw) -> BandwidthMatrix:
    """B_ij = B_ji = min(raw_ij, raw_ji): the slower direction is the bottleneck."""
    a = np.asarray(raw, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise InvalidInput(f"bandwidth matrix must be square, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise InvalidInput("bandwidth matrix contains NaN or Inf")
    if np.any(a < 0):
        raise InvalidInput("bandwidth matrix contains negative entries")
    b = np.minimum(a, a.T)
    np.fill_diagonal(b, 0.0)
    return BandwidthMatrix(frozen_array(b))


# ---- Graph matrices ----
@dataclass(frozen=True, eq=False)
class AdjacencyMatrix:
    edges: np.ndarray  # bool n×n, symmetric, false diagonal

    def __post_init__(self):
        e = np.asarray(self.edges, dtype=bool)
        if e.ndim != 2 or e.shape[0] != e.shape[1]:
            raise InvalidInput(f"adjacency must be square, got shape {e.shape}")
        e = e | e.T
        e = e.copy()
        np.fill_diagonal(e, False)
        object.__setattr__(self, "edges", frozen_array(e))

    @property
    def n(self) -> int:
        return self.edges.shape[0]

    @classmethod
    def empty(cls, n: int) -> "AdjacencyMatrix":
        return cls(np.zeros((n, n), dtype=bool))

    @classmethod
    def complete(cls, n: int) -> "AdjacencyMatrix":
        return cls(np.ones((n, n), dtype=bool))

    @classmethod
    def from_edges(cls, n: int, edges: Iterable[Pair]) -> "AdjacencyMatrix":
        e = np.zeros((n, n), dtype=bool)
        for i, j in edges:
            e[i, j] = e[j, i] = True
        return cls(e)

    def has_edge(self, i: int, j: int) -> bool:
        return bool(self.edges[i, j])

    def neighbors(self, i: int) -> List[int]:
        return [int(j) for j in np.flatnonzero(self.edges[i])]

    def edge_list(self) -> List[Pair]:
        iu, ju = np.nonzero(np.triu(self.edges, k=1))
        return [(int(i), int(j)) for i, j in zip(iu, ju)]

    def edge_count(self) -> int:
        return int(np.triu(self.edges, k=1).sum())

    def __and__(self, other: "AdjacencyMatrix") -> "AdjacencyMatrix":
        return AdjacencyMatrix(self.edges & other.edges)

    def __or__(self, other: "AdjacencyMatrix") -> "AdjacencyMatrix":
        return AdjacencyMatrix(self.edges | other.edges)


@dataclass(frozen=True)
class Matching:
    n: int
    pairs: FrozenSet[Pair]
    unmatched: FrozenSet[int] = field(default=frozenset())

    @classmethod
    def from_pairs(cls, n: int, pairs: Iterable[Pair]) -> "Matching":
        seen = set()
        norm = set()
        for i, j in pairs:
            i, j = int(i), int(j)
            if i == j or not (0 <= i < n and 0 <= j < n):
                raise InvalidInput(f"invalid pair ({i}, {j}) for n={n}")
            if i in seen or j in seen:
                raise InvalidInput(f"worker appears in two pairs: ({i}, {j})")
            seen.update((i, j))
            norm.add((min(i, j), max(i, j)))
        return cls(n, frozenset(norm), frozenset(set(range(n)) - seen))

    @classmethod
    def empty(cls, n: int) -> "Matching":
        return cls(n, frozenset(), frozenset(range(n)))

    def __len__(self) -> int:
        return len(self.pairs)

    def sorted_pairs(self) -> List[Pair]:
        return sorted(self.pairs)

    def matched(self) -> FrozenSet[int]:
        return frozenset(v for p in self.pairs for v in p)

    def peer_of(self, i: int) -> Optional[int]:
        for a, b in self.pairs:
            if a == i:
                return b
            if b == i:
                return a
        return None

    def peers(self) -> List[Optional[int]]:
        out: List[Optional[int]] = [None] * self.n
        for a, b in self.pairs:
            out[a], out[b] = b, a
        return out

    def union(self, other: "Matching") -> "Matching":
        return Matching.from_pairs(self.n, list(self.pairs) + list(other.pairs))


@dataclass(frozen=True, eq=False)
class TimestampMatrix:
    last_round: np.ndarray  # int64 n×n

    @property
    def n(self) -> int:
        return self.last_round.shape[0]

    @classmethod
    def initial(cls, n: int, t_thres: int) -> "TimestampMatrix":
        # -T_thres: nothing counts as recently connected at round 0
        return cls(frozen_array(np.full((n, n), -int(t_thres), dtype=np.int64)))

    def with_matched(self, matching: Matching, t: int) -> "TimestampMatrix":
        r = np.array(self.last_round, copy=True)
        for i, j in matching.pairs:
            r[i, j] = r[j, i] = t
        return TimestampMatrix(frozen_array(r))

    def recently_connected(self, t_thres: int, t: int) -> AdjacencyMatrix:
        return AdjacencyMatrix(self.last_round > t - t_thres)


# ---- Gossip matrix ----
@dataclass(frozen=True, eq=False)
class GossipMatrix:
    weights: np.ndarray

    @property
    def n(self) -> int:
        return self.weights.shape[0]

    @classmethod
    def from_matching(cls, matching: Matching) -> "GossipMatrix":
        w = np.zeros((matching.n, matching.n), dtype=np.float64)
        for i, j in matching.pairs:
            w[i, i] = w[j, j] = w[i, j] = w[j, i] = 0.5
        for i in matching.unmatched:
            w[i, i] = 1.0
        return cls(frozen_array(w))

    def check(self, tol: float = 1e-12) -> List[str]:
        """Names of violated invariants; empty when the matrix is valid."""
        w = self.weights
        ones = np.ones(self.n)
        failed = []
        if np.max(np.abs(w @ ones - 1.0)) > tol or np.max(np.abs(ones @ w - 1.0)) > tol:
            failed.append("doubly_stochastic")
        if np.max(np.abs(w - w.T)) > tol:
            failed.append("symmetric")
        if np.max(np.abs(w @ w - w)) > tol:
            failed.append("idempotent")
        for row in w:
            nz = row[np.abs(row) > tol]
            if not (len(nz) == 1 and abs(nz[0] - 1.0) <= tol) and not (
                len(nz) == 2 and np.all(np.abs(nz - 0.5) <= tol)
            ):
                failed.append("row_structure")
                break
        return failed


# ---- Compression / theory parameters ----
@dataclass(frozen=True)
class CompressionConfig:
    c: int

    def __post_init__(self):
        if int(self.c) != self.c or self.c < 1:
            raise InvalidInput(f"compression ratio must be an integer >= 1, got {self.c}")

    @property
    def p(self) -> float:
        return 1.0 / self.c

    @property
    def q(self) -> float:
        return 1.0 - 1.0 / self.c


@dataclass(frozen=True)
class TheoryConstants:
    sigma: float
    zeta: float
    lipschitz: float
    f0_minus_fstar: float

    def __post_init__(self):
        for name in ("sigma", "zeta", "lipschitz", "f0_minus_fstar"):
            v = getattr(self, name)
            if not np.isfinite(v) or v < 0:
                raise InvalidInput(f"{name} must be a finite value >= 0, got {v}")
