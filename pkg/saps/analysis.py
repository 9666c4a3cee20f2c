"""Metrics and theory checks.

Spectral estimation of the mixing rate, consensus-contraction measurement,
the consensus constants and convergence bound, bandwidth utilization and the
per-round CSV export.

Conventions: ``X`` in the matrix helpers is N x n (one column per worker), as
in the gossip recursion X_{t+1} = Y_t o not(M_t) + (Y_t o M_t) W_t.
``consensus_error`` takes the models stacked one per row.
"""
import csv
import io
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np

from .core import AdjacencyMatrix, BandwidthMatrix, CompressionConfig, Matching, SplitMix64, TheoryConstants
from .errors import DomainError, InvalidInput, NumericalError
from .matching import GossipGenerator, PeerSelection
from .sparsify import generate_mask

logger = logging.getLogger(__name__)

CSV_HEADER = ("round", "pairs", "bytes_per_worker", "min_bw", "mean_bw", "consensus_err", "mean_loss", "cum_time")
FLOAT_FLOOR = 1e-20

GeneratorFactory = Callable[[np.random.Generator], GossipGenerator]


# ---- Round records ----
@dataclass(frozen=True)
class RoundRecord:
    round: int
    pairs: int
    bytes_per_worker: float
    min_bw: float
    mean_bw: float
    consensus_err: Optional[float]  # None when the models are not observable (TCP)
    mean_loss: float
    cum_time: float

    def as_dict(self) -> dict:
        return asdict(self)


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (int, np.integer)) and not isinstance(v, bool):
        return str(int(v))
    return format(float(v), ".17g")


def records_to_csv(records: Iterable[RoundRecord]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_HEADER)
    for r in records:
        writer.writerow([_fmt(getattr(r, name)) for name in CSV_HEADER])
    return buf.getvalue()


def export_csv(records: Iterable[RoundRecord], path: Union[str, Path]) -> Path:
    path = Path(path)
    path.write_text(records_to_csv(records), encoding="utf-8")
    return path


def round_bandwidth(b: BandwidthMatrix, matching: Matching) -> Tuple[float, float]:
    """(min, mean) link speed over the matched pairs; (0, 0) without pairs."""
    speeds = b.link_speeds(matching.sorted_pairs())
    if not speeds:
        return 0.0, 0.0
    return min(speeds), math.fsum(speeds) / len(speeds)


# ---- Consensus helpers ----
def consensus_error(models) -> float:
    """sum_i ||x_i - x_bar||^2 over models stacked one per row."""
    x = np.asarray(models, dtype=np.float64)
    return float(np.sum((x - x.mean(axis=0)) ** 2))


def mean_preservation_gap(before, after) -> float:
    """Largest change of the across-worker mean (rows are workers)."""
    return float(np.max(np.abs(np.mean(after, axis=0) - np.mean(before, axis=0))))


def commutation_gap(a: np.ndarray, mask: np.ndarray, w: np.ndarray) -> float:
    """max |(A o M) W - (A W) o M| for M with every column equal to ``mask``."""
    m = np.broadcast_to(np.asarray(mask, dtype=np.float64)[:, None], a.shape)
    return float(np.max(np.abs((a * m) @ w - (a @ w) * m)))


def reference_step(x: np.ndarray, grads: np.ndarray, gamma: float, mask: np.ndarray, w: np.ndarray) -> np.ndarray:
    """One round of the monolithic recursion, SGD first then masked mixing."""
    y = x - gamma * grads
    m = np.asarray(mask, dtype=bool)[:, None]
    return np.where(m, y @ w, y)


# ---- Spectral estimation ----
@dataclass(frozen=True)
class SpectralEstimate:
    rho: float  # second eigenvalue of the sampled mean of W^T W
    n_samples: int
    std_error: float

    @property
    def upper(self) -> float:
        return min(1.0, self.rho + 3.0 * self.std_error)


def second_eigenvalue(a: np.ndarray, tol: float = 1e-10, max_iter: int = 100_000) -> float:
    """Second eigenvalue of a symmetric doubly stochastic PSD matrix.

    Power iteration on ``a - u u^T`` with u = 1/sqrt(n); the deflated matrix
    keeps every other eigenpair of ``a``.
    """
    a = np.asarray(a, dtype=np.float64)
    n = a.shape[0]
    u = np.full(n, 1.0 / math.sqrt(n))
    d = a - np.outer(u, u)
    d = 0.5 * (d + d.T)

    v = np.random.default_rng(0).normal(size=n)
    v -= v.mean()
    v /= np.linalg.norm(v)
    for _ in range(max_iter):
        w = d @ v
        lam = float(v @ w)
        if np.linalg.norm(w - lam * v) <= tol:
            return min(max(lam, 0.0), 1.0)
        norm = np.linalg.norm(w)
        if norm <= tol:
            return 0.0
        v = w / norm
    raise NumericalError(f"power iteration did not reach residual {tol} in {max_iter} steps")


def estimate_rho(
    generator: GossipGenerator,
    n_samples: int,
    warmup: Optional[int] = None,
    batches: int = 10,
) -> SpectralEstimate:
    """Sample the running generator and estimate the second eigenvalue of E[W^T W].

    The generator is advanced ``warmup`` rounds (default 10 * T_thres) first
    so the samples come from stationary operation. The standard error comes
    from ``batches`` batch means.
    """
    if n_samples < 100:
        raise InvalidInput(f"n_samples must be >= 100, got {n_samples}")
    warmup = 10 * generator.t_thres if warmup is None else warmup
    t = 0
    for _ in range(warmup):
        generator.next_round(t)
        t += 1

    n = generator.n
    products = np.empty((n_samples, n, n))
    for k in range(n_samples):
        w = generator.next_round(t).matrix.weights
        products[k] = w.T @ w
        t += 1

    rho = second_eigenvalue(products.mean(axis=0))
    batch_rhos = [second_eigenvalue(chunk.mean(axis=0)) for chunk in np.array_split(products, batches)]
    se = float(np.std(batch_rhos, ddof=1) / math.sqrt(batches)) if batches > 1 else 0.0
    if rho > 1.0 - 1e-9:
        logger.warning("estimated rho = %.12f: possible-communication graph looks disconnected", rho)
    return SpectralEstimate(rho=rho, n_samples=n_samples, std_error=se)


# ---- Contraction ----
def contraction_factor(c: int, rho: float) -> float:
    cfg = CompressionConfig(c)
    return cfg.q + cfg.p * rho


@dataclass(frozen=True)
class ContractionResult:
    n: int
    c: int
    ratios: List[float]  # mean e_t / e_0, t = 0..t_max
    bound: List[float]
    estimate: SpectralEstimate
    std_errors: List[float] = field(default_factory=list)
    slack: float = 1.1
    violations: List[int] = field(default_factory=list)
    z: float = 3.0

    @property
    def holds(self) -> bool:
        return not self.violations

    def threshold(self, t: int) -> float:
        return self.slack * self.bound[t] + self.z * self.std_errors[t]

    def describe_violation(self, t: int) -> str:
        return (
            f"n={self.n} c={self.c}: mean e_t/e_0 = {self.ratios[t]:.3e} > "
            f"{self.slack} x {self.bound[t]:.3e} + {self.z} x SE {self.std_errors[t]:.3e} "
            f"= {self.threshold(t):.3e} at t={t}"
        )


def measure_contraction(
    n: int,
    c: int,
    generator_factory: GeneratorFactory,
    t_max: int,
    n_trials: int,
    rng: np.random.Generator,
    n_dims: int = 32,
    rho_samples: int = 1000,
    slack: float = 1.1,
    z: float = 3.0,
) -> ContractionResult:
    """Pure sparsified gossip from random X_0, averaged over independent trials.

    Each trial owns its generator and seed stream. The bound at round t is
    (q + p * rho_up)^t with rho_up the upper confidence value of the
    spectral estimate, floored at FLOAT_FLOOR. A round violates it when the
    trial mean exceeds ``slack * bound + z * SE``; the SE term absorbs the
    sampling noise once only a few coordinates stay unmixed.
    """
    if n_trials < 100:
        raise InvalidInput(f"n_trials must be >= 100, got {n_trials}")
    seeds = np.random.SeedSequence(int(rng.integers(2 ** 63))).spawn(n_trials + 1)

    estimate = estimate_rho(generator_factory(np.random.default_rng(seeds[-1])), rho_samples)
    factor = contraction_factor(c, estimate.upper)

    generators = [generator_factory(np.random.default_rng(s)) for s in seeds[:-1]]
    if generators[0].n != n:
        raise InvalidInput(f"generator factory builds {generators[0].n} workers, expected {n}")
    warmup = 10 * generators[0].t_thres
    for g in generators:
        for t in range(warmup):
            g.next_round(t)
    mask_seeds = [SplitMix64(int(v)) for v in rng.integers(0, 2 ** 63, size=n_trials)]

    x = rng.normal(size=(n_trials, n_dims, n))
    e0 = np.sum((x - x.mean(axis=2, keepdims=True)) ** 2, axis=(1, 2))
    ratios = [1.0]
    std_errors = [0.0]
    w = np.empty((n_trials, n, n))
    masks = np.empty((n_trials, n_dims), dtype=bool)
    for t in range(t_max):
        for k, g in enumerate(generators):
            w[k] = g.next_round(warmup + t).matrix.weights
            masks[k] = generate_mask(mask_seeds[k].next_u64(), c, n_dims).bits
        x = np.where(masks[:, :, None], x @ w, x)
        e = np.sum((x - x.mean(axis=2, keepdims=True)) ** 2, axis=(1, 2))
        r = e / e0
        ratios.append(math.fsum(r.tolist()) / n_trials)
        std_errors.append(float(np.std(r, ddof=1)) / math.sqrt(n_trials))

    bound = [max(factor ** t, FLOAT_FLOOR) for t in range(t_max + 1)]
    result = ContractionResult(n, c, ratios, bound, estimate, std_errors, slack, z=z)
    violations = [t for t in range(t_max + 1) if ratios[t] > result.threshold(t)]
    if violations:
        logger.warning("contraction n=%d c=%d exceeds bound at %d rounds (first t=%d)", n, c, len(violations), violations[0])
    return replace(result, violations=violations)


# ---- Consensus constants and convergence bound ----
def d_constants(p: float, rho: float) -> Tuple[float, float]:
    """D1 = 2 / (1 - sqrt(q + p rho))^2 and D2 = 2 / (1 - (q + p rho^2))."""
    if not 0.0 < p <= 1.0:
        raise DomainError(f"p must lie in (0, 1], got {p}: no mixing happens at p = 0")
    if not 0.0 <= rho < 1.0:
        raise DomainError(f"rho must lie in [0, 1), got {rho}")
    q = 1.0 - p
    a = q + p * rho
    b = q + p * rho ** 2
    if a >= 1.0 or b >= 1.0:
        raise DomainError("contraction factor reaches 1; consensus constants are unbounded")
    return 2.0 / (1.0 - math.sqrt(a)) ** 2, 2.0 / (1.0 - b)


@dataclass(frozen=True)
class BoundTerms:
    noise: float
    optimality: float
    heterogeneity: float
    initial_consensus: float

    @property
    def total(self) -> float:
        return self.noise + self.optimality + self.heterogeneity + self.initial_consensus


def bound_terms(k: TheoryConstants, n: int, T: int, D1: float, D2: float, x0_consensus: float) -> BoundTerms:
    if k.sigma <= 0:
        raise DomainError("sigma must be > 0: the step size the bound assumes divides by sigma")
    if T < 1 or n < 1:
        raise DomainError(f"need n >= 1 and T >= 1, got n={n}, T={T}")
    s, z, L, gap = k.sigma, k.zeta, k.lipschitz, k.f0_minus_fstar
    return BoundTerms(
        noise=(6 * s * gap + 3 * s) / (2 * math.sqrt(n * T)),
        optimality=(6 * math.sqrt(3) * L * gap + 2 * L ** 2 * D1 * n) / T,
        heterogeneity=3 * L ** 2 * D1 * n * z ** 2 / (s ** 2 * T),
        initial_consensus=2 * L ** 2 * D2 * x0_consensus / (n * T),
    )


def theorem_bound(k: TheoryConstants, n: int, T: int, D1: float, D2: float, x0_consensus: float) -> float:
    """Right-hand side of the averaged squared-gradient-norm bound."""
    return bound_terms(k, n, T, D1, D2, x0_consensus).total


def bound_step_size(k: TheoryConstants, n: int, T: int, D1: float) -> float:
    """Constant step size under which the bound is stated. Informational only."""
    if k.sigma <= 0 and k.lipschitz <= 0:
        raise DomainError("step size is undefined when sigma and L are both 0")
    return 1.0 / (2 * math.sqrt(3 * D1) * k.lipschitz + k.sigma * math.sqrt(T) / math.sqrt(n))


# ---- Bandwidth utilization ----
@dataclass(frozen=True)
class BandwidthStats:
    per_round: List[Tuple[int, float, float]]  # (round, min, mean)
    mean_min: float
    mean_mean: float


def bandwidth_stats(records: Sequence[RoundRecord]) -> BandwidthStats:
    if not records:
        raise InvalidInput("bandwidth_stats needs at least one round record")
    active = [r for r in records if r.pairs > 0]
    per_round = [(r.round, r.min_bw, r.mean_bw) for r in active]
    if not active:
        return BandwidthStats(per_round, 0.0, 0.0)
    return BandwidthStats(
        per_round,
        math.fsum(r.min_bw for r in active) / len(active),
        math.fsum(r.mean_bw for r in active) / len(active),
    )


def compare_peer_selection(
    bandwidth: BandwidthMatrix,
    b_star: AdjacencyMatrix,
    rounds: int,
    t_thres: int,
    seed: int,
    modes: Sequence[PeerSelection] = tuple(PeerSelection),
) -> Dict[str, float]:
    """Run-mean bottleneck bandwidth per peer-selection mode on one matrix."""
    out = {}
    for mode in modes:
        gen = GossipGenerator(bandwidth, b_star, t_thres, np.random.default_rng(seed), PeerSelection(mode))
        bottlenecks = []
        for t in range(rounds):
            low, _ = round_bandwidth(bandwidth, gen.next_round(t).matching)
            bottlenecks.append(low)
        out[PeerSelection(mode).value] = math.fsum(bottlenecks) / max(rounds, 1)
    return out
