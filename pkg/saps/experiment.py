"""Experiment runner: config parsing, problem and fleet construction, the
end-to-end run over either transport, and the verification suite.

All randomness derives from ``master_seed``. The coordinator owns
SplitMix64(master_seed) for round seeds and ``default_rng(master_seed)`` for
peer selection; everything else uses ``SeedSequence([master_seed, tag, ...])``
streams so adding a worker never reshuffles another worker's mini-batches.
"""
import asyncio
import itertools
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Union

import numpy as np
from pydantic import BaseModel, Field, ValidationError, root_validator, validator

from .analysis import (
    RoundRecord,
    SpectralEstimate,
    bandwidth_stats,
    estimate_rho,
    export_csv,
    commutation_gap,
    measure_contraction,
    records_to_csv,
    reference_step,
)
from .config import Settings, get_settings
from .coordinator.cost import Algorithm, CostModelInput, comm_cost
from .coordinator.run import run_loopback
from .coordinator.state import CoordinatorState, collect_final_model, default_b_thres, get_new_connected_graph, run_round
from .core import AdjacencyMatrix, BandwidthMatrix, GossipMatrix, frozen_array, symmetrize_bandwidth
from .errors import ChecksumMismatch, ConfigurationError, InvalidInput, SapsError
from .matching import GossipGenerator, PeerSelection, max_matching
from .objectives import (
    PARTITIONS,
    ObjectiveSet,
    load_matrix_file,
    logistic_from_matrix,
    make_logistic,
    make_mlp,
    make_quadratic,
    mlp_size,
)
from .sparsify import VALUE_BYTES, SparsePayload, generate_mask
from .transport.messages import BandwidthReport, Hello, ModelFull, PeerTable, RoundEnd, RoundStart, decode_message, encode_message
from .transport.sim import SimFleet, SimNetwork
from .utils import log_event
from .worker.node import WorkerState

logger = logging.getLogger(__name__)

DATA_DIR = Path(__file__).parent / "data"
FOURTEEN_CITIES = DATA_DIR / "fourteen_cities.json"

# SeedSequence tags for the derived streams
_BANDWIDTH, _PROBLEM, _WORKER, _INIT, _RHO = range(5)


def _stream(master_seed: int, *tags: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([master_seed, *tags]))


# =====================
# Config
# =====================
class ObjectiveSpec(BaseModel):
    kind: str = "quadratic"
    # quadratic
    spread: float = 1.0
    centre: Optional[float] = None
    # logistic / mlp
    n_samples: int = 1000
    batch_size: Optional[int] = None
    separation: float = 1.0
    skew: float = 0.8
    dataset_file: Optional[str] = None
    # mlp
    n_features: int = 8
    hidden: int = 16
    n_classes: int = 3

    class Config:
        extra = "forbid"

    @validator("kind")
    def _kind(cls, v):
        if v not in ("quadratic", "logistic", "mlp"):
            raise ValueError("kind must be quadratic, logistic or mlp")
        return v

    @validator("n_samples", "n_features", "hidden")
    def _positive(cls, v, field):
        if v < 1:
            raise ValueError(f"{field.name} must be >= 1")
        return v

    @validator("batch_size")
    def _batch(cls, v):
        if v is not None and v < 1:
            raise ValueError("batch_size must be >= 1")
        return v

    @validator("n_classes")
    def _classes(cls, v):
        if v < 2:
            raise ValueError("n_classes must be >= 2")
        return v

    @validator("skew")
    def _skew(cls, v):
        if not 0.0 <= v <= 1.0:
            raise ValueError("skew must lie in [0, 1]")
        return v

    @validator("spread")
    def _spread(cls, v):
        if v < 0:
            raise ValueError("spread must be >= 0")
        return v


class BandwidthSpec(BaseModel):
    source: str = "uniform"
    path: Optional[str] = None
    # Uniform(lo, hi] bytes/second
    lo: float = 0.0
    hi: float = 5e6

    class Config:
        extra = "forbid"

    @validator("source")
    def _source(cls, v):
        if v not in ("file", "uniform", "fourteen_cities"):
            raise ValueError("source must be file, uniform or fourteen_cities")
        return v

    @root_validator(skip_on_failure=True)
    def _range(cls, values):
        lo, hi = values["lo"], values["hi"]
        if lo < 0 or not hi > lo:
            raise ValueError(f"uniform bandwidth needs 0 <= lo < hi, got ({lo}, {hi}]")
        if values["source"] == "file" and not values.get("path"):
            raise ValueError("bandwidth source 'file' needs a path")
        return values


class ExperimentConfig(BaseModel):
    n: int
    N: int
    T: int
    c: int = 1
    gamma: float = 0.05
    T_thres: int = Field(default_factory=lambda: get_settings().DEFAULT_T_THRES)
    B_thres: Optional[float] = None
    master_seed: int = 0
    objective: ObjectiveSpec = ObjectiveSpec()
    partition: str = "iid"
    transport: str = "sim"
    peer_selection: PeerSelection = PeerSelection.ADAPTIVE
    bandwidth: BandwidthSpec = BandwidthSpec()
    rho_samples: int = 200  # 0 skips the rho estimate in the summary

    class Config:
        extra = "forbid"

    @validator("n")
    def _workers(cls, v):
        if v < 2:
            raise ValueError("n must be >= 2")
        return v

    @validator("N", "T", "c", "T_thres")
    def _at_least_one(cls, v, field):
        if v < 1:
            raise ValueError(f"{field.name} must be >= 1")
        return v

    @validator("gamma")
    def _gamma(cls, v):
        if not math.isfinite(v) or v < 0:
            raise ValueError("gamma must be finite and >= 0")
        return v

    @validator("B_thres")
    def _b_thres(cls, v):
        if v is not None and v < 0:
            raise ValueError("B_thres must be >= 0")
        return v

    @validator("master_seed")
    def _seed(cls, v):
        if not 0 <= v < 2 ** 64:
            raise ValueError("master_seed must fit in 64 unsigned bits")
        return v

    @validator("partition")
    def _partition(cls, v):
        if v not in PARTITIONS:
            raise ValueError(f"partition must be one of {PARTITIONS}")
        return v

    @validator("transport")
    def _transport(cls, v):
        if v not in ("sim", "tcp"):
            raise ValueError("transport must be sim or tcp")
        return v

    @validator("rho_samples")
    def _rho(cls, v):
        if v != 0 and v < 100:
            raise ValueError("rho_samples must be 0 or >= 100")
        return v

    @root_validator(skip_on_failure=True)
    def _consistent(cls, values):
        spec: ObjectiveSpec = values["objective"]
        if spec.kind == "mlp":
            size = mlp_size(spec.n_features, spec.hidden, spec.n_classes)
            if values["N"] != size:
                raise ValueError(f"mlp with these layers has N = {size}, config says {values['N']}")
        if spec.kind != "quadratic" and spec.dataset_file is None and spec.n_samples < values["n"]:
            raise ValueError("objective.n_samples must be >= n")
        if values["bandwidth"].source == "fourteen_cities" and values["n"] != 14:
            raise ValueError("the fourteen_cities preset needs n = 14")
        return values


def load_config(source: Union[str, Path, Dict[str, Any]], **overrides) -> ExperimentConfig:
    """Parse a JSON file or dict into an ExperimentConfig; errors become InvalidInput."""
    try:
        if isinstance(source, dict):
            data = dict(source)
        else:
            data = json.loads(Path(source).read_text())
        data.update({k: v for k, v in overrides.items() if v is not None})
        return ExperimentConfig.parse_obj(data)
    except ValidationError as exc:
        raise InvalidInput(f"invalid experiment config: {exc}") from exc
    except (OSError, json.JSONDecodeError) as exc:
        raise InvalidInput(f"cannot read experiment config: {exc}") from exc


# =====================
# Builders
# =====================
def uniform_bandwidth(n: int, lo: float, hi: float, rng: np.random.Generator) -> BandwidthMatrix:
    """Symmetric speeds drawn from Uniform(lo, hi]."""
    raw = np.zeros((n, n))
    iu = np.triu_indices(n, k=1)
    raw[iu] = hi - rng.uniform(0.0, hi - lo, size=len(iu[0]))
    return symmetrize_bandwidth(raw + raw.T)


def load_bandwidth_file(path: Union[str, Path]) -> BandwidthMatrix:
    """JSON: either a bare n x n list or an object with ``matrix`` and optional ``scale``."""
    try:
        data = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigurationError(f"cannot read bandwidth file {path}: {exc}") from exc
    scale = 1.0
    if isinstance(data, dict):
        scale = float(data.get("scale", 1.0))
        data = data.get("matrix")
    if data is None:
        raise ConfigurationError(f"{path}: no bandwidth matrix")
    return symmetrize_bandwidth(np.asarray(data, dtype=np.float64) * scale)


def build_bandwidth(config: ExperimentConfig) -> BandwidthMatrix:
    spec = config.bandwidth
    if spec.source == "uniform":
        return uniform_bandwidth(config.n, spec.lo, spec.hi, _stream(config.master_seed, _BANDWIDTH))
    b = load_bandwidth_file(FOURTEEN_CITIES if spec.source == "fourteen_cities" else spec.path)
    if b.n != config.n:
        raise ConfigurationError(f"bandwidth matrix is {b.n} x {b.n}, config has n = {config.n}")
    return b


def build_problem(config: ExperimentConfig) -> ObjectiveSet:
    spec = config.objective
    rng = _stream(config.master_seed, _PROBLEM)
    if spec.kind == "quadratic":
        problem = make_quadratic(config.n, config.N, rng, spread=spec.spread, centre=spec.centre)
    elif spec.kind == "logistic" and spec.dataset_file is not None:
        problem = logistic_from_matrix(load_matrix_file(spec.dataset_file), config.n, config.partition, rng, spec.skew)
    elif spec.kind == "logistic":
        problem = make_logistic(config.n, spec.n_samples, config.N, config.partition, rng, spec.skew, spec.separation)
    else:
        problem = make_mlp(
            config.n, spec.n_samples, spec.n_features, spec.hidden, spec.n_classes,
            config.partition, rng, spec.skew, spec.separation,
        )
    if problem.dim != config.N:
        raise InvalidInput(f"objective has dimension {problem.dim}, config says N = {config.N}")
    return problem


def build_workers(config: ExperimentConfig, problem: ObjectiveSet) -> List[WorkerState]:
    x0 = frozen_array(problem.initial_point(_stream(config.master_seed, _INIT)))
    return [
        WorkerState(
            rank=rank,
            x=x0,
            gamma=config.gamma,
            c=config.c,
            objective=problem.objectives[rank],
            rng=_stream(config.master_seed, _WORKER, rank),
            batch_size=config.objective.batch_size,
        )
        for rank in range(config.n)
    ]


def build_coordinator(config: ExperimentConfig, bandwidth: BandwidthMatrix) -> CoordinatorState:
    return CoordinatorState(
        bandwidth,
        n_dims=config.N,
        c=config.c,
        master_seed=config.master_seed,
        t_thres=config.T_thres,
        b_thres=config.B_thres,
        mode=config.peer_selection,
    )


def estimate_for_config(config: ExperimentConfig, samples: int) -> SpectralEstimate:
    """rho of the configured peer selection on the configured bandwidth matrix."""
    bandwidth = build_bandwidth(config)
    b_thres = default_b_thres(bandwidth) if config.B_thres is None else config.B_thres
    generator = GossipGenerator(
        bandwidth,
        get_new_connected_graph(bandwidth, b_thres),
        config.T_thres,
        _stream(config.master_seed, _RHO),
        config.peer_selection,
    )
    return estimate_rho(generator, samples)


# =====================
# Running
# =====================
@dataclass(frozen=True)
class ExperimentSummary:
    rounds: int
    final_loss: float
    f_star: Optional[float]
    distance_to_optimum: Optional[float]
    worker_values: float  # values sent plus received, mean per worker
    peer_traffic_bytes: float
    coordinator_model_bytes: int
    comm_time: float
    mean_bottleneck_bw: float
    rho: Optional[float] = None
    rho_std_error: Optional[float] = None

    def as_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass(eq=False)
class ExperimentResult:
    config: ExperimentConfig
    final_model: np.ndarray
    records: List[RoundRecord]
    summary: ExperimentSummary
    worker_models: Optional[np.ndarray] = None  # simulated transport only
    history: list = field(default_factory=list)

    @property
    def csv(self) -> str:
        return records_to_csv(self.records)


def run_experiment(
    config: ExperimentConfig,
    out: Optional[Union[str, Path]] = None,
    settings: Optional[Settings] = None,
) -> ExperimentResult:
    bandwidth = build_bandwidth(config)
    problem = build_problem(config)
    workers = build_workers(config, problem)
    state = build_coordinator(config, bandwidth)
    log_event("experiment_start", {"n": config.n, "N": config.N, "T": config.T, "c": config.c, "transport": config.transport})

    started = time.perf_counter()
    worker_models = None
    if config.transport == "sim":
        fleet = SimFleet(workers, SimNetwork(bandwidth))
        for _ in range(config.T):
            run_round(state, fleet)
        final = collect_final_model(state, fleet)
        worker_models = fleet.models()
    else:
        _, final = asyncio.run(run_loopback(state, workers, config.T, settings))
    elapsed = time.perf_counter() - started

    records = list(state.records)
    worker_bytes = math.fsum(r.bytes_per_worker for r in records)
    estimate = estimate_for_config(config, config.rho_samples) if config.rho_samples else None
    optimum = problem.optimum
    summary = ExperimentSummary(
        rounds=len(records),
        final_loss=problem.global_loss(final),
        f_star=problem.f_star,
        distance_to_optimum=None if optimum is None else float(np.linalg.norm(final - optimum)),
        worker_values=worker_bytes / VALUE_BYTES,
        peer_traffic_bytes=worker_bytes * config.n / 2,
        coordinator_model_bytes=state.model_bytes_received,
        comm_time=state.cum_time,
        mean_bottleneck_bw=bandwidth_stats(records).mean_min,
        rho=None if estimate is None else estimate.rho,
        rho_std_error=None if estimate is None else estimate.std_error,
    )
    if out is not None:
        export_csv(records, out)
    log_event("experiment_end", {**summary.as_dict(), "wall_seconds": round(elapsed, 3)})
    return ExperimentResult(config, final, records, summary, worker_models, list(state.history))


# =====================
# Verification suite
# =====================
@dataclass(frozen=True)
class CheckResult:
    name: str
    passed: bool
    detail: str
    seconds: float


@dataclass
class SuiteReport:
    checks: List[CheckResult] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    @property
    def failures(self) -> List[CheckResult]:
        return [c for c in self.checks if not c.passed]

    def as_text(self) -> str:
        lines = [f"{'PASS' if c.passed else 'FAIL'} {c.name} ({c.seconds:.2f}s): {c.detail}" for c in self.checks]
        lines.append(f"{len(self.checks) - len(self.failures)}/{len(self.checks)} checks passed")
        return "\n".join(lines)


def exhaustive_matching_size(g: AdjacencyMatrix) -> int:
    """Maximum matching cardinality by brute force; small graphs only."""
    edges = g.edge_list()
    best = 0

    def extend(start: int, used: frozenset, size: int) -> None:
        nonlocal best
        best = max(best, size)
        if size + (g.n - len(used)) // 2 <= best:
            return
        for k in range(start, len(edges)):
            i, j = edges[k]
            if i not in used and j not in used:
                extend(k + 1, used | {i, j}, size + 1)

    extend(0, frozenset(), 0)
    return best


def _random_bandwidth(n: int, rng: np.random.Generator, density: float = 1.0) -> BandwidthMatrix:
    raw = np.triu(rng.uniform(0.1, 5.0, size=(n, n)) * (rng.random((n, n)) < density), k=1)
    return symmetrize_bandwidth(raw + raw.T)


def _adaptive_factory(bandwidth: BandwidthMatrix, t_thres: int = 10) -> Callable[[np.random.Generator], GossipGenerator]:
    b_star = get_new_connected_graph(bandwidth, default_b_thres(bandwidth))
    return lambda rng: GossipGenerator(bandwidth, b_star, t_thres, rng)


def check_gossip_invariants(rng: np.random.Generator, count: int, inject_fault: bool = False) -> str:
    sizes = (2, 3, 4, 8, 16, 32)
    per_size = max(1, count // len(sizes))
    for n in sizes:
        bandwidth = _random_bandwidth(n, rng)
        gen = _adaptive_factory(bandwidth)(rng)
        for t in range(per_size):
            failed = gen.next_round(t).matrix.check()
            if failed:
                raise AssertionError(f"n={n} round {t}: {', '.join(failed)} violated")
    if inject_fault:
        w = GossipMatrix.from_matching(gen.next_round(per_size).matching).weights.copy()
        w[0, 0] += 0.25
        failed = GossipMatrix(frozen_array(w)).check()
        if failed:
            raise AssertionError(f"injected matrix: {', '.join(failed)} violated")
    return f"{per_size * len(sizes)} matrices doubly stochastic, symmetric and idempotent"


def check_matching_oracle(rng: np.random.Generator, count: int) -> str:
    for k in range(count):
        n = int(rng.integers(2, 11))
        density = (0.2, 0.5, 0.8)[k % 3]
        upper = np.triu(rng.random((n, n)) < density, k=1)
        g = AdjacencyMatrix(upper | upper.T)
        got = len(max_matching(g, order=rng.permutation(n).tolist()))
        want = exhaustive_matching_size(g)
        if got != want:
            raise AssertionError(f"graph {k} (n={n}): blossom found {got} pairs, maximum is {want}")
    return f"{count} random graphs match exhaustive search"


def check_mask_gossip_commute(rng: np.random.Generator, count: int) -> str:
    worst = 0.0
    for _ in range(count):
        n, N = int(rng.integers(2, 9)), int(rng.integers(1, 33))
        bandwidth = _random_bandwidth(n, rng)
        w = _adaptive_factory(bandwidth)(rng).next_round(0).matrix.weights
        mask = generate_mask(int(rng.integers(2 ** 63)), int(rng.integers(1, 5)), N).bits
        worst = max(worst, commutation_gap(rng.normal(size=(N, n)), mask, w))
    if worst > 1e-12:
        raise AssertionError(f"max |(A o M) W - (A W) o M| = {worst:.3e}")
    return f"{count} instances, max gap {worst:.1e}"


def check_contraction(rng: np.random.Generator, quick: bool) -> str:
    grid = itertools.product((2, 4, 8), (1, 10)) if quick else itertools.product((2, 4, 8, 16), (1, 2, 10, 100))
    trials, t_max, samples = (100, 30, 300) if quick else (500, 100, 1000)
    done = 0
    for n, c in grid:
        bandwidth = _random_bandwidth(n, rng)
        result = measure_contraction(n, c, _adaptive_factory(bandwidth), t_max, trials, rng, rho_samples=samples)
        if not result.holds:
            raise AssertionError(result.describe_violation(result.violations[0]))
        done += 1
    return f"{done} (n, c) settings within the contraction bound"


def check_rho_discriminator(rng: np.random.Generator, samples: int) -> str:
    n = 8
    connected = estimate_rho(_adaptive_factory(_random_bandwidth(n, rng))(rng), samples)
    if not connected.rho < 1 - 1e-3:
        raise AssertionError(f"connected graph gave rho = {connected.rho}")
    raw = _random_bandwidth(n, rng).speeds.copy()
    half = n // 2
    raw[:half, half:] = 0.0
    raw[half:, :half] = 0.0
    split = estimate_rho(_adaptive_factory(symmetrize_bandwidth(raw))(rng), samples)
    if abs(split.rho - 1.0) > 1e-9:
        raise AssertionError(f"bipartitioned graph gave rho = {split.rho}")
    return f"connected rho = {connected.rho:.4f}, split rho = {split.rho:.12f}"


def check_cost_model() -> str:
    spots = [
        (CostModelInput(algorithm=Algorithm.SAPS_PSGD, N=100, n=8, T=10, c=10), (100, 200)),
        (CostModelInput(algorithm=Algorithm.PS_PSGD, N=100, n=8, T=10), (16000, 2000)),
        (CostModelInput(algorithm=Algorithm.D_PSGD, N=100, n=8, T=10, n_p=2), (100, 8000)),
    ]
    for inp, want in spots:
        got = comm_cost(inp)
        if tuple(got) != want:
            raise AssertionError(f"{inp.algorithm.value}: got {got}, expected {want}")
    try:
        comm_cost(CostModelInput(algorithm=Algorithm.DCD_PSGD, N=100, n=8, T=10))
    except InvalidInput:
        pass
    else:
        raise AssertionError("dcd-psgd without n_p was accepted")
    return "table rows reproduced"


def check_codec(rng: np.random.Generator) -> str:
    messages = [
        SparsePayload(3, 1, rng.normal(size=5)),
        RoundStart(7, 2 ** 63 + 5, 4),
        RoundStart(7, 11, None),
        RoundEnd(7, 3, 0.125),
        ModelFull(rng.normal(size=4)),
        BandwidthReport(((1, 2.5e6), (2, 1.0))),
        Hello(2, 7102, "10.0.0.2"),
        PeerTable((("127.0.0.1", 7100), ("127.0.0.1", 7101))),
    ]
    for msg in messages:
        frame = encode_message(msg)
        if encode_message(decode_message(frame)) != frame:
            raise AssertionError(f"{type(msg).__name__} does not survive a decode/encode cycle")
    frame = bytearray(encode_message(messages[0]))
    frame[-6] ^= 0xFF
    try:
        decode_message(bytes(frame))
    except ChecksumMismatch:
        pass
    else:
        raise AssertionError("corrupted payload passed the CRC")
    return f"{len(messages)} message kinds, corruption detected"


def check_update_rule(rounds: int = 50) -> str:
    """The distributed run against the monolithic matrix recursion."""
    config = ExperimentConfig(n=6, N=16, T=rounds, c=3, gamma=0.1, master_seed=12345)
    problem = build_problem(config)
    bandwidth = build_bandwidth(config)
    workers = build_workers(config, problem)
    state = build_coordinator(config, bandwidth)
    fleet = SimFleet(workers, SimNetwork(bandwidth))
    x = np.column_stack([w.x for w in workers])
    worst = 0.0
    for _ in range(rounds):
        record_round = state.t
        grads = np.column_stack([o.gradient(x[:, i]) for i, o in enumerate(problem.objectives)])
        run_round(state, fleet)
        log = state.history[record_round]
        mask = generate_mask(log.seed, config.c, config.N).bits
        x = reference_step(x, grads, config.gamma, mask, GossipMatrix.from_matching(log.matching).weights)
        worst = max(worst, float(np.max(np.abs(fleet.models().T - x))))
    if worst > 1e-12:
        raise AssertionError(f"distributed models drift {worst:.3e} from the matrix recursion")
    return f"{rounds} rounds, max deviation {worst:.1e}"


def run_verification_suite(quick: bool = False, seed: int = 2024, inject_fault: bool = False) -> SuiteReport:
    """Run every check, collecting failures instead of stopping at the first."""
    rng = np.random.default_rng(seed)
    checks: List[tuple] = [
        ("gossip_matrix_invariants", lambda: check_gossip_invariants(rng, 600 if quick else 10_000, inject_fault)),
        ("matching_oracle", lambda: check_matching_oracle(rng, 45 if quick else 200)),
        ("mask_gossip_commute", lambda: check_mask_gossip_commute(rng, 100 if quick else 1000)),
        ("consensus_contraction", lambda: check_contraction(rng, quick)),
        ("rho_discriminator", lambda: check_rho_discriminator(rng, 300 if quick else 1000)),
        ("cost_model", check_cost_model),
        ("codec", lambda: check_codec(rng)),
        ("update_rule", lambda: check_update_rule(50)),
    ]
    report = SuiteReport()
    for name, fn in checks:
        started = time.perf_counter()
        try:
            detail, passed = fn(), True
        except (AssertionError, SapsError) as exc:
            detail, passed = str(exc), False
        result = CheckResult(name, passed, detail, time.perf_counter() - started)
        report.checks.append(result)
        log_event("suite_check", {"name": name, "passed": passed, "detail": detail}, logging.INFO if passed else logging.ERROR)
    return report
