"""Closed-form communication cost of eight training schemes.

Costs are counted in parameters (not bytes) over a whole run of T rounds:
the server column is what the central node receives and sends, the worker
column what one worker does.
"""
from enum import Enum
from typing import Dict, Optional, Tuple

from pydantic import BaseModel, validator

from ..errors import InvalidInput


class Algorithm(str, Enum):
    PS_PSGD = "ps-psgd"
    ALLREDUCE_PSGD = "allreduce-psgd"
    TOPK_PSGD = "topk-psgd"
    FEDAVG = "fedavg"
    S_FEDAVG = "s-fedavg"
    D_PSGD = "d-psgd"
    DCD_PSGD = "dcd-psgd"
    SAPS_PSGD = "saps-psgd"


# (sparsification, considers bandwidth, robust to network dynamics)
FEATURES: Dict[Algorithm, Tuple[bool, bool, bool]] = {
    Algorithm.PS_PSGD: (False, False, False),
    Algorithm.ALLREDUCE_PSGD: (False, False, False),
    Algorithm.TOPK_PSGD: (True, False, False),
    Algorithm.FEDAVG: (False, False, False),
    Algorithm.S_FEDAVG: (True, False, False),
    Algorithm.D_PSGD: (False, False, False),
    Algorithm.DCD_PSGD: (True, False, False),
    Algorithm.SAPS_PSGD: (True, True, True),
}

NEEDS_NEIGHBORS = (Algorithm.D_PSGD, Algorithm.DCD_PSGD)


class CostModelInput(BaseModel):
    algorithm: Algorithm
    N: int
    n: int
    T: int
    c: float = 1.0
    n_p: Optional[int] = None

    @validator("N", "n", "T")
    def _positive(cls, v, field):
        if v < 1:
            raise ValueError(f"{field.name} must be >= 1")
        return v

    @validator("c")
    def _ratio(cls, v):
        if v < 1:
            raise ValueError("c must be >= 1")
        return v

    @validator("n_p")
    def _neighbors(cls, v):
        if v is not None and v <= 1:
            raise ValueError("n_p must be > 1")
        return v


def comm_cost(inp: CostModelInput) -> Tuple[float, float]:
    """(server_cost, worker_cost) in parameters; 0 where there is no server."""
    a, N, n, T, c = inp.algorithm, inp.N, inp.n, inp.T, inp.c
    if a in NEEDS_NEIGHBORS and inp.n_p is None:
        raise InvalidInput(f"{a.value} needs the neighbor count n_p")

    if a is Algorithm.PS_PSGD or a is Algorithm.FEDAVG:
        return 2 * N * n * T, 2 * N * T
    if a is Algorithm.ALLREDUCE_PSGD:
        return 0, 2 * N * T
    if a is Algorithm.TOPK_PSGD:
        return 0, 2 * n * (N / c) * T
    if a is Algorithm.S_FEDAVG:
        per_round = N + 2 * N / c
        return per_round * n * T, per_round * T
    if a is Algorithm.D_PSGD:
        return N, 4 * inp.n_p * N * T
    if a is Algorithm.DCD_PSGD:
        return N, 4 * inp.n_p * (N / c) * T
    return N, 2 * (N / c) * T


def cost_table(N: int, n: int, T: int, c: float, n_p: int = 2) -> Dict[str, dict]:
    """Every algorithm's costs and feature flags for one configuration."""
    rows = {}
    for algo in Algorithm:
        server, worker = comm_cost(CostModelInput(algorithm=algo, N=N, n=n, T=T, c=c, n_p=n_p))
        sparse, bandwidth, robust = FEATURES[algo]
        rows[algo.value] = {
            "server_cost": server,
            "worker_cost": worker,
            "sparsification": sparse,
            "considers_bandwidth": bandwidth,
            "robust": robust,
        }
    return rows
