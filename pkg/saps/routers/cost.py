from typing import Optional

from fastapi import APIRouter, Query
from pydantic import BaseModel, ValidationError

from ..coordinator.cost import FEATURES, Algorithm, CostModelInput, comm_cost, cost_table
from ..errors import InvalidInput

router = APIRouter()


class CostOut(BaseModel):
    algorithm: Algorithm
    server_cost: float
    worker_cost: float
    sparsification: bool
    considers_bandwidth: bool
    robust: bool


# ---------------------------
# GET /cost
# ---------------------------
@router.get("/cost", response_model=CostOut)
async def get_cost(
    algo: Algorithm,
    N: int,
    n: int,
    T: int,
    c: float = 1.0,
    np_: Optional[int] = Query(None, alias="np"),
):
    try:
        inp = CostModelInput(algorithm=algo, N=N, n=n, T=T, c=c, n_p=np_)
    except ValidationError as exc:
        raise InvalidInput(str(exc)) from exc
    server, worker = comm_cost(inp)
    sparse, bandwidth, robust = FEATURES[algo]
    return {
        "algorithm": algo,
        "server_cost": server,
        "worker_cost": worker,
        "sparsification": sparse,
        "considers_bandwidth": bandwidth,
        "robust": robust,
    }


# ---------------------------
# GET /cost/table
# ---------------------------
@router.get("/cost/table")
async def get_cost_table(N: int, n: int, T: int, c: float = 1.0, np_: int = Query(2, alias="np")):
    try:
        return cost_table(N, n, T, c, np_)
    except ValidationError as exc:
        raise InvalidInput(str(exc)) from exc
