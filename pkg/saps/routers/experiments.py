from typing import Any, Dict

from fastapi import APIRouter, Depends, HTTPException
from fastapi.concurrency import run_in_threadpool
from fastapi.responses import PlainTextResponse
from pydantic import BaseModel, validator

from ..deps import experiment_store, pagination
from ..experiment import ExperimentConfig, estimate_for_config, run_experiment
from ..store import ExperimentStore, StoredExperiment
from ..utils import log_event, response_list

router = APIRouter()


# -------- Schemas --------
class ExperimentOut(BaseModel):
    id: str
    summary: Dict[str, Any]


class RhoRequest(BaseModel):
    config: ExperimentConfig
    samples: int = 1000

    @validator("samples")
    def _samples(cls, v):
        if v < 100:
            raise ValueError("samples must be >= 100")
        return v


class RhoOut(BaseModel):
    rho: float
    std_error: float
    n_samples: int


def _get_or_404(store: ExperimentStore, experiment_id: str) -> StoredExperiment:
    item = store.get(experiment_id)
    if item is None:
        raise HTTPException(status_code=404, detail="Experiment not found")
    return item


# -------- Endpoints --------
@router.post("/experiments", response_model=ExperimentOut)
async def create_experiment(config: ExperimentConfig, store: ExperimentStore = Depends(experiment_store)):
    result = await run_in_threadpool(run_experiment, config)
    item = store.add(result)
    log_event("experiment_stored", {"id": item.id, "rounds": len(item.records)})
    return {"id": item.id, "summary": item.summary}


@router.get("/experiments", response_model=Dict[str, Any])
async def list_experiments(paging=Depends(pagination), store: ExperimentStore = Depends(experiment_store)):
    rows = [e.brief() for e in store.list(paging["offset"], paging["limit"])]
    return response_list(rows, paging["page"], paging["per_page"], store.count())


@router.get("/experiments/{experiment_id}", response_model=Dict[str, Any])
async def get_experiment(experiment_id: str, store: ExperimentStore = Depends(experiment_store)):
    item = _get_or_404(store, experiment_id)
    return {**item.brief(), "config": item.config}


@router.get("/experiments/{experiment_id}/rounds", response_model=Dict[str, Any])
async def list_rounds(
    experiment_id: str,
    paging=Depends(pagination),
    store: ExperimentStore = Depends(experiment_store),
):
    item = _get_or_404(store, experiment_id)
    page = item.records[paging["offset"]:paging["offset"] + paging["limit"]]
    return response_list([r.as_dict() for r in page], paging["page"], paging["per_page"], len(item.records))


@router.get("/experiments/{experiment_id}/rounds.csv", response_class=PlainTextResponse)
async def export_rounds(experiment_id: str, store: ExperimentStore = Depends(experiment_store)):
    item = _get_or_404(store, experiment_id)
    return PlainTextResponse(item.csv, media_type="text/csv")


@router.post("/rho", response_model=RhoOut)
async def estimate(body: RhoRequest):
    est = await run_in_threadpool(estimate_for_config, body.config, body.samples)
    return {"rho": est.rho, "std_error": est.std_error, "n_samples": est.n_samples}
