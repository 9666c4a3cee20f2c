import logging
from contextlib import asynccontextmanager

from fastapi import FastAPI, Request
from fastapi.middleware.cors import CORSMiddleware
from fastapi.responses import JSONResponse

from . import __version__
from .errors import ConfigurationError, InvalidInput, SapsError
from .routers import cost, experiments
from .store import connect_store, disconnect_store
from .utils import configure_logging

logger = logging.getLogger(__name__)


@asynccontextmanager
async def lifespan(app: FastAPI):
    # startup
    configure_logging()
    connect_store()
    logger.info("experiment store ready")
    yield
    # shutdown
    disconnect_store()
    logger.info("experiment store released")


app = FastAPI(
    title="SAPS-PSGD API",
    version=__version__,
    description="Run simulated sparsified decentralized SGD experiments and query the communication cost model",
    lifespan=lifespan,
)

# Middleware
app.add_middleware(
    CORSMiddleware,
    allow_origins=["*"],
    allow_methods=["*"],
    allow_headers=["*"],
)


# Exception Handlers
@app.exception_handler(InvalidInput)
async def invalid_input_handler(request: Request, exc: InvalidInput):
    return JSONResponse(status_code=422, content={"error": str(exc)})


@app.exception_handler(ConfigurationError)
async def configuration_error_handler(request: Request, exc: ConfigurationError):
    return JSONResponse(status_code=422, content={"error": str(exc)})


@app.exception_handler(SapsError)
async def saps_error_handler(request: Request, exc: SapsError):
    logger.error("%s: %s", type(exc).__name__, exc)
    return JSONResponse(status_code=500, content={"error": str(exc), "kind": type(exc).__name__})


@app.exception_handler(Exception)
async def global_exception_handler(request: Request, exc: Exception):
    return JSONResponse(
        status_code=500,
        content={"error": str(exc)},
    )


# Health Check
@app.get("/health")
async def health_check():
    return {"status": "ok"}


# Router Registration
app.include_router(experiments.router, prefix="", tags=["Experiments"])
app.include_router(cost.router, prefix="", tags=["Cost model"])
