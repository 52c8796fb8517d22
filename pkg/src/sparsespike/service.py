"""FastAPI service exposing the six pipeline stages.

Stages run synchronously inside the request (desk-scale jobs take seconds to
minutes); clients share the server's filesystem for checkpoints and reports.
"""

from __future__ import annotations

from fastapi import FastAPI, HTTPException

from . import __version__, pipeline, schemas
from .checkpoint import CheckpointError
from .configio import ConfigError
from .conversion import CalibrationError
from .pruning import InfeasibleSparsity
from .train import TrainingDiverged

_CLIENT_ERRORS = (
    ValueError,
    KeyError,
    FileNotFoundError,
    PipelineError := pipeline.PipelineError,
    ConfigError,
    CheckpointError,
    InfeasibleSparsity,
    CalibrationError,
)


def _guard(fn, request):
    try:
        return fn(request)
    except TrainingDiverged as exc:
        raise HTTPException(status_code=422, detail=f"training diverged: {exc}") from exc
    except _CLIENT_ERRORS as exc:
        raise HTTPException(status_code=400, detail=str(exc)) from exc


def create_app() -> FastAPI:
    app = FastAPI(title="sparsespike", version=__version__)

    @app.get("/v1/health", response_model=schemas.HealthResponse)
    def health():
        return schemas.HealthResponse(status="ok", version=__version__)

    @app.post("/v1/pretrain", response_model=schemas.StageResponse)
    def pretrain(req: schemas.PretrainRequest):
        return _guard(pipeline.run_pretrain, req)

    @app.post("/v1/prune", response_model=schemas.StageResponse)
    def prune(req: schemas.PruneRequest):
        return _guard(pipeline.run_prune, req)

    @app.post("/v1/convert", response_model=schemas.StageResponse)
    def convert(req: schemas.ConvertRequest):
        return _guard(pipeline.run_convert, req)

    @app.post("/v1/finetune", response_model=schemas.StageResponse)
    def finetune(req: schemas.FinetuneRequest):
        return _guard(pipeline.run_finetune, req)

    @app.post("/v1/evaluate", response_model=schemas.EvaluateResponse)
    def evaluate(req: schemas.EvaluateRequest):
        return _guard(pipeline.run_evaluate, req)

    @app.post("/v1/energy", response_model=schemas.EnergyResponse)
    def energy(req: schemas.EnergyRequest):
        return _guard(pipeline.run_energy, req)

    return app


app = create_app()
