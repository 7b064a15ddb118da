"""FastAPI application wrapping the experiment pipeline.

Error mapping: configuration and data validation problems -> 400,
missing entities (school, student) -> 404, training/protocol faults -> 500.
"""

from __future__ import annotations

from fastapi import FastAPI, Request
from fastapi.responses import JSONResponse

from fedcourse import __version__
from fedcourse.errors import ConfigError, DatasetError, NumericsError, ProtocolError, TrainingError
from fedcourse.pipeline import (
    generate_data_files,
    inspect_graph_info,
    recommend_from_checkpoint,
    run_experiment,
    run_sweep,
)
from fedcourse.service import schemas


def create_app() -> FastAPI:
    app = FastAPI(title="fedcourse", version=__version__)

    @app.exception_handler(ConfigError)
    @app.exception_handler(DatasetError)
    async def _bad_request(request: Request, exc: Exception) -> JSONResponse:
        return JSONResponse(status_code=400, content={"detail": str(exc)})

    @app.exception_handler(LookupError)
    @app.exception_handler(FileNotFoundError)
    async def _not_found(request: Request, exc: Exception) -> JSONResponse:
        return JSONResponse(status_code=404, content={"detail": str(exc)})

    @app.exception_handler(ProtocolError)
    @app.exception_handler(TrainingError)
    @app.exception_handler(NumericsError)
    async def _server_error(request: Request, exc: Exception) -> JSONResponse:
        return JSONResponse(status_code=500, content={"detail": str(exc)})

    @app.get("/health", response_model=schemas.HealthResponse)
    async def health() -> schemas.HealthResponse:
        return schemas.HealthResponse(version=__version__)

    @app.post("/runs", response_model=schemas.RunResponse)
    def runs(body: schemas.RunRequest) -> schemas.RunResponse:
        report = run_experiment(body.config, body.out_dir)
        return schemas.RunResponse(**report)

    @app.post("/sweeps", response_model=schemas.SweepResponse)
    def sweeps(body: schemas.SweepRequest) -> schemas.SweepResponse:
        result = run_sweep(body.config, body.axis, body.values, body.out_dir)
        return schemas.SweepResponse(**result)

    @app.post("/recommendations", response_model=schemas.RecommendResponse)
    def recommendations(body: schemas.RecommendRequest) -> schemas.RecommendResponse:
        items = recommend_from_checkpoint(body.checkpoint, body.school_id, body.student_id, body.k)
        return schemas.RecommendResponse(
            school_id=body.school_id,
            student_id=body.student_id,
            items=[schemas.RecommendationItem(**item) for item in items],
        )

    @app.post("/datasets/synthetic", response_model=schemas.GenDataResponse)
    def datasets_synthetic(body: schemas.GenDataRequest) -> schemas.GenDataResponse:
        return schemas.GenDataResponse(**generate_data_files(body.config, body.out_dir))

    @app.post("/graphs/inspect", response_model=schemas.InspectGraphResponse)
    def graphs_inspect(body: schemas.InspectGraphRequest) -> schemas.InspectGraphResponse:
        return schemas.InspectGraphResponse(**inspect_graph_info(body.config, body.school_id))

    return app
