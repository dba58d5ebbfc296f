"""FastAPI service wrapping the experiment harness.

All endpoints are stateless and deterministic: the same request body
always produces the same response body.
"""

from __future__ import annotations

from fastapi import FastAPI, HTTPException

from .. import __version__
from ..harness import fixture_bundle, run_experiment, sweep_max_tokens, verify_grid
from .schemas import (
    ExperimentReportModel,
    ExperimentRequest,
    FixtureBundleModel,
    FixtureRequest,
    HealthModel,
    SweepReportModel,
    SweepRequest,
    VerifyReportModel,
    VerifyRequest,
)


def handle_bench(req: ExperimentRequest) -> ExperimentReportModel:
    report = run_experiment(req.to_config(), scheduling=req.scheduling)
    return ExperimentReportModel.model_validate(report.to_json_dict())


def handle_verify(req: VerifyRequest) -> VerifyReportModel:
    report = verify_grid(
        seed=req.seed,
        cp_sizes=req.cp_sizes,
        protocols=req.protocols,
        balance_modes=req.balance_modes,
        dtypes=req.dtypes,
        scheduling=req.scheduling,
    )
    return VerifyReportModel.model_validate(report.to_json_dict())


def handle_sweep(req: SweepRequest) -> SweepReportModel:
    report = sweep_max_tokens(
        budget_bytes=req.budget_bytes,
        cp_sizes=req.cp_sizes,
        embed_dim=req.embed_dim,
        dtype=req.dtype,
        seed=req.seed,
    )
    return SweepReportModel.model_validate(report.to_json_dict())


def handle_fixtures(req: FixtureRequest) -> FixtureBundleModel:
    bundle = fixture_bundle(req.config.to_config())
    return FixtureBundleModel.model_validate(bundle)


def create_app() -> FastAPI:
    app = FastAPI(
        title="jaggedcp",
        version=__version__,
        description="Context-parallel jagged attention experiments as a service",
    )

    @app.get("/v1/health", response_model=HealthModel)
    def health() -> HealthModel:
        return HealthModel(status="ok", version=__version__)

    @app.post("/v1/bench", response_model=ExperimentReportModel)
    def bench(req: ExperimentRequest) -> ExperimentReportModel:
        try:
            return handle_bench(req)
        except ValueError as exc:
            raise HTTPException(status_code=422, detail=str(exc)) from exc

    @app.post("/v1/verify", response_model=VerifyReportModel)
    def verify(req: VerifyRequest) -> VerifyReportModel:
        try:
            return handle_verify(req)
        except ValueError as exc:
            raise HTTPException(status_code=422, detail=str(exc)) from exc

    @app.post("/v1/sweep", response_model=SweepReportModel)
    def sweep(req: SweepRequest) -> SweepReportModel:
        try:
            return handle_sweep(req)
        except ValueError as exc:
            raise HTTPException(status_code=422, detail=str(exc)) from exc

    @app.post("/v1/fixtures", response_model=FixtureBundleModel)
    def fixtures(req: FixtureRequest) -> FixtureBundleModel:
        try:
            return handle_fixtures(req)
        except ValueError as exc:
            raise HTTPException(status_code=422, detail=str(exc)) from exc

    return app


app = create_app()
