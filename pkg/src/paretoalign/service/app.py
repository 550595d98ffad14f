"""FastAPI service wrapping the pipeline stages and live recommendation.

Stages operate on a run directory shared between client and server; the
CLI is a thin client of these endpoints (in-process by default, remote
with --server).
"""

from __future__ import annotations

import numpy as np
from fastapi import FastAPI, HTTPException

from .. import __version__, absim, model as model_mod
from ..config import ConfigError, RunConfig, config_schema, dump_config
from ..pipeline import (
    PipelineError, analyze, eval_offline, generate, run_pipeline, simulate, train,
)
from . import schemas


def _wrap(stage_fn, *args, **kwargs):
    try:
        return stage_fn(*args, **kwargs)
    except (ConfigError, ValueError) as exc:
        raise HTTPException(status_code=400, detail=str(exc)) from exc
    except PipelineError as exc:
        raise HTTPException(status_code=500, detail=str(exc)) from exc
    except OSError as exc:
        raise HTTPException(status_code=500, detail=str(exc)) from exc


def create_app() -> FastAPI:
    app = FastAPI(title="paretoalign", version=__version__)

    @app.get("/health", response_model=schemas.HealthResponse)
    def health():
        return schemas.HealthResponse(status="ok", version=__version__)

    @app.get("/config/defaults")
    def config_defaults() -> dict:
        return RunConfig().model_dump()

    @app.get("/config/defaults.yaml")
    def config_defaults_yaml() -> str:
        return dump_config(RunConfig())

    @app.get("/config/schema")
    def schema() -> dict:
        return config_schema()

    @app.post("/runs/generate", response_model=schemas.GenerateResponse)
    def run_generate(req: schemas.StageRequest):
        return _wrap(generate, req.config, req.out_dir)

    @app.post("/runs/train", response_model=schemas.TrainResponse)
    def run_train(req: schemas.TrainRequest):
        return _wrap(train, req.config, req.out_dir, resume=req.resume)

    @app.post("/runs/eval-offline", response_model=schemas.EvalOfflineResponse)
    def run_eval_offline(req: schemas.StageRequest):
        return _wrap(eval_offline, req.config, req.out_dir)

    @app.post("/runs/simulate", response_model=schemas.SimulateResponse)
    def run_simulate(req: schemas.StageRequest):
        return _wrap(simulate, req.config, req.out_dir)

    @app.post("/runs/analyze", response_model=schemas.AnalyzeResponse)
    def run_analyze(req: schemas.AnalyzeRequest):
        return _wrap(analyze, req.config, req.out_dir, alpha=req.alpha)

    @app.post("/runs/pipeline", response_model=schemas.PipelineResponse)
    def run_full_pipeline(req: schemas.StageRequest):
        summary = _wrap(run_pipeline, req.config, req.out_dir)
        return schemas.PipelineResponse(
            generate=summary["generate"],
            train=summary["train"],
            eval_offline=summary["eval-offline"],
            simulate=summary["simulate"],
            analyze=summary["analyze"],
        )

    @app.post("/recommend", response_model=schemas.RecommendResponse)
    def recommend(req: schemas.RecommendRequest):
        try:
            params, hp, _ = model_mod.load_checkpoint(req.checkpoint)
        except (model_mod.ModelError, OSError) as exc:
            raise HTTPException(status_code=400, detail=str(exc)) from exc
        if any(i < 0 or i >= hp.catalog_size for i in req.prefix):
            raise HTTPException(status_code=400,
                                detail=f"prefix item outside catalog of size {hp.catalog_size}")
        pref = np.asarray(req.preference, dtype=np.float64)
        if abs(pref.sum() - 1.0) > 1e-6 or np.any(pref < 0):
            raise HTTPException(status_code=400, detail="preference must lie on the 2-simplex")
        items = absim.serve(params, pref, req.prefix, req.k, hp.max_prefix_len)
        state = model_mod.encode_session(params, req.prefix, pref, hp.max_prefix_len)
        scores = model_mod.click_scores(params, state)
        return schemas.RecommendResponse(
            items=items,
            scores=[float(scores[i]) for i in items],
        )

    return app
