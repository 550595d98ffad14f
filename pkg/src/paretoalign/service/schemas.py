"""Request/response models for the HTTP service."""

from __future__ import annotations

from typing import Optional

from pydantic import BaseModel, Field

from ..config import RunConfig


class HealthResponse(BaseModel):
    status: str
    version: str


class StageRequest(BaseModel):
    """Common request body for pipeline stages: a config plus a run directory."""

    config: RunConfig = Field(default_factory=RunConfig)
    out_dir: str


class GenerateResponse(BaseModel):
    catalog_size: int
    n_sessions: int
    n_train_sessions: int
    n_test_sessions: int
    split_ts: int
    attract_convert_corr_target: float
    attract_convert_corr_achieved: float
    world_seed: int
    sessions_seed: int


class TrainRequest(StageRequest):
    resume: Optional[str] = None


class EpochRecord(BaseModel):
    epoch: int
    l_click: float
    l_order: float
    l_reg: float
    scalarized: float
    l_distortion: Optional[float] = None


class TrainResponse(BaseModel):
    checkpoint: str
    epochs_trained: int
    n_train_sessions: int
    first_epoch: Optional[EpochRecord]
    last_epoch: Optional[EpochRecord]


class FrontPointOut(BaseModel):
    pi_click: float
    pi_order: float
    recall: float
    od: float
    product: float
    n_clicks_evaluated: int


class EvalOfflineResponse(BaseModel):
    front: str
    points: list[FrontPointOut]


class GroupKpisOut(BaseModel):
    group: int
    n: int
    ctr: float
    cvr: Optional[float]
    units_total: int


class SimulateResponse(BaseModel):
    impressions: str
    n_impressions: int
    click_bias: float
    click_scale: float
    pilot_ctr: Optional[float]
    aa_mode: bool
    kpis: list[GroupKpisOut]


class AnalyzeRequest(StageRequest):
    alpha: Optional[float] = Field(default=None, gt=0.0, lt=1.0)


class HypothesisRow(BaseModel):
    hypothesis: str
    predictor: str
    outcome: str
    coef: float
    se: float
    z: float
    p_value: float
    ci_low: float
    ci_high: float
    n: int
    significant: bool
    direction: int
    matches_expected_sign: bool


class AnalyzeResponse(BaseModel):
    report: str
    table: str
    alpha: float
    rows: list[HypothesisRow]


class PipelineResponse(BaseModel):
    generate: GenerateResponse
    train: TrainResponse
    eval_offline: EvalOfflineResponse
    simulate: SimulateResponse
    analyze: AnalyzeResponse


class RecommendRequest(BaseModel):
    checkpoint: str
    prefix: list[int] = Field(min_length=1)
    preference: list[float] = Field(min_length=2, max_length=2)
    k: int = Field(default=20, ge=1)


class RecommendResponse(BaseModel):
    items: list[int]
    scores: list[float]
