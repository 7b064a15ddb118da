"""Request and response bodies for the HTTP service."""

from __future__ import annotations

from typing import Literal

from pydantic import BaseModel, Field

from fedcourse.config import ExperimentConfig


class HealthResponse(BaseModel):
    status: Literal["ok"] = "ok"
    version: str


class MetricsBody(BaseModel):
    hr1: float
    hr5: float
    hr10: float
    hr20: float
    ndcg5: float
    ndcg10: float
    ndcg20: float
    mrr: float
    auc: float
    n_instances: int


class RunRequest(BaseModel):
    config: ExperimentConfig
    out_dir: str


class RunResponse(BaseModel):
    config: dict
    rounds_run: int
    n_schools: int
    n_messages: int
    metrics: MetricsBody
    timings: dict[str, float]
    artifacts: dict[str, str]


class SweepRequest(BaseModel):
    config: ExperimentConfig
    axis: Literal["embedding_dim", "attention_heads"]
    values: list[int] = Field(min_length=1)
    out_dir: str


class SweepResponse(BaseModel):
    axis: str
    rows: list[dict]
    csv: str


class RecommendRequest(BaseModel):
    checkpoint: str
    school_id: int
    student_id: int
    k: int = Field(ge=0)


class RecommendationItem(BaseModel):
    course: int
    score: float


class RecommendResponse(BaseModel):
    school_id: int
    student_id: int
    items: list[RecommendationItem]


class GenDataRequest(BaseModel):
    config: ExperimentConfig
    out_dir: str


class GenDataResponse(BaseModel):
    catalog: str
    schools: list[str]


class InspectGraphRequest(BaseModel):
    config: ExperimentConfig
    school_id: int


class InspectGraphResponse(BaseModel):
    school_id: int
    n_nodes: int
    n_edges: int
    nodes_by_type: dict[str, int]
    edges_by_type: dict[str, int]
    edge_list: list[str]
