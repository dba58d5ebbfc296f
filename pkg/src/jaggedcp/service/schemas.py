"""Pydantic request/response models for the experiment service.

These are the wire schema; the CLI builds the same requests, so local and
remote runs go through identical validation.
"""

from __future__ import annotations

from typing import Literal

from pydantic import BaseModel, Field

from ..harness import ExperimentConfig


class ExperimentRequest(BaseModel):
    cp_size: int = Field(default=2, ge=1, le=64)
    batch_size: int = Field(default=2, ge=1, le=256)
    length_dist: Literal["uniform", "lognormal"] = "uniform"
    min_len: int = Field(default=1, ge=0)
    max_len: int = Field(default=32, ge=0)
    lognorm_mu: float = 3.0
    lognorm_sigma: float = Field(default=0.8, ge=0)
    max_length: int = Field(default=128, ge=1)
    embed_dim: int = Field(default=8, ge=1, le=1024)
    num_buckets: int = Field(default=16, ge=1)
    dtype: Literal["f32", "f64"] = "f64"
    protocol: Literal["allgather_split", "alltoall"] = "alltoall"
    balance_mode: Literal["balanced_minichunk", "naive_contiguous"] = "balanced_minichunk"
    seed: int
    scheduling: Literal["sequential", "threaded"] = "sequential"

    def to_config(self) -> ExperimentConfig:
        data = self.model_dump()
        data.pop("scheduling")
        return ExperimentConfig(**data)


class CommStatsModel(BaseModel):
    rank: int
    bytes_sent: int
    bytes_received: int
    messages: int
    peak_resident_bytes: int


class CommSectionModel(BaseModel):
    redistribute: list[CommStatsModel]
    ring: list[CommStatsModel]
    restore: list[CommStatsModel]


class FlopsModel(BaseModel):
    per_rank: list[int]
    total: int
    max_mean_ratio: float


class ConfigEcho(BaseModel):
    cp_size: int
    batch_size: int
    length_dist: str
    min_len: int
    max_len: int
    lognorm_mu: float
    lognorm_sigma: float
    max_length: int
    embed_dim: int
    num_buckets: int
    dtype: str
    protocol: str
    balance_mode: str
    seed: int


class RedistributePeaks(BaseModel):
    allgather_split: list[int]
    alltoall: list[int]


class ExperimentReportModel(BaseModel):
    config: ConfigEcho
    max_abs_error: float
    max_rel_error: float
    comm: CommSectionModel
    flops: FlopsModel
    resident_tokens_per_rank: list[int]
    per_rank_peak_resident_bytes: list[int]
    redistribute_peak_bytes: RedistributePeaks
    memory_reduction_ratio: float
    metadata: dict


class VerifyRequest(BaseModel):
    seed: int
    cp_sizes: list[int] = Field(default=[1, 2, 4, 8])
    protocols: list[Literal["allgather_split", "alltoall"]] = Field(
        default=["allgather_split", "alltoall"]
    )
    balance_modes: list[Literal["balanced_minichunk", "naive_contiguous"]] = Field(
        default=["balanced_minichunk", "naive_contiguous"]
    )
    dtypes: list[Literal["f32", "f64"]] = Field(default=["f32", "f64"])
    scheduling: Literal["sequential", "threaded"] = "sequential"


class VerifyCaseModel(BaseModel):
    config: ConfigEcho
    passed: bool
    failures: list[str]
    max_abs_error: float
    max_rel_error: float


class VerifyReportModel(BaseModel):
    all_passed: bool
    cases: list[VerifyCaseModel]


class SweepRequest(BaseModel):
    budget_bytes: int = Field(ge=1)
    cp_sizes: list[int] = Field(default=[1, 2, 4, 8])
    embed_dim: int = Field(default=8, ge=1)
    dtype: Literal["f32", "f64"] = "f32"
    seed: int


class SweepRowModel(BaseModel):
    cp_size: int
    max_supported_length: int


class SweepReportModel(BaseModel):
    budget_bytes: int
    embed_dim: int
    dtype: str
    seed: int
    rows: list[SweepRowModel]
    metadata: dict


class FixtureRequest(BaseModel):
    config: ExperimentRequest


class FixtureBundleModel(BaseModel):
    config: ConfigEcho
    ranks: dict[str, dict]


class HealthModel(BaseModel):
    status: str
    version: str
