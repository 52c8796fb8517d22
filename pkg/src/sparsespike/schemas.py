"""Pydantic request/response models for the pipeline service.

Every request model forbids unknown fields, so config typos surface as
validation errors naming the offending key.
"""

from __future__ import annotations

from typing import Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, field_validator

from . import attacks


class StrictModel(BaseModel):
    model_config = ConfigDict(extra="forbid")


class DatasetConfig(StrictModel):
    kind: Literal["blobs", "glyphs", "idx", "raw"] = "glyphs"
    n: int = 1024
    classes: int = 4
    dim: int = 8  # blobs
    spread: float = 0.08  # blobs
    size: int = 16  # glyphs
    noise: float = 0.15  # glyphs
    max_shift: int = 2  # glyphs
    amplitude: float = 0.8  # glyphs
    images: Optional[str] = None  # idx
    labels: Optional[str] = None  # idx
    manifest: Optional[str] = None  # raw
    test_fraction: float = 0.25
    seed: Optional[int] = None  # defaults to the stage seed


class AttackConfig(StrictModel):
    kind: Literal["fgsm", "rfgsm", "pgd"] = "pgd"
    eps: float = 2.0 / 255.0
    steps: int = 10
    alpha: Optional[float] = None
    alpha_r: Optional[float] = None
    random_start: bool = True

    def to_spec(self, eps: Optional[float] = None) -> attacks.AttackSpec:
        return attacks.AttackSpec(
            kind=self.kind,
            eps=self.eps if eps is None else eps,
            steps=self.steps if self.kind == "pgd" else 1,
            alpha=self.alpha,
            alpha_r=self.alpha_r,
            random_start=self.random_start and self.kind == "pgd",
        )


class PretrainRequest(StrictModel):
    dataset: DatasetConfig = Field(default_factory=DatasetConfig)
    arch: str = "convnet16"
    epochs: int = 10
    batch_size: int = 64
    lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 1e-4
    schedule: Literal["none", "cosine"] = "cosine"
    loss: Literal["ce", "trades"] = "trades"
    trades_lambda: float = 2.0
    attack: Optional[AttackConfig] = Field(default_factory=lambda: AttackConfig(steps=10))
    seed: int = 0
    out: str = "runs"
    tag: str = "ann"


class PruneRequest(StrictModel):
    checkpoint: str
    dataset: DatasetConfig = Field(default_factory=DatasetConfig)
    kappa: float = 0.9
    method: Literal["lwm", "uniform", "nonuniform", "global"] = "uniform"
    score_epochs: int = 10
    score_lr: float = 0.01
    quota_lr: float = 1.0
    quota_penalty: float = 1e-4
    loss: Literal["ce", "trades"] = "trades"
    trades_lambda: float = 2.0
    attack: Optional[AttackConfig] = Field(default_factory=lambda: AttackConfig(steps=10))
    finetune_epochs: int = 10
    finetune_lr: float = 0.01
    batch_size: int = 64
    seed: int = 0
    out: str = "runs"
    tag: str = "ann_sparse"


class ConvertRequest(StrictModel):
    checkpoint: str
    dataset: DatasetConfig = Field(default_factory=DatasetConfig)
    t_c: int = 100
    rho: float = 99.7
    lam: float = 0.3
    calib_batches: int = 10
    batch_size: int = 64
    t_steps: int = 8
    tau: float = 1.0
    pooled: bool = False
    seed: int = 0
    out: str = "runs"
    tag: str = "snn"


class FinetuneRequest(StrictModel):
    checkpoint: str
    dataset: DatasetConfig = Field(default_factory=DatasetConfig)
    epochs: int = 10
    beta: float = 2.0
    eps: float = 2.0 / 255.0
    inner: Literal["rfgsm", "fgsm", "pgd"] = "rfgsm"
    inner_steps: int = 1
    alpha_r: Optional[float] = None
    lr: float = 1e-3
    momentum: float = 0.9
    weight_decay: float = 1e-4
    schedule: Literal["none", "cosine"] = "cosine"
    t_steps: int = 8
    batch_size: int = 64
    threshold_floor: float = 1e-3
    probe_samples: int = 256
    init: Literal["checkpoint", "random"] = "checkpoint"
    seed: int = 0
    out: str = "runs"
    tag: str = "snn_ft"


class EvaluateRequest(StrictModel):
    checkpoint: str
    dataset: DatasetConfig = Field(default_factory=DatasetConfig)
    attacks: list[Literal["fgsm", "rfgsm", "pgd"]] = Field(default_factory=lambda: ["fgsm", "pgd"])
    eps_grid: list[float] = Field(default_factory=lambda: [2.0 / 255.0, 4.0 / 255.0, 8.0 / 255.0])
    pgd_steps: int = 10
    random_start: bool = True
    ensemble_members: Optional[list[str]] = None  # None -> full default grid
    stop_at_first_success: bool = True
    sample_cap: int = 256
    batch_size: int = 128
    t_steps: int = 8
    batch_stats: Optional[bool] = None  # None -> auto from checkpoint stage
    dump_adversarial: bool = False
    seed: int = 0
    out: str = "runs"
    tag: str = "eval"

    @field_validator("attacks", "eps_grid", "ensemble_members", mode="before")
    @classmethod
    def _as_list(cls, v):
        if v is None or isinstance(v, list):
            return v
        return [v]


class EnergyRequest(StrictModel):
    checkpoint: str
    dataset: DatasetConfig = Field(default_factory=DatasetConfig)
    sample_cap: int = 256
    batch_size: int = 128
    t_steps: int = 8
    e_ac: float = 1.0
    batch_stats: Optional[bool] = None
    reference_report: Optional[str] = None
    seed: int = 0
    out: str = "runs"
    tag: str = "energy"


class StageResponse(StrictModel):
    stage: str
    checkpoint: Optional[str] = None
    checkpoint_sha256: Optional[str] = None
    metrics: dict = Field(default_factory=dict)
    files: dict[str, str] = Field(default_factory=dict)


class EvalRow(StrictModel):
    attack: str
    eps: float
    robust_acc: float
    fooled: int
    n: int


class EvaluateResponse(StrictModel):
    stage: str = "evaluate"
    clean_acc: float
    rows: list[EvalRow]
    files: dict[str, str] = Field(default_factory=dict)


class EnergyResponse(StrictModel):
    stage: str = "energy"
    report: dict
    files: dict[str, str] = Field(default_factory=dict)


class HealthResponse(StrictModel):
    status: str
    version: str
