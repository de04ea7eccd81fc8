"""
Pydantic schemas for configuration, reports and file headers
"""

import math
from typing import List, Literal, Optional, Tuple

from pydantic import BaseModel, ConfigDict, Field, computed_field, model_validator

PoolingKind = Literal["bilinear", "sketch"]
TaskKind = Literal["covariance_only", "mean_and_covariance"]
Command = Literal["train", "eval", "gradcheck", "verify", "sketchbench", "gen-data"]

VARIANT_FLAGS = {
    "monet": (True, True),
    "monet-2": (False, True),
    "monet-u": (True, False),
    "monet-2u": (False, False),
}


class VariantSpec(BaseModel):
    """Which MoNet layers are active and how locations are pooled"""
    model_config = ConfigDict(frozen=True)

    use_hm: bool = Field(True, description="1st-order moment via homogeneous mapping")
    use_ssqrt: bool = Field(True, description="Sub-matrix square-root normalization")
    pooling: PoolingKind = Field("bilinear", description="Bilinear or Tensor Sketch pooling")
    sketch_dim: int = Field(10_000, gt=0, description="Sketch dimension D")

    @classmethod
    def from_name(cls, name: str, pooling: str = "bilinear", sketch_dim: int = 10_000) -> "VariantSpec":
        key = name.lower()
        if key not in VARIANT_FLAGS:
            raise ValueError(f"unknown variant '{name}', expected one of {sorted(VARIANT_FLAGS)}")
        if pooling == "ts":
            pooling = "sketch"
        use_hm, use_ssqrt = VARIANT_FLAGS[key]
        return cls(use_hm=use_hm, use_ssqrt=use_ssqrt, pooling=pooling, sketch_dim=sketch_dim)

    @property
    def name(self) -> str:
        for key, flags in VARIANT_FLAGS.items():
            if flags == (self.use_hm, self.use_ssqrt):
                return key
        raise AssertionError("unreachable")

    @property
    def label(self) -> str:
        suffix = "TS" if self.pooling == "sketch" else "bilinear"
        return f"{self.name} {suffix}"


class NormConfig(BaseModel):
    """Guards for the signed square-root and l2 normalization"""
    model_config = ConfigDict(frozen=True)

    sqrt_guard: float = Field(1e-8, gt=0, description="Floor on sqrt|v| in the signed-sqrt derivative")
    l2_guard: float = Field(1e-12, gt=0, description="Norm below which l2 output is zero")


class OptimConfig(BaseModel):
    """SGD with momentum, weight decay and element-wise clipping"""
    model_config = ConfigDict(frozen=True)

    lr: float = Field(0.001, gt=0)
    momentum: float = Field(0.9, ge=0, lt=1)
    weight_decay: float = Field(0.0005, ge=0)
    clip_lo: float = -1.0
    clip_hi: float = 1.0
    batch_size: int = Field(16, ge=1)

    @model_validator(mode="after")
    def _check_clip(self):
        if not self.clip_lo < self.clip_hi:
            raise ValueError(f"clip_lo ({self.clip_lo}) must be below clip_hi ({self.clip_hi})")
        return self


class TaskSpec(BaseModel):
    """Synthetic moment-classification task"""
    model_config = ConfigDict(frozen=True)

    kind: TaskKind = "covariance_only"
    classes: int = Field(4, ge=2)
    locations: int = Field(64, ge=2)
    channels: int = Field(16, ge=1)
    train_per_class: int = Field(500, ge=0)
    test_per_class: int = Field(200, ge=0)
    seed: int = 0
    mean_separation: float = Field(1.0, ge=0, description="Scale of the class-mean simplex")
    spectrum_lo: float = Field(0.2, gt=0)
    spectrum_hi: float = Field(5.0, gt=0)

    @model_validator(mode="after")
    def _check_locations(self):
        if self.locations < self.channels + 1:
            raise ValueError(
                f"locations ({self.locations}) must be at least channels + 1 ({self.channels + 1})"
            )
        if self.spectrum_lo > self.spectrum_hi:
            raise ValueError("spectrum_lo must not exceed spectrum_hi")
        return self


class RunConfig(BaseModel):
    """Everything a CLI command needs; unspecified values fall back to the training-recipe defaults"""
    command: Command = "train"
    variant: VariantSpec = Field(default_factory=VariantSpec)
    optim: OptimConfig = Field(default_factory=OptimConfig)
    norm: NormConfig = Field(default_factory=NormConfig)
    task: TaskSpec = Field(default_factory=TaskSpec)
    epsilon: float = Field(1e-5, gt=0, description="Singular value retention threshold")
    epochs: int = Field(30, ge=0)
    warmup_steps: int = Field(0, ge=0, description="Classifier-only steps before full-head training")
    seed: int = 0
    data: Optional[str] = None
    test_data: Optional[str] = None
    model: Optional[str] = None
    out: str = "runs"
    preprocess_signed_sqrt: bool = True
    adapter: bool = False
    augment_flip: bool = False
    workers: int = Field(1, ge=1)
    timing: bool = False
    gradcheck_tol: Optional[float] = Field(None, gt=0)
    sketch_trials: int = Field(200, ge=1)


class GradCheckReport(BaseModel):
    """Outcome of comparing an analytic gradient with central differences"""
    op: str
    max_rel_err: float
    max_abs_err: float
    worst_index: Tuple[int, ...] = ()
    step: float = 1e-6
    tol: float
    skipped: Optional[str] = Field(None, description="Reason when the check is an expected skip")

    @computed_field
    @property
    def passed(self) -> bool:
        if self.skipped is not None:
            return True
        return math.isfinite(self.max_rel_err) and self.max_rel_err <= self.tol

    @property
    def status(self) -> str:
        if self.skipped is not None:
            return "expected-skip"
        return "true" if self.passed else "false"


class SketchQualityReport(BaseModel):
    """Monte Carlo quality of <TS(x), TS(y)> as an estimate of <x, y>^2"""
    d_in: int
    d_out: int
    trials: int
    target: float
    mean_estimate: float
    mean_error: float = Field(..., description="Mean per-trial error, relative unless absolute is set")
    std: float = Field(..., description="Standard deviation of the per-trial estimates")
    standard_error: float
    absolute: bool = False


class TrainingMetadata(BaseModel):
    """Provenance stored with a model file"""
    seed: int = 0
    epochs: int = 0
    warmup_steps: int = 0
    steps: int = 0
    final_loss: Optional[float] = None


class TensorEntry(BaseModel):
    """Location of one parameter tensor inside the model blob"""
    name: str
    dtype: str
    shape: List[int]
    offset: int
    nbytes: int


class ModelHeader(BaseModel):
    """Structured-text header of a model file"""
    format_version: int = 1
    variant: VariantSpec
    norm: NormConfig
    epsilon: float
    channels: int
    classes: int
    preprocess_signed_sqrt: bool = True
    metadata: TrainingMetadata = Field(default_factory=TrainingMetadata)
    tensors: List[TensorEntry] = Field(default_factory=list)


class OracleCheck(BaseModel):
    """One row of the oracle suite"""
    name: str
    value: float
    threshold: float
    passed: bool
    detail: str = ""


class EvalSummary(BaseModel):
    """Accuracy and confusion counts of a model on one dataset"""
    accuracy: float
    total: int
    correct: int
    confusion: List[List[int]] = Field(..., description="confusion[true][predicted]")
