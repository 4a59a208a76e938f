from pydantic import BaseModel, ConfigDict, Field, field_validator
from typing import Dict, List, Optional, Tuple
from enum import Enum


class Method(str, Enum):
    """Training method."""
    NAIVE = "naive"
    RELMF = "relmf"
    UMF = "umf"
    UBO = "ubo"
    JOINTOPT = "jointopt"
    ALTEROPT = "alteropt"
    BIOPT2 = "biopt2"

    @property
    def learns_exposure(self) -> bool:
        return self in (Method.UBO, Method.JOINTOPT, Method.ALTEROPT, Method.BIOPT2)


class EstimatorKind(str, Enum):
    """Per-pair training loss."""
    NAIVE = "naive"
    IPS = "ips"
    UBO = "ubo"


class OptimizerKind(str, Enum):
    ADAM = "adam"
    SGD = "sgd"


class PairUniverse(str, Enum):
    """Which (user, item) pairs the training loss sums over."""
    GRID = "grid"
    OBSERVED = "observed"


class SplitTag(str, Enum):
    TRAIN = "train"
    UNBIASED_VAL = "unbiased_val"
    HYPER_VAL = "hyper_val"
    TEST = "test"


class SamplingScheme(str, Enum):
    IID = "iid"
    STRATIFIED = "stratified"


class SynthConfig(BaseModel):
    """Semi-synthetic generation recipe."""
    model_config = ConfigDict(frozen=True)

    min_user_interactions: int = Field(default=10, ge=0)
    min_item_interactions: int = Field(default=8, ge=0)
    max_users: int = Field(default=3000, ge=1)
    max_items: int = Field(default=3000, ge=1)
    positive_threshold: float = Field(default=4.0)

    # gamma = sigmoid(slope * (rating - offset)) on observed cells
    gamma_slope: float = Field(default=1.0)
    gamma_offset: float = Field(default=3.5)

    # m = max(theta, floor) ** popularity_power * activity ** activity_power
    popularity_power: float = Field(default=1.0, ge=0.0)
    activity_power: float = Field(default=0.5, ge=0.0)
    exposure_floor: float = Field(default=0.01, gt=0.0, le=1.0)

    test_items_per_user: int = Field(default=10, ge=0)

    constant_gamma: Optional[float] = Field(default=None, ge=0.0, le=1.0)
    constant_exposure: Optional[float] = Field(default=None, gt=0.0, le=1.0)


class BilevelConfig(BaseModel):
    """Optimisation settings shared by every training method."""
    model_config = ConfigDict(frozen=True)

    inner_lr: float = Field(default=1e-3, gt=0.0)
    outer_lr: float = Field(default=1e-3, ge=0.0)
    batch_size: int = Field(default=1024, ge=1)
    epochs: int = Field(default=100, ge=0)
    seed: int = Field(default=0)
    weight_decay: float = Field(default=0.0, ge=0.0)
    optimizer: OptimizerKind = Field(default=OptimizerKind.ADAM)

    dim: int = Field(default=50, ge=1)
    init_scale: float = Field(default=0.1, ge=0.0)
    clip_floor: float = Field(default=0.01, gt=0.0, le=1.0)
    ks: Tuple[int, ...] = Field(default=(1, 2, 3))
    pcc_every: int = Field(default=1, ge=1)
    checkpoint_every: int = Field(default=0, ge=0)

    @field_validator("ks")
    @classmethod
    def validate_ks(cls, v: Tuple[int, ...]) -> Tuple[int, ...]:
        if not v or any(k < 1 for k in v):
            raise ValueError("every K must be >= 1")
        return tuple(v)


class TraceRecord(BaseModel):
    """One epoch of a training run."""
    epoch: int = Field(..., ge=0)
    steps: int = Field(..., ge=0)
    train_loss: float
    val_loss: Optional[float] = None
    metrics: Dict[str, float] = Field(default_factory=dict)
    mean_pcc: Optional[float] = None
    pcc_by_step: List[Tuple[int, float]] = Field(default_factory=list)


class TrainTrace(BaseModel):
    method: Method
    seed: int
    records: List[TraceRecord] = Field(default_factory=list)

    def to_jsonl(self) -> str:
        return "".join(record.model_dump_json() + "\n" for record in self.records)

    @classmethod
    def from_jsonl(cls, text: str, method: Method, seed: int) -> "TrainTrace":
        records = [TraceRecord.model_validate_json(line) for line in text.splitlines() if line.strip()]
        return cls(method=method, seed=seed, records=records)


class MetricRecord(BaseModel):
    method: str
    seed: int
    metric: str
    k: Optional[int] = None
    value: float


class MetricReport(BaseModel):
    """Per-method, per-seed metric values with provenance."""
    records: List[MetricRecord] = Field(default_factory=list)
    provenance: Dict[str, str] = Field(default_factory=dict)

    def value(self, metric: str, k: Optional[int] = None, method: Optional[str] = None,
              seed: Optional[int] = None) -> float:
        for record in self.records:
            if record.metric != metric or record.k != k:
                continue
            if method is not None and record.method != method:
                continue
            if seed is not None and record.seed != seed:
                continue
            return record.value
        raise KeyError(f"no {metric}@{k} in report")


class VarianceRow(BaseModel):
    gamma: float
    m_bar: float
    p: float
    var_ips_closed: float
    var_ips_mc: float
    var_ubo_closed: float
    var_ubo_mc: float
    n_samples: int


class CheckResult(BaseModel):
    """Outcome of one numeric verification."""
    component: str
    passed: bool
    max_error: float = Field(..., ge=0.0)
    tolerance: float = Field(..., ge=0.0)
    instances: int = Field(..., ge=0)
    detail: str = ""
