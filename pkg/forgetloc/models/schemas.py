from pydantic import BaseModel, Field, field_validator, model_validator
from typing import List, Dict, Any, Optional, Union
from datetime import datetime
from enum import Enum

# ============================================================================
# BASE MODELS & COMMON SCHEMAS
# ============================================================================

class APIResponse(BaseModel):
    """Base model for API responses"""
    success: bool = True
    message: Optional[str] = None
    data: Optional[Union[Dict[str, Any], List[Any]]] = None
    timestamp: datetime = Field(default_factory=datetime.utcnow)


class Mode(str, Enum):
    TRAIN = "train"
    EVAL = "eval"


class BlockKind(str, Enum):
    WEIGHT = "weight"
    BIAS = "bias"

# ============================================================================
# MODEL ARCHITECTURE
# ============================================================================

class LayerKind(str, Enum):
    CONV = "conv"
    DENSE = "dense"
    OUTPUT = "output"


class LayerSpec(BaseModel):
    name: str
    kind: LayerKind
    units: int = Field(gt=0)
    kernel: Optional[int] = None
    stride: Optional[int] = None
    activation: str
    dropout: float = Field(default=0.0, ge=0.0, lt=1.0)


def reference_layers() -> List[LayerSpec]:
    """Layer list of the reference CNN, input to output"""
    return [
        LayerSpec(name="conv1", kind=LayerKind.CONV, units=32, kernel=3, stride=2, activation="relu"),
        LayerSpec(name="conv2", kind=LayerKind.CONV, units=32, kernel=3, stride=2, activation="relu"),
        LayerSpec(name="dense1", kind=LayerKind.DENSE, units=64, activation="relu", dropout=0.2),
        LayerSpec(name="dense2", kind=LayerKind.DENSE, units=32, activation="relu", dropout=0.2),
        LayerSpec(name="head", kind=LayerKind.OUTPUT, units=10, activation="softmax", dropout=0.2),
    ]


class ModelConfig(BaseModel):
    """Reference CNN plus the number of output heads"""
    layers: List[LayerSpec] = Field(default_factory=reference_layers)
    head_count: int = Field(default=1, ge=1)
    input_shape: List[int] = Field(default_factory=lambda: [28, 28, 1])

    @field_validator("layers")
    @classmethod
    def layers_match_reference(cls, layers: List[LayerSpec]) -> List[LayerSpec]:
        if layers != reference_layers():
            raise ValueError("layer sequence must match the reference CNN")
        return layers

# ============================================================================
# SCENARIOS
# ============================================================================

class ScenarioKind(str, Enum):
    ITL = "itl"
    IDL_PERMUTE = "idl-permute"
    IDL_INVERT = "idl-invert"
    ICL_SPLIT = "icl"


class DataSource(str, Enum):
    MNIST = "mnist"
    FASHION_MNIST = "fashion_mnist"


class Split(str, Enum):
    TRAIN = "train"
    TEST = "test"


STANDARD_CLASS_SPLITS: List[List[int]] = [[0, 1], [2, 3], [4, 5], [6, 7], [8, 9]]


class ScenarioSpec(BaseModel):
    kind: ScenarioKind
    seed: int = 0
    task_count: int = Field(default=2, ge=2)
    permutation_seed: int = 0
    class_groups: List[List[int]] = Field(default_factory=lambda: [list(g) for g in STANDARD_CLASS_SPLITS])
    sources: List[DataSource] = Field(
        default_factory=lambda: [DataSource.MNIST, DataSource.FASHION_MNIST]
    )

    @field_validator("class_groups")
    @classmethod
    def groups_are_disjoint(cls, groups: List[List[int]]) -> List[List[int]]:
        seen = set()
        for group in groups:
            for label in group:
                if not 0 <= label <= 9:
                    raise ValueError(f"class {label} outside 0..9")
                if label in seen:
                    raise ValueError(f"class {label} appears in more than one group")
                seen.add(label)
        return groups

    @model_validator(mode="after")
    def task_count_fits_kind(self) -> "ScenarioSpec":
        limits = {
            ScenarioKind.ITL: len(self.sources),
            ScenarioKind.IDL_INVERT: 2,
            ScenarioKind.ICL_SPLIT: len(self.class_groups),
        }
        limit = limits.get(self.kind)
        if limit is not None and self.task_count > limit:
            raise ValueError(f"{self.kind.value} supports at most {limit} tasks")
        return self

# ============================================================================
# TRAINING & PATH INTEGRAL CONFIGURATION
# ============================================================================

class OptimizerKind(str, Enum):
    ADAM = "adam"
    SGD = "sgd"


class TrainConfig(BaseModel):
    epochs: int = Field(default=10, ge=1)
    batch_size: int = Field(default=128, ge=1)
    lr: float = Field(default=0.001, ge=0.0)
    beta1: float = Field(default=0.9, ge=0.0, lt=1.0)
    beta2: float = Field(default=0.999, ge=0.0, lt=1.0)
    epsilon: float = Field(default=1e-8, gt=0.0)
    optimizer: OptimizerKind = OptimizerKind.ADAM
    train_limit: Optional[int] = Field(default=None, ge=1)


class Quadrature(str, Enum):
    LEFT_RIEMANN = "left"
    TRAPEZOID = "trapezoid"


class TrackingWindow(str, Enum):
    FULL = "full"
    FIRST_EPOCH = "first-epoch"


class PathIntegralConfig(BaseModel):
    quadrature: Quadrature = Quadrature.TRAPEZOID
    substeps: int = Field(default=1, ge=1)
    eval_set_size: int = Field(default=1024, ge=1)
    eval_set_seed: Optional[int] = None
    window: TrackingWindow = TrackingWindow.FULL
    relative_error_floor: float = Field(default=1e-8, gt=0.0)

# ============================================================================
# ATTRIBUTION RESULTS
# ============================================================================

class BlockInfo(BaseModel):
    """Identity of one parameter block, in model order"""
    name: str
    kind: BlockKind
    shape: List[int]
    position: int
    head_id: Optional[int] = None

    @property
    def n_elements(self) -> int:
        count = 1
        for extent in self.shape:
            count *= extent
        return count


class BlockReport(BaseModel):
    name: str
    kind: BlockKind
    shape: List[int]
    position: int
    head_id: Optional[int] = None
    n_elements: int
    delta_sum: float
    abs_delta_sum: float


class AttributionReport(BaseModel):
    """Finalized attribution of one transition (task A -> task B)"""
    scenario: Optional[ScenarioKind] = None
    transition: int = 0
    head_id_a: int = 0
    steps_recorded: int
    loss_start: float
    loss_end: float
    exact_delta: float
    approx_delta: float
    relative_error: float
    eval_fingerprint: str
    blocks: List[BlockReport]
    loss_trace: List[float] = Field(default_factory=list)
    accuracy_a_before: Optional[float] = None
    accuracy_a_after: Optional[float] = None
    accuracy_b_after: Optional[float] = None
    path_config: PathIntegralConfig
    train_config: Optional[TrainConfig] = None


class RunResult(BaseModel):
    run_index: int
    seed: int
    scenario: ScenarioKind
    reports: List[AttributionReport]

# ============================================================================
# AGGREGATION & STATISTICS
# ============================================================================

class LayerAggregate(BaseModel):
    block: str
    kind: BlockKind
    position: int
    n_elements: int
    signed_sum: float
    abs_sum: float
    mean_per_element: float
    abs_element_sum: float


class BlockStats(BaseModel):
    block: str
    kind: BlockKind
    position: int
    n_elements: int
    sum_mean: float
    sum_std: float
    abs_sum_mean: float
    abs_sum_std: float
    per_element_mean: float
    per_element_std: float


class MultiRunStats(BaseModel):
    scenario: str
    transition: int = 0
    run_count: int
    blocks: List[BlockStats]
    exact_delta_mean: float
    exact_delta_std: float
    approx_delta_mean: float
    relative_error_mean: float


class FigureMode(str, Enum):
    SUM = "sum"
    MEAN = "mean"


class ExportFormat(str, Enum):
    CSV = "csv"
    JSON = "json"
    SVG = "svg"


class CheckResult(BaseModel):
    """Outcome of one verification check"""
    name: str
    passed: bool
    details: Dict[str, Any] = Field(default_factory=dict)


class RunManifest(BaseModel):
    format_version: int = 1
    scenario: ScenarioSpec
    seeds: List[int]
    model: ModelConfig
    train: TrainConfig
    path: PathIntegralConfig
    data_dir: str
    artifacts: Dict[str, List[str]] = Field(default_factory=dict)
    started_at: datetime
    finished_at: Optional[datetime] = None
    host: Dict[str, Any] = Field(default_factory=dict)

# ============================================================================
# HEALTH & STATUS MODELS
# ============================================================================

class HealthResponse(BaseModel):
    """Health check response"""
    status: str
    timestamp: datetime = Field(default_factory=datetime.utcnow)
    version: str
    uptime: Optional[float] = None
    datasets_cached: List[str] = Field(default_factory=list)
    experiments: int = 0


class ExperimentSummary(BaseModel):
    id: str
    scenario: Optional[str] = None
    run_count: int
    transitions: int
    started_at: Optional[datetime] = None

# ============================================================================
# ERROR MODELS
# ============================================================================

class ErrorResponse(BaseModel):
    """Standardized error response"""
    success: bool = False
    error: str
    error_code: str
    timestamp: datetime = Field(default_factory=datetime.utcnow)

# ============================================================================
# CONFIGURATION
# ============================================================================

class AppConfig(BaseModel):
    name: str = "forgetloc"
    version: str = "0.1.0"
    debug: bool = False
    host: str = "127.0.0.1"
    port: int = 8000
    reload: bool = False


class FetchConfig(BaseModel):
    cache_dir: str
    mirrors: Dict[DataSource, str]
    timeout: float = Field(default=60.0, gt=0.0)
