from datetime import datetime
from enum import Enum
from typing import Any, Dict, List, Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator


class NeuronKind(str, Enum):
    PSN = "psn"
    MASKED_PSN = "masked-psn"
    SLIDING_PSN = "spsn"
    LIF = "lif"
    IF = "if"
    LIF_NO_RESET = "lif-no-reset"
    IF_NO_RESET = "if-no-reset"

    @property
    def is_vanilla(self) -> bool:
        return self in (NeuronKind.LIF, NeuronKind.IF, NeuronKind.LIF_NO_RESET, NeuronKind.IF_NO_RESET)


class ResetMode(str, Enum):
    HARD = "hard"
    SOFT = "soft"
    NONE = "none"


class SurrogateConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    alpha: float = Field(default=4.0, gt=0)
    # Replace the step function by its smooth arctan primitive in the forward pass.
    # Only gradient checks turn this on.
    relaxed: bool = False


class LinearRecurrence(BaseModel):
    """h[t] = a * h[t-1] + b * x[t], starting from h_init."""

    model_config = ConfigDict(frozen=True)

    a: float
    b: float
    h_init: float = 0.0

    @classmethod
    def integrate_and_fire(cls) -> "LinearRecurrence":
        return cls(a=1.0, b=1.0, h_init=0.0)

    @classmethod
    def leaky(cls, tau_m: float) -> "LinearRecurrence":
        if tau_m <= 1:
            raise ValueError(f"tau_m must be > 1, got {tau_m}")
        return cls(a=1.0 - 1.0 / tau_m, b=1.0 / tau_m, h_init=0.0)


class VanillaNeuronParams(BaseModel):
    model_config = ConfigDict(frozen=True)

    tau_m: Optional[float] = None  # None selects the IF neuron
    v_th: float = 1.0
    v_reset: float = 0.0
    reset_mode: ResetMode = ResetMode.HARD
    detach_reset: bool = False

    @field_validator("tau_m")
    @classmethod
    def _tau_above_one(cls, value: Optional[float]) -> Optional[float]:
        if value is not None and value <= 1:
            raise ValueError(f"tau_m must be > 1, got {value}")
        return value

    @model_validator(mode="after")
    def _threshold_above_reset(self) -> "VanillaNeuronParams":
        if self.reset_mode == ResetMode.HARD and self.v_th <= self.v_reset:
            raise ValueError(f"hard reset needs v_th > v_reset, got {self.v_th} <= {self.v_reset}")
        return self

    @property
    def is_leaky(self) -> bool:
        return self.tau_m is not None

    def recurrence(self) -> LinearRecurrence:
        if self.tau_m is None:
            return LinearRecurrence.integrate_and_fire()
        return LinearRecurrence.leaky(self.tau_m)


class NeuronSpec(BaseModel):
    kind: NeuronKind
    order: Optional[int] = Field(default=None, ge=1)  # k for masked/sliding PSN; None means T
    tau_m: float = Field(default=2.0, gt=1)
    v_th: float = 1.0
    v_reset: float = 0.0
    reset_mode: ResetMode = ResetMode.HARD
    detach_reset: bool = False
    lambda_init: float = Field(default=0.0, ge=0, le=1)


class LayerSpec(BaseModel):
    kind: Literal["linear", "neuron"]
    in_features: Optional[int] = Field(default=None, ge=1)
    out_features: Optional[int] = Field(default=None, ge=1)
    neuron: Optional[NeuronSpec] = None

    @model_validator(mode="after")
    def _fields_for_kind(self) -> "LayerSpec":
        if self.kind == "linear" and (self.in_features is None or self.out_features is None):
            raise ValueError("linear layers need in_features and out_features")
        if self.kind == "neuron" and self.neuron is None:
            raise ValueError("neuron layers need a neuron spec")
        return self


class ModelSpec(BaseModel):
    time_steps: int = Field(ge=1)
    layers: List[LayerSpec]
    head: Literal["mean", "per_step"] = "mean"
    seed: int = 0

    @model_validator(mode="after")
    def _synapse_before_neuron(self) -> "ModelSpec":
        if not self.layers:
            raise ValueError("a model needs at least one layer")
        previous = None
        for index, layer in enumerate(self.layers):
            if layer.kind == "neuron" and (previous is None or previous.kind != "linear"):
                raise ValueError(f"neuron layer {index} must follow a linear synapse layer")
            previous = layer
        if self.layers[-1].kind != "linear":
            raise ValueError("the classifier head must be a linear layer")
        return self

    @classmethod
    def classifier(cls, neuron: NeuronSpec, time_steps: int, in_features: int, hidden: int,
                   num_classes: int, depth: int = 1, seed: int = 0, head: str = "mean") -> "ModelSpec":
        """Linear -> neuron blocks followed by a linear classifier."""
        layers: List[LayerSpec] = []
        width = in_features
        for _ in range(depth):
            layers.append(LayerSpec(kind="linear", in_features=width, out_features=hidden))
            layers.append(LayerSpec(kind="neuron", neuron=neuron))
            width = hidden
        layers.append(LayerSpec(kind="linear", in_features=width, out_features=num_classes))
        return cls(time_steps=time_steps, layers=layers, head=head, seed=seed)


class OptimizerKind(str, Enum):
    SGD_MOMENTUM = "sgd_momentum"
    ADAM_LIKE = "adam_like"


class LossKind(str, Enum):
    CE = "ce"
    TET = "tet"


class TrainConfig(BaseModel):
    epochs: int = Field(default=50, ge=1)
    batch_size: int = Field(default=64, ge=1)
    # Zero is accepted so a run can be replayed with frozen parameters.
    learning_rate: float = Field(default=0.1, ge=0)
    optimizer_kind: OptimizerKind = OptimizerKind.SGD_MOMENTUM
    momentum: float = Field(default=0.9, ge=0, lt=1)
    weight_decay: float = Field(default=0.0, ge=0)
    loss_kind: LossKind = LossKind.CE
    label_smoothing: float = Field(default=0.0, ge=0, lt=1)
    lambda_schedule_enabled: bool = True
    lr_schedule: Literal["cosine", "step", "constant"] = "cosine"
    step_size: int = Field(default=30, ge=1)
    gamma: float = Field(default=0.1, gt=0)
    grad_clip: Optional[float] = Field(default=None, gt=0)
    seed: int = 0


class HistoryRecord(BaseModel):
    epoch: int
    split: Literal["train", "test"]
    metric: str
    value: float


class BenchMode(str, Enum):
    INFERENCE = "inference"
    TRAINING = "training"


BENCH_KINDS = ("lif", "psn", "if", "lif_parallel", "masked_psn", "spsn", "spsn_conv")


class BenchConfig(BaseModel):
    neuron_kinds: List[str] = Field(default_factory=lambda: ["lif", "psn"])
    n_values: List[int] = Field(default_factory=lambda: [2 ** 8, 2 ** 12, 2 ** 16, 2 ** 20])
    t_values: List[int] = Field(default_factory=lambda: [2, 4, 8, 16, 32, 64])
    mode: BenchMode = BenchMode.INFERENCE
    warmup_iters: int = Field(default=1, ge=0)
    measured_iters: int = Field(default=3, ge=3)
    seed: int = 0
    threads: int = Field(default=1, ge=1)
    skip_large: bool = False
    large_n: int = Field(default=2 ** 20, ge=1)

    @field_validator("neuron_kinds")
    @classmethod
    def _known_kinds(cls, kinds: List[str]) -> List[str]:
        unknown = [k for k in kinds if k not in BENCH_KINDS]
        if unknown:
            raise ValueError(f"unknown neuron kinds {unknown}; expected any of {list(BENCH_KINDS)}")
        if not kinds:
            raise ValueError("at least one neuron kind is required")
        return kinds

    @field_validator("n_values", "t_values")
    @classmethod
    def _positive(cls, values: List[int]) -> List[int]:
        if not values or any(v < 1 for v in values):
            raise ValueError(f"grid values must be positive, got {values}")
        return values


class BenchRecord(BaseModel):
    neuron_kind: str
    N: int
    T: int
    mode: BenchMode
    wall_time_seconds: Optional[float] = Field(default=None, gt=0)
    ratio_vs_baseline: Optional[float] = None
    status: Literal["ok", "skipped"] = "ok"
    threads: int = 1


class MemoryRecord(BaseModel):
    configuration: Literal["no_neuron", "if_neuron", "psn"]
    T: int
    N: int
    peak_tracked_bytes: int


class MemoryReport(BaseModel):
    T: int
    N: int
    records: List[MemoryRecord]
    delta_if: int
    delta_psn: int
    ratio: float
    gap_per_neuron: float  # (delta_if - delta_psn) / (T * N)


class RunManifest(BaseModel):
    command: str
    config: Dict[str, Any]
    seed: int
    version: str
    threads: int
    started_at: datetime
    finished_at: Optional[datetime] = None
    outputs: List[str] = Field(default_factory=list)


class StoredRun(BaseModel):
    id: int
    command: str
    manifest: RunManifest
    created_at: datetime


class DataSpec(BaseModel):
    """``toy`` for the synthetic temporal task or ``idx:<dir>`` for an MNIST-style directory."""

    source: str = "toy"
    num_classes: Optional[int] = Field(default=None, ge=2)  # None: 4 for toy, detected from IDX labels
    samples_per_class: int = Field(default=500, ge=1)
    test_samples_per_class: int = Field(default=125, ge=1)
    seed: int = 0

    @field_validator("source")
    @classmethod
    def _known_source(cls, value: str) -> str:
        if value != "toy" and not (value.startswith("idx:") and len(value) > 4):
            raise ValueError(f"data source must be 'toy' or 'idx:<dir>', got '{value}'")
        return value
