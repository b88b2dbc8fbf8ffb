from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator
from typing import Dict, List, Literal, Optional, Tuple

DEFAULT_LEADS = [15, 20, 25, 30, 35, 40, 45]
DEFAULT_QUANTILES = [0.05, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 0.95]

FusionKind = Literal["attention", "concat", "gate", "none"]
NoiseMode = Literal["deterministic", "stochastic", "off"]
StrategyKind = Literal["layer_noise", "fixed_layer_noise", "ic_perturb"]


# --- Run configuration sections ---
# Every section forbids unknown keys so a typo in a config file is an error,
# never a silently ignored setting.
class GridSection(BaseModel):
    model_config = ConfigDict(extra="forbid")

    height: int = Field(16, gt=0)
    width: int = Field(32, gt=0)
    patch_size: int = Field(4, gt=0)
    start_year: int = 2000
    years: int = Field(8, ge=2)
    noise_amplitude: float = Field(1.0, ge=0.0)
    surface_vars: List[str] = Field(default_factory=lambda: ["lsm", "t2m"])
    upper_vars: List[str] = Field(default_factory=lambda: ["z", "t"])
    levels: List[int] = Field(default_factory=lambda: [500, 850])

    @model_validator(mode="after")
    def _patches_divide_grid(self):
        if self.height % self.patch_size or self.width % self.patch_size:
            raise ValueError(
                f"patch_size {self.patch_size} must divide the {self.height}x{self.width} grid"
            )
        return self


class ModelSection(BaseModel):
    model_config = ConfigDict(extra="forbid")

    embed_dim: int = Field(64, ge=4)
    depth: int = Field(4, ge=0)
    heads: int = Field(4, ge=1)
    mlp_ratio: float = Field(4.0, gt=0.0)
    fusion: FusionKind = "attention"
    fusion_rank: int = Field(16, ge=1)
    noise: bool = True
    noise_layers: List[int] = Field(default_factory=list)  # empty means every block
    gain_init: float = Field(1e-2, ge=0.0)
    # Kept as metadata of the full preset only; never applied.
    drop_path: float = Field(0.0, ge=0.0, le=1.0)
    dropout: float = Field(0.0, ge=0.0, le=1.0)
    dtype: Literal["float32", "float64"] = "float32"

    @model_validator(mode="after")
    def _heads_divide_dim(self):
        if self.embed_dim % 2:
            raise ValueError("embed_dim must be even (Fourier sin/cos pairing)")
        if self.embed_dim % self.heads:
            raise ValueError(f"heads {self.heads} must divide embed_dim {self.embed_dim}")
        return self


class TrainSection(BaseModel):
    model_config = ConfigDict(extra="forbid")

    lead_times: List[int] = Field(default_factory=lambda: list(DEFAULT_LEADS))
    history: int = Field(5, ge=1)
    segment: int = Field(5, ge=1)
    lr: float = Field(5e-4, gt=0.0)
    weight_decay: float = Field(1e-5, ge=0.0)
    beta1: float = Field(0.9, ge=0.0, lt=1.0)
    beta2: float = Field(0.99, ge=0.0, lt=1.0)
    warmup_steps: int = Field(200, ge=0)
    total_steps: int = Field(4000, gt=0)
    batch_size: int = Field(8, ge=1)
    seed: int = 0
    noise_sigma: float = Field(1.0, ge=0.0)
    log_every: int = Field(50, ge=1)

    @field_validator("lead_times")
    @classmethod
    def _leads_step_five(cls, leads: List[int]) -> List[int]:
        if not leads:
            raise ValueError("lead_times must not be empty")
        for a, b in zip(leads, leads[1:]):
            if b - a != 5:
                raise ValueError(f"lead_times must increase in steps of 5, got {leads}")
        return leads

    @model_validator(mode="after")
    def _warmup_before_total(self):
        if self.warmup_steps >= self.total_steps:
            raise ValueError("warmup_steps must be smaller than total_steps")
        return self


class EnsembleSection(BaseModel):
    model_config = ConfigDict(extra="forbid")

    members: int = Field(51, ge=1)
    strategy: StrategyKind = "layer_noise"
    sigma: float = Field(1.0, ge=0.0)
    ic_amplitude: float = Field(0.1, ge=0.0)
    base_seed: int = Field(0, ge=0)  # seed 0 belongs to the control member
    quantiles: List[float] = Field(default_factory=lambda: list(DEFAULT_QUANTILES))
    sweep_sigmas: List[float] = Field(default_factory=lambda: [0.0, 0.5, 1.0, 1.5, 2.0])
    rqe_epsilon: float = Field(1e-6, gt=0.0)

    @field_validator("quantiles")
    @classmethod
    def _levels_in_unit_interval(cls, levels: List[float]) -> List[float]:
        if not levels or any(not 0.0 <= a <= 1.0 for a in levels):
            raise ValueError("quantile levels must lie in [0, 1]")
        return levels


class PathsSection(BaseModel):
    model_config = ConfigDict(extra="forbid")

    data_dir: str = "data"
    checkpoint_dir: str = "checkpoints"
    output_dir: str = "outputs"


class RunConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    grid: GridSection = Field(default_factory=GridSection)
    model: ModelSection = Field(default_factory=ModelSection)
    train: TrainSection = Field(default_factory=TrainSection)
    ensemble: EnsembleSection = Field(default_factory=EnsembleSection)
    paths: PathsSection = Field(default_factory=PathsSection)


# --- Runtime objects ---
class NoiseConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    sigma: float = Field(1.0, ge=0.0)
    enabled_layers: Optional[Tuple[int, ...]] = None  # None means every block
    mode: NoiseMode = "deterministic"
    seed: int = 0
    # Fixed-layer noise: g_n replaced by a constant map.
    fixed_scale: bool = False

    def layer_enabled(self, layer: int) -> bool:
        return self.enabled_layers is None or layer in self.enabled_layers


class PerturbStrategy(BaseModel):
    model_config = ConfigDict(frozen=True)

    kind: StrategyKind = "layer_noise"
    sigma: float = Field(1.0, ge=0.0)
    enabled_layers: Optional[Tuple[int, ...]] = None
    ic_amplitude: float = Field(0.1, ge=0.0)


# --- Persistence ---
class TensorEntry(BaseModel):
    name: str
    shape: List[int]
    dtype: Literal["f32", "f64"] = "f32"
    offset: int
    nbytes: int


class CheckpointManifest(BaseModel):
    version: int
    lead: int
    step: int
    optimizer_step: int = 0
    tensors: List[TensorEntry]
    norm_mean: List[float]
    norm_std: List[float]
    config: dict = Field(default_factory=dict)


class TrainTaskResult(BaseModel):
    status: Literal["SUCCESS", "FAILURE"]
    lead: int
    checkpoint: Optional[str] = None
    final_loss: Optional[float] = None
    steps: int = 0
    error: Optional[str] = None
    error_type: Optional[str] = None
    exit_code: int = 0


class EvalRow(BaseModel):
    variable: str
    lead: int
    metric: str
    value: float


class EvalReport(BaseModel):
    rows: List[EvalRow] = Field(default_factory=list)
    metadata: Dict[str, str] = Field(default_factory=dict)

    def value(self, variable: str, lead: int, metric: str) -> Optional[float]:
        for row in self.rows:
            if (row.variable, row.lead, row.metric) == (variable, lead, metric):
                return row.value
        return None
