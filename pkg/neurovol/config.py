"""
Config - Declarative pipeline configuration
One JSON document validated by pydantic, overridable field by field from the CLI
"""

import json
import logging
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional, Sequence, Tuple

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from .errors import ConfigError

logger = logging.getLogger('NeuroVol.Config')

Stage = Literal["pretrain", "finetune", "base"]

# Stage defaults for the constant learning rate and the epoch cap
STAGE_DEFAULTS: Dict[str, Dict[str, Any]] = {
    "pretrain": {"lr": 5e-5, "max_epochs": 200},
    "finetune": {"lr": 1e-6, "max_epochs": 100},
    "base": {"lr": 5e-5, "max_epochs": 300},
}


class _Frozen(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")


class PreprocessConfig(_Frozen):
    """Liquidity and range filters applied while ingesting raw quotes"""

    min_bid: float = Field(0.0, ge=0.0)
    max_rel_spread: float = Field(0.5, gt=0.0)
    k_range: Tuple[float, float] = (-0.8, 0.8)
    tau_range: Tuple[float, float] = (7.0 / 365.0, 3.0)
    dedup: bool = True

    @field_validator("k_range", "tau_range")
    @classmethod
    def _ordered(cls, value: Tuple[float, float]) -> Tuple[float, float]:
        if value[0] >= value[1]:
            raise ValueError(f"range must be ordered, got {value}")
        return value


class RegimeParams(_Frozen):
    """Ranges the synthetic ground-truth parameters are drawn from"""

    atm_vol: Tuple[float, float] = (0.12, 0.35)
    term_slope: Tuple[float, float] = (-0.06, 0.04)
    rho: Tuple[float, float] = (-0.8, -0.2)
    eta: Tuple[float, float] = (0.6, 1.8)
    gamma: Tuple[float, float] = (0.25, 0.5)
    nu: Tuple[float, float] = (0.3, 1.4)
    persistence: float = Field(0.95, ge=0.0, lt=1.0)


class SyntheticMarketConfig(_Frozen):
    n_days: int = Field(250, ge=1)
    seed: int = 7
    start_date: str = "2019-01-02"
    generator: Literal["sabr_mixture", "ssvi_random"] = "ssvi_random"
    regime_params: RegimeParams = RegimeParams()
    noise_bps: float = Field(30.0, ge=0.0)
    quotes_per_day: Tuple[int, int] = (260, 420)
    spot: float = Field(100.0, gt=0.0)
    rate_range: Tuple[float, float] = (0.0, 0.05)
    half_spread: float = Field(0.01, ge=0.0, lt=1.0)
    maturity_shares: Dict[str, float] = {"short": 0.72, "mid": 0.24, "long": 0.04}
    moneyness_shares: Dict[str, float] = {"atm": 0.50, "ntm": 0.41, "ftm": 0.09}
    expiry_days: Dict[str, List[int]] = {
        "short": [12, 19, 26, 33, 47, 61, 75, 89],
        "mid": [120, 180, 270, 360],
        "long": [540, 730, 1090],
    }
    k_max: float = Field(0.5, gt=0.2)

    @field_validator("maturity_shares", "moneyness_shares")
    @classmethod
    def _sum_to_one(cls, value: Dict[str, float]) -> Dict[str, float]:
        if abs(sum(value.values()) - 1.0) > 1e-9:
            raise ValueError(f"proportions must sum to 1, got {value}")
        return value

    @model_validator(mode="after")
    def _buckets_known(self) -> "SyntheticMarketConfig":
        if set(self.maturity_shares) != {"short", "mid", "long"}:
            raise ValueError("maturity_shares needs keys short, mid, long")
        if set(self.moneyness_shares) != {"atm", "ntm", "ftm"}:
            raise ValueError("moneyness_shares needs keys atm, ntm, ftm")
        if set(self.expiry_days) != {"short", "mid", "long"}:
            raise ValueError("expiry_days needs keys short, mid, long")
        return self


class SurfaceGridConfig(_Frozen):
    """Dense grid the SABR prior surface is evaluated on"""

    k_min: float = -0.5
    k_max: float = 0.5
    k_step: float = Field(0.025, gt=0.0)
    # None: observed slice maturities plus their midpoints
    tau_grid: Optional[List[float]] = None

    def k_grid(self) -> List[float]:
        return grid_points(self.k_min, self.k_max, self.k_step)


class PriorConfig(_Frozen):
    beta: float = Field(1.0, ge=0.0, le=1.0)
    grid: SurfaceGridConfig = SurfaceGridConfig()


class ModelConfig(_Frozen):
    """Architecture constants of the volatility neural process"""

    d_r: int = Field(128, ge=4)
    L: int = Field(3, ge=1)
    L_prime: int = Field(3, ge=1)
    n_h: int = Field(4, ge=1)
    mlp_layers: int = Field(3, ge=1)
    mlp_width: int = Field(128, ge=1)
    ffn_multiplier: int = Field(4, ge=1)
    coord_scale: Tuple[float, float] = (0.5, 2.0)
    ln_eps: float = Field(1e-5, ge=0.0)
    log_var_bounds: Tuple[float, float] = (-12.0, 4.0)

    @model_validator(mode="after")
    def _head_split(self) -> "ModelConfig":
        if self.d_r % self.n_h != 0:
            raise ValueError(f"d_r={self.d_r} is not divisible by n_h={self.n_h}")
        if self.d_r % 4 != 0:
            raise ValueError("d_r must be divisible by 4 for the two-axis sinusoidal encoding")
        return self

    @property
    def d_k(self) -> int:
        return self.d_r // self.n_h

    @property
    def d_v(self) -> int:
        return self.d_r // self.n_h


class TrainConfig(_Frozen):
    stage: Stage = "base"
    lr: float = Field(5e-5, gt=0.0)
    max_epochs: int = Field(300, ge=1)
    batch_tasks: int = Field(16, ge=1)
    context_range: Tuple[int, int] = (20, 200)
    synthetic_targets: int = Field(256, ge=1)
    val_context: int = Field(100, ge=1)
    weight_decay: float = Field(0.01, ge=0.0)
    grad_clip: float = Field(1.0, gt=0.0)
    betas: Tuple[float, float] = (0.9, 0.999)
    eps: float = Field(1e-8, gt=0.0)
    seed: int = 0
    early_stop_patience: int = Field(20, ge=1)

    @field_validator("context_range")
    @classmethod
    def _context_range(cls, value: Tuple[int, int]) -> Tuple[int, int]:
        if value[0] < 1 or value[0] > value[1]:
            raise ValueError(f"context_range must satisfy 1 <= n_min <= n_max, got {value}")
        return value

    @classmethod
    def for_stage(cls, stage: str, **overrides: Any) -> "TrainConfig":
        """Build a config with the stage's default learning rate and epoch cap"""
        if stage not in STAGE_DEFAULTS:
            raise ConfigError(f"Unknown training stage: {stage}")
        fields = {"stage": stage, **STAGE_DEFAULTS[stage], **overrides}
        return cls(**fields)


class SplitConfig(_Frozen):
    n_test: int = Field(50, ge=0)
    val_fraction: float = Field(0.1, ge=0.0, lt=1.0)


class EvalConfig(_Frozen):
    n_context: int = Field(100, ge=1)
    seed: int = 0
    sweep_n: List[int] = [10, 25, 50, 100, 200]
    k_bins: List[float] = [-0.8, -0.2, -0.05, 0.05, 0.2, 0.8]
    tau_bins: List[float] = [0.0, 0.25, 1.0, 3.0]
    arb_k_grid: Tuple[float, float, float] = (-1.0, 1.0, 0.02)
    fd_step: float = Field(1e-3, gt=0.0)


class PipelineConfig(_Frozen):
    """Top-level configuration shared by every CLI subcommand"""

    seed: int = 7
    market: SyntheticMarketConfig = SyntheticMarketConfig()
    preprocess: PreprocessConfig = PreprocessConfig()
    prior: PriorConfig = PriorConfig()
    model: ModelConfig = ModelConfig()
    pretrain: TrainConfig = TrainConfig.for_stage("pretrain")
    finetune: TrainConfig = TrainConfig.for_stage("finetune")
    base: TrainConfig = TrainConfig.for_stage("base")
    split: SplitConfig = SplitConfig()
    eval: EvalConfig = EvalConfig()

    def stage(self, name: str) -> TrainConfig:
        if name not in STAGE_DEFAULTS:
            raise ConfigError(f"Unknown training stage: {name}")
        return getattr(self, name)


def grid_points(lo: float, hi: float, step: float) -> List[float]:
    """Inclusive arithmetic grid lo, lo+step, ..., hi (rounded to the step count)"""
    if step <= 0 or hi < lo:
        raise ConfigError(f"Invalid grid {lo}:{hi}:{step}")
    count = int(round((hi - lo) / step)) + 1
    return [lo + i * step for i in range(count)]


def _parse_value(raw: str) -> Any:
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def apply_overrides(document: Dict[str, Any], overrides: Sequence[str]) -> Dict[str, Any]:
    """
    Apply `section.field=value` overrides to a raw config document

    Args:
        document: Parsed JSON config
        overrides: Assignments; values are parsed as JSON, else kept as strings

    Returns:
        The updated document (modified in place)
    """
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"Override must look like section.field=value, got '{item}'")
        path, raw = item.split("=", 1)
        keys = [key for key in path.strip().split(".") if key]
        if not keys:
            raise ConfigError(f"Empty override path in '{item}'")
        node = document
        for key in keys[:-1]:
            child = node.setdefault(key, {})
            if not isinstance(child, dict):
                raise ConfigError(f"Override path '{path}' crosses a non-section value")
            node = child
        node[keys[-1]] = _parse_value(raw)
    return document


def load_config(path: Optional[Path] = None, overrides: Sequence[str] = ()) -> PipelineConfig:
    """
    Load the pipeline config from a JSON file and apply CLI overrides

    Args:
        path: Config file; None means all defaults
        overrides: `section.field=value` assignments applied after loading

    Returns:
        Validated PipelineConfig
    """
    document: Dict[str, Any] = {}
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"Config file not found: {path}")
        try:
            document = json.loads(path.read_text(encoding="utf-8") or "{}")
        except json.JSONDecodeError as e:
            raise ConfigError(f"Config file {path} is not valid JSON: {e}") from e
    apply_overrides(document, overrides)
    # Stage sections start from their stage defaults, then take file values
    for stage in STAGE_DEFAULTS:
        section = document.get(stage, {})
        if not isinstance(section, dict):
            raise ConfigError(f"Config section '{stage}' must be an object")
        document[stage] = {"stage": stage, **STAGE_DEFAULTS[stage], **section}
    try:
        config = PipelineConfig.model_validate(document)
    except ValidationError as e:
        raise ConfigError(f"Invalid configuration: {e}") from e
    logger.debug(f"Loaded config from {path or 'defaults'} with {len(overrides)} overrides")
    return config
