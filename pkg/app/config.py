import hashlib
import json
from pathlib import Path
from typing import Annotated, Any, Dict, List, Optional, Union

from dotenv import dotenv_values
from pydantic import Field, ValidationError, field_validator
from pydantic_settings import BaseSettings, NoDecode, SettingsError
from loguru import logger

from app.exceptions import ConfigurationError
from app.models.schemas import (
    BilevelConfig,
    Method,
    OptimizerKind,
    PairUniverse,
    SamplingScheme,
    SynthConfig,
)


def _split_list(v: Any) -> Any:
    if isinstance(v, str):
        parts = [part.strip() for part in v.replace(";", ",").split(",")]
        return [part for part in parts if part]
    return v


class Settings(BaseSettings):
    """Run settings with environment variable and config file support."""

    # Run
    SEED: int = Field(default=0)
    SEEDS: Annotated[List[int], NoDecode] = Field(default_factory=list)
    OUT_DIR: str = Field(default="runs/latest")
    DETERMINISTIC: bool = Field(default=False)
    LOG_LEVEL: str = Field(default="INFO")
    LOG_DIR: Optional[str] = Field(default=None)
    CHECKPOINT_EVERY: int = Field(default=0, ge=0)

    # Data
    RATINGS_PATH: Optional[str] = Field(default=None)
    TEST_RATINGS_PATH: Optional[str] = Field(default=None)
    DATA_DIR: Optional[str] = Field(default=None)
    RUN_DIR: Optional[str] = Field(default=None)
    POSITIVE_THRESHOLD: float = Field(default=4.0)
    PAIR_UNIVERSE: PairUniverse = Field(default=PairUniverse.GRID)
    ACTIVE_FRACTION: float = Field(default=0.2, gt=0.0, le=1.0)
    HYPER_VAL_FRACTION: float = Field(default=0.1, gt=0.0, lt=1.0)
    TEST_FRACTION: float = Field(default=0.1, gt=0.0, lt=1.0)

    # Semi-synthetic recipe
    MIN_USER_INTERACTIONS: int = Field(default=10, ge=0)
    MIN_ITEM_INTERACTIONS: int = Field(default=8, ge=0)
    MAX_USERS: int = Field(default=3000, ge=1)
    MAX_ITEMS: int = Field(default=3000, ge=1)
    GAMMA_SLOPE: float = Field(default=1.0)
    GAMMA_OFFSET: float = Field(default=3.5)
    POPULARITY_POWER: float = Field(default=1.0, ge=0.0)
    ACTIVITY_POWER: float = Field(default=0.5, ge=0.0)
    EXPOSURE_FLOOR: float = Field(default=0.01, gt=0.0, le=1.0)
    TEST_ITEMS_PER_USER: int = Field(default=10, ge=0)
    CONSTANT_GAMMA: Optional[float] = Field(default=None, ge=0.0, le=1.0)
    CONSTANT_EXPOSURE: Optional[float] = Field(default=None, gt=0.0, le=1.0)

    # Model and training
    METHOD: Method = Field(default=Method.UBO)
    METHODS: Annotated[List[Method], NoDecode] = Field(default_factory=list)
    DIM: int = Field(default=50, ge=1)
    INIT_SCALE: float = Field(default=0.1, ge=0.0)
    INNER_LR: float = Field(default=1e-3, gt=0.0)
    OUTER_LR: float = Field(default=1e-3, ge=0.0)
    BATCH_SIZE: int = Field(default=1024, ge=1)
    EPOCHS: int = Field(default=100, ge=0)
    WEIGHT_DECAY: float = Field(default=0.0, ge=0.0)
    WEIGHT_DECAY_GRID: Annotated[List[float], NoDecode] = Field(default_factory=list)
    OPTIMIZER: OptimizerKind = Field(default=OptimizerKind.ADAM)
    CLIP_FLOOR: float = Field(default=0.01, gt=0.0, le=1.0)
    PCC_EVERY: int = Field(default=1, ge=1)

    # Evaluation
    KS: Annotated[List[int], NoDecode] = Field(default_factory=lambda: [1, 2, 3])
    SNIPS_K: int = Field(default=3, ge=1)

    # Studies
    VARIANCE_GAMMAS: Annotated[List[float], NoDecode] = Field(default_factory=lambda: [0.2, 0.5, 0.8])
    VARIANCE_M_BARS: Annotated[List[float], NoDecode] = Field(default_factory=lambda: [0.01, 0.05, 0.1, 0.5, 1.0])
    VARIANCE_PS: Annotated[List[float], NoDecode] = Field(default_factory=lambda: [0.3, 0.5, 0.7])
    VARIANCE_SAMPLES: int = Field(default=1_000_000, ge=2)
    VARIANCE_SAMPLING: SamplingScheme = Field(default=SamplingScheme.STRATIFIED)
    GRAD_CHECK_INSTANCES: int = Field(default=20, ge=1)
    GRAD_CHECK_TOLERANCE: float = Field(default=1e-4, gt=0.0)
    FD_STEP: float = Field(default=1e-5, gt=0.0)

    @field_validator('SEEDS', 'METHODS', 'WEIGHT_DECAY_GRID', 'KS',
                     'VARIANCE_GAMMAS', 'VARIANCE_M_BARS', 'VARIANCE_PS', mode='before')
    @classmethod
    def split_lists(cls, v: Any) -> Any:
        """Accept comma separated strings from config files and env vars."""
        return _split_list(v)

    @field_validator('KS')
    @classmethod
    def validate_ks(cls, v: List[int]) -> List[int]:
        if not v or any(k < 1 for k in v):
            raise ValueError("KS must list integers >= 1")
        return v

    @field_validator('LOG_LEVEL')
    @classmethod
    def validate_log_level(cls, v: str) -> str:
        level = v.upper()
        if level not in {"TRACE", "DEBUG", "INFO", "SUCCESS", "WARNING", "ERROR", "CRITICAL"}:
            raise ValueError(f"unknown log level {v}")
        return level

    model_config = {
        "env_file": ".env",
        "env_file_encoding": "utf-8",
        "env_prefix": "EXPODEBIAS_",
        "case_sensitive": False,
        "extra": "ignore"
    }

    @property
    def seeds(self) -> List[int]:
        return list(self.SEEDS) if self.SEEDS else [self.SEED]

    @property
    def methods(self) -> List[Method]:
        return list(self.METHODS) if self.METHODS else [self.METHOD]

    def synth_config(self) -> SynthConfig:
        return SynthConfig(
            min_user_interactions=self.MIN_USER_INTERACTIONS,
            min_item_interactions=self.MIN_ITEM_INTERACTIONS,
            max_users=self.MAX_USERS,
            max_items=self.MAX_ITEMS,
            positive_threshold=self.POSITIVE_THRESHOLD,
            gamma_slope=self.GAMMA_SLOPE,
            gamma_offset=self.GAMMA_OFFSET,
            popularity_power=self.POPULARITY_POWER,
            activity_power=self.ACTIVITY_POWER,
            exposure_floor=self.EXPOSURE_FLOOR,
            test_items_per_user=self.TEST_ITEMS_PER_USER,
            constant_gamma=self.CONSTANT_GAMMA,
            constant_exposure=self.CONSTANT_EXPOSURE,
        )

    def bilevel_config(self, seed: Optional[int] = None, weight_decay: Optional[float] = None) -> BilevelConfig:
        return BilevelConfig(
            inner_lr=self.INNER_LR,
            outer_lr=self.OUTER_LR,
            batch_size=self.BATCH_SIZE,
            epochs=self.EPOCHS,
            seed=self.SEED if seed is None else seed,
            weight_decay=self.WEIGHT_DECAY if weight_decay is None else weight_decay,
            optimizer=self.OPTIMIZER,
            dim=self.DIM,
            init_scale=self.INIT_SCALE,
            clip_floor=self.CLIP_FLOOR,
            ks=tuple(self.KS),
            pcc_every=self.PCC_EVERY,
            checkpoint_every=self.CHECKPOINT_EVERY,
        )

    def config_hash(self) -> str:
        payload = json.dumps(self.model_dump(mode="json"), sort_keys=True)
        return hashlib.sha256(payload.encode("utf-8")).hexdigest()


def read_config_file(config_path: Union[str, Path]) -> Dict[str, str]:
    """Parse a flat key=value config file."""
    path = Path(config_path)
    if not path.is_file():
        raise FileNotFoundError(f"Config file not found: {path}")
    values = dotenv_values(path)
    return {key.upper(): value for key, value in values.items() if value is not None}


def get_config(config_path: Optional[Union[str, Path]] = None, **overrides: Any) -> Settings:
    """Load and validate settings; flags override config file values."""
    values: Dict[str, Any] = {}
    if config_path is not None:
        values.update(read_config_file(config_path))
    values.update({key.upper(): value for key, value in overrides.items() if value is not None})

    try:
        return Settings(**values)
    except ValidationError as e:
        # Field names only, values may hold paths or secrets
        fields = sorted({".".join(str(part) for part in err["loc"]) for err in e.errors()})
        logger.error(f"Configuration failed. Invalid values for: {', '.join(fields)}")
        raise ConfigurationError(f"invalid configuration for {', '.join(fields)}") from e
    except SettingsError as e:
        logger.error(f"Configuration failed while reading the environment: {e}")
        raise ConfigurationError(str(e)) from e
