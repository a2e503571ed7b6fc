"""
Type-safe configuration management using Pydantic.
Process settings come from environment variables (and .env); experiment
configs come from YAML files validated into the models below.
"""

import os
from typing import List, Optional

import yaml
from dotenv import load_dotenv
from pydantic import BaseModel, Field, ValidationError, field_validator, model_validator
from pydantic_settings import BaseSettings, SettingsConfigDict

from rwre_toolkit.errors import ConfigInvalid
from rwre_toolkit.models import ModelSpec

# Load environment variables from .env file at module import time
load_dotenv()

DEFAULT_LOG_FORMAT = "%(asctime)s - %(name)s - %(levelname)s - %(message)s"


class LoggingConfig(BaseModel):
    """Logging configuration with validation."""
    level: str = Field(default="INFO", description="Logging level")
    format: str = Field(default=DEFAULT_LOG_FORMAT)

    @field_validator('level')
    @classmethod
    def validate_log_level(cls, v):
        valid_levels = ['DEBUG', 'INFO', 'WARNING', 'ERROR', 'CRITICAL']
        if v.upper() not in valid_levels:
            raise ValueError(f'Log level must be one of: {valid_levels}')
        return v.upper()


class SimulationConfig(BaseModel):
    """Numerical defaults shared by all experiments."""
    workers: int = Field(default=1, ge=1, le=256, description="Worker processes for sampling")
    chunk_size: int = Field(default=4096, ge=64, le=1_048_576, description="Samples per random stream chunk")
    dp_horizon: int = Field(default=10_000, ge=1, description="Horizon used to approximate U by U_n")
    prune_threshold: float = Field(default=1e-16, ge=0.0, le=1e-8, description="DP states below this mass are dropped")
    rejection_budget_factor: float = Field(default=100.0, gt=1.0, description="Proposal cap as a multiple of 1/P(tau_0 > N)")
    max_rejection_proposals: int = Field(default=10_000_000, ge=1, description="Proposal cap when no exact survival is available")
    censor_flag_fraction: float = Field(default=0.01, gt=0.0, lt=1.0, description="Censored share that flags an MC estimate")
    precision_floor: float = Field(default=1e-2, gt=0.0, description="Largest propagated SE accepted by harmonic_limit_check")
    max_table_cells: int = Field(default=50_000_000, ge=1000, description="Size cap for full-path DP tables")


class StatisticsConfig(BaseModel):
    """Pass thresholds for statistical checks."""
    p_threshold: float = Field(default=0.01, gt=0.0, lt=1.0)
    exact_p_threshold: float = Field(default=0.001, gt=0.0, lt=1.0)
    se_multiplier: float = Field(default=4.0, gt=0.0)
    ratio_band: float = Field(default=0.01, gt=0.0, lt=1.0)

    @model_validator(mode='after')
    def validate_thresholds(self):
        if self.exact_p_threshold > self.p_threshold:
            raise ValueError('exact_p_threshold must not exceed p_threshold')
        return self


class Config(BaseSettings):
    """Main configuration class that loads from environment variables."""

    logging: LoggingConfig = Field(default_factory=LoggingConfig)
    simulation: SimulationConfig = Field(default_factory=SimulationConfig)
    statistics: StatisticsConfig = Field(default_factory=StatisticsConfig)

    model_config = SettingsConfigDict(
        env_file=".env",
        env_file_encoding="utf-8",
        env_nested_delimiter="__",
        extra="ignore",
    )


# Global configuration instance
config: Optional[Config] = None


def _env(name: str, alias: str, default: str) -> str:
    return os.getenv(name, os.getenv(alias, default))


def worker_override() -> Optional[int]:
    """Worker count from the environment, if one is set."""
    raw = os.getenv('SIMULATION__WORKERS') or os.getenv('RWRE_WORKERS')
    return int(raw) if raw else None


def load_config() -> Config:
    """
    Load configuration from environment variables.

    Returns:
        Config: Validated configuration object

    Raises:
        ValueError: If environment variables are invalid
    """
    global config

    load_dotenv()

    try:
        logging_config = LoggingConfig(
            level=_env('LOGGING__LEVEL', 'LOG_LEVEL', 'INFO'),
            format=_env('LOGGING__FORMAT', 'LOG_FORMAT', DEFAULT_LOG_FORMAT),
        )

        simulation_config = SimulationConfig(
            workers=int(_env('SIMULATION__WORKERS', 'RWRE_WORKERS', '1')),
            chunk_size=int(_env('SIMULATION__CHUNK_SIZE', 'RWRE_CHUNK_SIZE', '4096')),
            dp_horizon=int(_env('SIMULATION__DP_HORIZON', 'RWRE_DP_HORIZON', '10000')),
            prune_threshold=float(_env('SIMULATION__PRUNE_THRESHOLD', 'RWRE_PRUNE_THRESHOLD', '1e-16')),
            rejection_budget_factor=float(_env('SIMULATION__REJECTION_BUDGET_FACTOR', 'RWRE_REJECTION_BUDGET_FACTOR', '100')),
            max_rejection_proposals=int(_env('SIMULATION__MAX_REJECTION_PROPOSALS', 'RWRE_MAX_REJECTION_PROPOSALS', '10000000')),
            censor_flag_fraction=float(_env('SIMULATION__CENSOR_FLAG_FRACTION', 'RWRE_CENSOR_FLAG_FRACTION', '0.01')),
            precision_floor=float(_env('SIMULATION__PRECISION_FLOOR', 'RWRE_PRECISION_FLOOR', '0.01')),
            max_table_cells=int(_env('SIMULATION__MAX_TABLE_CELLS', 'RWRE_MAX_TABLE_CELLS', '50000000')),
        )

        statistics_config = StatisticsConfig(
            p_threshold=float(_env('STATISTICS__P_THRESHOLD', 'RWRE_P_THRESHOLD', '0.01')),
            exact_p_threshold=float(_env('STATISTICS__EXACT_P_THRESHOLD', 'RWRE_EXACT_P_THRESHOLD', '0.001')),
            se_multiplier=float(_env('STATISTICS__SE_MULTIPLIER', 'RWRE_SE_MULTIPLIER', '4')),
            ratio_band=float(_env('STATISTICS__RATIO_BAND', 'RWRE_RATIO_BAND', '0.01')),
        )

        config = Config(
            logging=logging_config,
            simulation=simulation_config,
            statistics=statistics_config,
        )

        return config

    except Exception as e:
        raise ValueError(f"Configuration loading failed: {e}")


def get_config() -> Config:
    """
    Get the global configuration instance.
    Loads configuration if not already loaded.
    """
    global config

    if config is None:
        config = load_config()
    return config


def reload_config() -> Config:
    """
    Reload configuration from environment variables.
    Useful for testing or when environment changes.
    """
    global config

    load_dotenv()

    config = load_config()
    return config


# ----- Experiment configs -----

EXPERIMENT_KINDS = ["validate-env", "harmonic", "survival", "meander-clt", "conditioned-qip", "fkg"]


class HarmonicParams(BaseModel):
    y_values: List[float] = Field(default_factory=lambda: [0.0, 1.0, 2.0, 5.0])
    recursion_n_max: int = Field(default=100, ge=1)
    horizon: int = Field(default=10_000, ge=2)
    mc_samples: int = Field(default=200_000, ge=1)
    mc_n_max: int = Field(default=100_000, ge=1)
    martingale_N: int = Field(default=30, ge=1)
    slope_y_list: List[float] = Field(default_factory=lambda: [1.0, 10.0, 100.0, 1000.0])
    profile_n_list: List[int] = Field(default_factory=lambda: [10, 100, 1000, 10_000])


class SurvivalParams(BaseModel):
    y: float = Field(default=0.0, ge=0.0)
    n_list: List[int] = Field(default_factory=lambda: [4, 16, 64, 256, 1024, 10_000])
    horizon: int = Field(default=10_000, ge=1)
    lemma_n_list: List[int] = Field(default_factory=lambda: [1, 2, 5, 10, 20, 50, 100, 200, 500, 1000])
    slope_n_list: List[int] = Field(default_factory=lambda: [1, 10, 100, 1000])


class MeanderParams(BaseModel):
    N: int = Field(default=10_000, ge=1)
    n_samples: int = Field(default=100_000, ge=1)
    power_N: int = Field(default=1, ge=1)
    exact_N: int = Field(default=4, ge=1)
    exact_samples: int = Field(default=100_000, ge=1)
    rejection_N: int = Field(default=20, ge=1)
    rejection_samples: int = Field(default=20_000, ge=1)


class ConditionedParams(BaseModel):
    x_values: List[float] = Field(default_factory=lambda: [0.0, 1.0])
    N: int = Field(default=10_000, ge=1)
    t: float = Field(default=1.0, gt=0.0, le=1.0)
    n_samples: int = Field(default=100_000, ge=1)
    horizon: int = Field(default=10_000, ge=1)
    exact_N: int = Field(default=6, ge=1)
    exact_samples: int = Field(default=100_000, ge=1)
    oracle_samples: int = Field(default=1_000_000, ge=1)
    prefix_N: int = Field(default=200, ge=1)
    prefix_length: int = Field(default=3, ge=1)
    prefix_samples: int = Field(default=100_000, ge=1)
    prefix_tolerance: float = Field(default=0.02, gt=0.0, lt=1.0)

    @field_validator('x_values')
    @classmethod
    def validate_x(cls, v):
        if any(x < 0 for x in v):
            raise ValueError('x values must be nonnegative')
        return v


class FKGParams(BaseModel):
    y_values: List[float] = Field(default_factory=lambda: [0.0, 1.0, 2.0, 5.0])
    n_max: int = Field(default=50, ge=1)


class ExperimentParameters(BaseModel):
    harmonic: HarmonicParams = Field(default_factory=HarmonicParams)
    survival: SurvivalParams = Field(default_factory=SurvivalParams)
    meander_clt: MeanderParams = Field(default_factory=MeanderParams)
    conditioned_qip: ConditionedParams = Field(default_factory=ConditionedParams)
    fkg: FKGParams = Field(default_factory=FKGParams)


class ExperimentConfig(BaseModel):
    """A complete, reproducible experiment description."""
    name: str = Field(default="experiment")
    model: ModelSpec
    environment_seeds: List[int] = Field(default_factory=lambda: [1, 2, 3], min_length=1)
    master_seed: int = Field(default=0, ge=0, lt=2**64)
    experiments: List[str] = Field(default_factory=lambda: ["all"], min_length=1)
    workers: Optional[int] = Field(default=None, ge=1, le=256)
    output_dir: str = Field(default="runs")
    parameters: ExperimentParameters = Field(default_factory=ExperimentParameters)

    @field_validator('environment_seeds')
    @classmethod
    def validate_seeds(cls, v):
        if any(s < 0 or s >= 2**64 for s in v):
            raise ValueError('seeds must be unsigned 64-bit integers')
        return v

    @field_validator('experiments')
    @classmethod
    def validate_experiments(cls, v):
        valid = EXPERIMENT_KINDS + ["all"]
        for kind in v:
            if kind not in valid:
                raise ValueError(f'experiment must be one of: {valid}')
        return v

    def enabled_experiments(self) -> List[str]:
        if "all" in self.experiments:
            return list(EXPERIMENT_KINDS)
        return [k for k in EXPERIMENT_KINDS if k in self.experiments]


def _error_key(error: dict) -> str:
    return ".".join(str(part) for part in error.get("loc", ()))


def parse_experiment_config(data: dict) -> ExperimentConfig:
    """
    Validate a raw config tree.

    Raises:
        ConfigInvalid: naming the dotted key of the first offending field
    """
    if not isinstance(data, dict):
        raise ConfigInvalid("config root must be a mapping")
    try:
        return ExperimentConfig.model_validate(data)
    except ValidationError as e:
        first = e.errors()[0]
        raise ConfigInvalid(first.get("msg", "invalid value"), key=_error_key(first)) from e


def load_experiment_config(path: str) -> ExperimentConfig:
    """
    Load and validate an experiment config file (YAML).

    Raises:
        ConfigInvalid: If the file is missing, unparsable or invalid
    """
    try:
        with open(path, "r", encoding="utf-8") as fh:
            data = yaml.safe_load(fh)
    except OSError as e:
        raise ConfigInvalid(f"cannot read config file: {e}") from e
    except yaml.YAMLError as e:
        raise ConfigInvalid(f"config file is not valid YAML: {e}") from e
    return parse_experiment_config(data)
