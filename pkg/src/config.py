"""
Aegis configuration
Experiment settings, per-task-type weight presets, JSON loading and logging setup.
"""
import json
import logging
import os
from pathlib import Path
from typing import Any, Dict, List, Optional

from dotenv import load_dotenv
from pydantic import AliasChoices, BaseModel, ConfigDict, Field, ValidationError, model_validator

from src.detection import DetectionConfig
from src.errors import ConfigError
from src.healing import HealingPolicy
from src.models import ReliabilityWeights, TaskType
from src.reliability import ScoringConfig

logger = logging.getLogger(__name__)

LOG_FORMAT = '%(asctime)s - %(name)s - %(levelname)s - %(message)s'
LOG_LEVELS = {
    "error": logging.ERROR,
    "info": logging.INFO,
    "debug": logging.DEBUG,
}

WEIGHT_PRESETS: Dict[TaskType, ReliabilityWeights] = {
    TaskType.MULTI_STEP_REASONING: ReliabilityWeights(w1=0.4, w2=0.4, w3=0.2),
    TaskType.API_ORCHESTRATION: ReliabilityWeights(w1=0.2, w2=0.3, w3=0.5),
    TaskType.DOCUMENT_PROCESSING: ReliabilityWeights(w1=0.3, w2=0.4, w3=0.3),
}

DEFAULT_POLICIES = ["proposed", "b1", "b2", "b3", "b4"]
ABLATION_POLICIES = [
    "proposed-no-patterns",
    "proposed-no-consistency",
    "proposed-no-threshold",
    "proposed-no-healing",
]
KNOWN_POLICIES = DEFAULT_POLICIES + ABLATION_POLICIES


class BaselineConfig(BaseModel):
    """Knobs of the comparison policies."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    max_retries: int = Field(default=2, ge=0)
    rounds: int = Field(default=2, ge=0)
    vote_k: int = Field(default=3, ge=1)


class ExperimentConfig(BaseModel):
    """
    Fully resolved experiment configuration.

    `theta` and `max_heal_attempts` may be given at the top level; they are
    folded into the detection and healing fragments, which own them.
    """

    model_config = ConfigDict(frozen=True, extra="forbid", populate_by_name=True)

    master_seed: int = Field(default=0, ge=0, lt=2 ** 64)
    cases_per_task_type: int = Field(default=100, ge=1)
    repeats: int = Field(default=3, ge=1)
    injection_prob: float = Field(default=0.30, ge=0.0, le=1.0)
    transient_prob: float = Field(default=0.25, ge=0.0, le=1.0)
    tool_fault_rate: float = Field(default=0.0, ge=0.0, le=1.0)
    weight_presets: Dict[TaskType, ReliabilityWeights] = Field(default_factory=lambda: dict(WEIGHT_PRESETS))
    k: int = Field(default=3, ge=1, validation_alias=AliasChoices("k", "K"))
    consistency: bool = True
    max_steps: int = Field(default=32, ge=1)
    eval_score_alpha: float = Field(default=0.3, gt=0.0, le=1.0)
    policies: List[str] = Field(default_factory=lambda: list(DEFAULT_POLICIES))
    output_dir: str = "aegis-out"
    corpus_path: Optional[str] = None
    jobs: Optional[int] = Field(default=None, ge=1)
    detection: DetectionConfig = Field(default_factory=DetectionConfig)
    healing: HealingPolicy = Field(default_factory=HealingPolicy)
    scoring: ScoringConfig = Field(default_factory=ScoringConfig)
    baselines: BaselineConfig = Field(default_factory=BaselineConfig)

    @model_validator(mode="before")
    @classmethod
    def _fold_shortcuts(cls, data: Any) -> Any:
        if not isinstance(data, dict):
            return data
        data = dict(data)
        if "theta" in data:
            detection = dict(data.get("detection") or {})
            detection["theta"] = data.pop("theta")
            data["detection"] = detection
        if "max_heal_attempts" in data:
            healing = dict(data.get("healing") or {})
            healing["max_heal_attempts"] = data.pop("max_heal_attempts")
            data["healing"] = healing
        return data

    @model_validator(mode="after")
    def _check_cross_fields(self) -> "ExperimentConfig":
        missing = [t.value for t in TaskType if t not in self.weight_presets]
        if missing:
            raise ValueError(f"weight_presets missing {', '.join(missing)}")
        if self.consistency and self.k < 2:
            raise ValueError("K must be at least 2 when consistency scoring is enabled")
        unknown = [name for name in self.policies if name not in KNOWN_POLICIES]
        if unknown:
            raise ValueError(f"unknown policies: {', '.join(unknown)}")
        return self

    @property
    def theta(self) -> float:
        return self.detection.theta

    @property
    def max_heal_attempts(self) -> int:
        return self.healing.max_heal_attempts

    def weights_for(self, task_type: TaskType) -> ReliabilityWeights:
        return self.weight_presets[task_type]

    def to_json(self) -> str:
        """Canonical JSON, used for config.lock.json."""
        return json.dumps(self.model_dump(mode="json"), sort_keys=True, indent=2)


def describe_validation_error(error: ValidationError) -> str:
    parts = []
    for item in error.errors():
        location = ".".join(str(piece) for piece in item["loc"]) or "<root>"
        parts.append(f"{location}: {item['msg']}")
    return "; ".join(parts)


def parse_config(data: Dict[str, Any], source: str = "<config>") -> ExperimentConfig:
    try:
        return ExperimentConfig.model_validate(data)
    except ValidationError as e:
        raise ConfigError(f"{source}: {describe_validation_error(e)}") from e


def load_config(path: str) -> ExperimentConfig:
    """Load and validate an ExperimentConfig JSON file."""
    config_path = Path(path)
    try:
        data = json.loads(config_path.read_text(encoding="utf-8"))
    except FileNotFoundError as e:
        raise ConfigError(f"{path}: file not found") from e
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON ({e})") from e
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be a JSON object")
    config = parse_config(data, str(path))
    logger.info(f"Loaded config from {path}")
    return config


def load_environment() -> None:
    """Read .env into the process environment (existing variables win)."""
    load_dotenv()


def configure_logging(level_name: Optional[str] = None) -> int:
    """
    Configure root logging from AEGIS_LOG (error|info|debug).

    Logs go to stderr, plus AEGIS_LOG_FILE when that is set.
    """
    raw = (level_name or os.getenv("AEGIS_LOG", "info")).strip().lower()
    level = LOG_LEVELS.get(raw)

    handlers: List[logging.Handler] = [logging.StreamHandler()]
    log_file = os.getenv("AEGIS_LOG_FILE")
    if log_file:
        handlers.append(logging.FileHandler(log_file))

    logging.basicConfig(
        level=level or logging.INFO,
        format=LOG_FORMAT,
        handlers=handlers,
        force=True,
    )
    if level is None:
        logger.warning(f"Unknown AEGIS_LOG value '{raw}', using info")
        level = logging.INFO
    return level
