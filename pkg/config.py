import io
import logging
import os
from typing import Dict, List, Literal, Optional, Tuple, Union

from dotenv import load_dotenv
from dotenv.parser import parse_stream
from pydantic import BaseModel, Field, ValidationError, field_validator, model_validator

from attacks import AttackKind, SQUARE_BUDGET
from certificates import Norm
from errors import ConfigError
from heads import TrainConfig

# Load environment variables from .env file if it exists
load_dotenv(override=True)

DatasetName = Literal["mnist", "cifar-binary", "blobs"]
HeadKind = Literal["mlp", "linear"]

DEFAULT_COMPONENTS = [100, 125, 150, 175, 200]
DEFAULT_EPSILONS = [round(0.01 * i, 2) for i in range(1, 21)]

LIST_KEYS = {"projection": "projections", "r": "components", "attack": "attacks", "norm": "norms",
             "epsilon": "epsilons", "hidden": "hidden"}
TRAIN_KEYS = {"epochs", "learning_rate", "batch_size", "hidden"}


class Config:
    """Process-wide defaults taken from the environment (or a .env file)."""
    MNIST_DIR = os.getenv("MNIST_DIR")
    CIFAR_DIR = os.getenv("CIFAR_DIR")
    OUTPUT_DIR = os.getenv("SPCR_OUTPUT_DIR", "results")
    SEED = int(os.getenv("SPCR_SEED", "0"))
    LOG_LEVEL = os.getenv("SPCR_LOG_LEVEL", "INFO")

    @classmethod
    def check_environment(cls, dataset: str) -> Tuple[bool, List[str]]:
        """Check that the directory a dataset is read from is configured"""
        needed = {"mnist": ["MNIST_DIR"], "cifar-binary": ["CIFAR_DIR"]}.get(dataset, [])
        missing_vars = [name for name in needed if not getattr(cls, name)]
        return len(missing_vars) == 0, missing_vars


def setup_logging(level: Union[str, int, None] = None) -> None:
    logging.basicConfig(
        level=level or Config.LOG_LEVEL,
        format="%(asctime)s %(levelname)-7s %(name)s: %(message)s",
        datefmt="%H:%M:%S",
    )


class ExperimentConfig(BaseModel):
    """Everything one sweep needs; the defaults are the full MNIST grid."""
    dataset: DatasetName = "mnist"
    projections: List[Literal["pca", "spca"]] = Field(default_factory=lambda: ["pca", "spca"])
    components: List[int] = Field(default_factory=lambda: list(DEFAULT_COMPONENTS))
    density: float = Field(default=0.05, gt=0, le=1)
    head: HeadKind = "mlp"
    train: TrainConfig = Field(default_factory=TrainConfig)
    attacks: List[AttackKind] = Field(default_factory=lambda: ["fgsm", "pgd", "mim", "square"])
    norms: List[Norm] = Field(default_factory=lambda: ["inf", "2"])
    epsilons: List[float] = Field(default_factory=lambda: list(DEFAULT_EPSILONS))
    seed: int = Field(default=Config.SEED, ge=0)
    output_dir: str = Config.OUTPUT_DIR
    limit: Optional[int] = Field(default=None, ge=1, description="attack only the first N test points")
    train_limit: Optional[int] = Field(default=None, ge=1, description="fit on the first N training points")
    mnist_dir: Optional[str] = Config.MNIST_DIR
    cifar_dir: Optional[str] = Config.CIFAR_DIR
    square_budget: int = Field(default=SQUARE_BUDGET, ge=1)
    clip: bool = True
    certify: bool = True
    spca_max_iters: int = Field(default=300, ge=1)
    spca_tol: float = Field(default=1e-10, gt=0)
    blobs_train: int = Field(default=400, ge=2)
    blobs_test: int = Field(default=100, ge=1)
    blobs_side: int = Field(default=8, ge=2)
    blobs_classes: int = Field(default=2, ge=2)

    @model_validator(mode="before")
    @classmethod
    def _train_seed_follows_seed(cls, data):
        if isinstance(data, dict) and data.get("train") is None:
            data = {**data, "train": TrainConfig(seed=int(data.get("seed", Config.SEED)))}
        return data

    @field_validator("projections", "components", "attacks", "norms", "epsilons")
    @classmethod
    def _non_empty(cls, v):
        if not v:
            raise ValueError("grid must not be empty")
        return v

    @field_validator("components")
    @classmethod
    def _positive_r(cls, v):
        if any(r < 1 for r in v):
            raise ValueError(f"component counts must be positive, got {v}")
        return v

    @field_validator("epsilons")
    @classmethod
    def _sorted_eps(cls, v):
        if any(e < 0 for e in v):
            raise ValueError("epsilons must be non-negative")
        return sorted(v)


def parse_key_values(text: str, source: str = "<config>") -> Dict[str, List[str]]:
    """Flat ``key=value`` lines; repeated keys collect into a list in file order."""
    values: Dict[str, List[str]] = {}
    for binding in parse_stream(io.StringIO(text)):
        if binding.error:
            raise ConfigError(f"{source}: cannot parse line {binding.original.string.strip()!r}")
        if binding.key is None:
            continue
        if binding.value is None:
            raise ConfigError(f"{source}: key {binding.key!r} has no value")
        values.setdefault(binding.key.strip(), []).append(binding.value.strip())
    return values


def experiment_config_from_values(values: Dict[str, List[str]], source: str = "<config>") -> ExperimentConfig:
    """Builds an ExperimentConfig from parsed key/value lists."""
    fields = set(ExperimentConfig.model_fields)
    data: Dict[str, object] = {}
    train: Dict[str, object] = {}
    for key, items in values.items():
        if key in LIST_KEYS:
            flat = [part.strip() for item in items for part in item.split(",") if part.strip()]
            target, value = LIST_KEYS[key], flat
        else:
            if len(items) > 1:
                raise ConfigError(f"{source}: key {key!r} may appear only once")
            target, value = key, items[0]
        if key in TRAIN_KEYS:
            train[target] = value
        elif target in fields and target != "train":
            data[target] = value
        else:
            raise ConfigError(f"{source}: unknown key {key!r}")
    try:
        data["train"] = TrainConfig(seed=int(data.get("seed", Config.SEED)), **train)
        return ExperimentConfig(**data)
    except (ValidationError, ValueError) as e:
        raise ConfigError(f"{source}: {e}") from e


def load_experiment_config(path: str) -> ExperimentConfig:
    """Reads a flat UTF-8 key=value experiment file."""
    try:
        with open(path, "r", encoding="utf-8") as f:
            text = f.read()
    except FileNotFoundError:
        raise FileNotFoundError(f"The file {path} was not found.")
    return experiment_config_from_values(parse_key_values(text, path), path)


def with_overrides(config: ExperimentConfig, seed: Optional[int] = None, output_dir: Optional[str] = None,
                   limit: Optional[int] = None) -> ExperimentConfig:
    """Applies command-line overrides; a new seed also reseeds head training."""
    update: Dict[str, object] = {}
    if seed is not None:
        update["seed"] = seed
        update["train"] = config.train.model_copy(update={"seed": seed})
    if output_dir is not None:
        update["output_dir"] = output_dir
    if limit is not None:
        update["limit"] = limit
    return ExperimentConfig.model_validate({**config.model_dump(), **update}) if update else config
