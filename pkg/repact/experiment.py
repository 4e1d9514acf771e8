"""Experiment configuration: a JSON document loaded into dataclasses.

Unknown keys are rejected wherever they appear so that a typo never turns
into a silently ignored setting.
"""

import dataclasses
import json
from dataclasses import dataclass, field
from typing import List, Optional

from . import configuration
from .errors import ConfigError
from .repact_layer import Branch, DEFAULT_BRANCHES

logger = configuration.logger

DATASETS = ("mnist", "cifar10", "synthetic")
ACTIVATIONS = ("hardswish", "relu", "repact_i", "repact_ii", "repact_iii")
SCHEDULE_PARAMS = {
    "cosine": {"warmup_epochs", "min_lr"},
    "step": {"warmup_epochs", "step_size", "gamma"},
}


@dataclass
class DatasetConfig:
    name: str = "mnist"
    root: str = "data"
    subset: Optional[int] = None
    test_subset: Optional[int] = None
    augment: bool = False
    # only used by the synthetic dataset
    synthetic_train: int = 512
    synthetic_test: int = 128
    synthetic_size: int = 12
    synthetic_channels: int = 1


@dataclass
class ConvBlockSpec:
    out_channels: int
    kernel: int = 3
    stride: int = 1
    pad: int = 1


def default_blocks():
    return [ConvBlockSpec(8, 3, 1, 1), ConvBlockSpec(16, 3, 2, 1), ConvBlockSpec(32, 3, 2, 1), ConvBlockSpec(32, 3, 2, 1)]


@dataclass
class ScheduleConfig:
    initial: float = 0.01
    kind: str = "cosine"
    params: dict = field(default_factory=dict)


@dataclass
class ExperimentConfig:
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    model: List[ConvBlockSpec] = field(default_factory=default_blocks)
    activation: str = "repact_i"
    branch_set: List[str] = field(default_factory=lambda: [b.value for b in DEFAULT_BRANCHES])
    epochs: int = 5
    batch_size: int = 64
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    seed: int = 0
    label_smoothing: Optional[float] = None
    log_cadence: int = 50
    activation_lr: Optional[float] = None
    momentum: float = configuration.SGD_MOMENTUM
    weight_decay: float = configuration.WEIGHT_DECAY
    dtype: str = "float32"
    num_classes: int = 10
    prefetch: int = 2

    def __post_init__(self):
        if self.label_smoothing is None:
            self.label_smoothing = configuration.CIFAR_LABEL_SMOOTHING if self.dataset.name == "cifar10" else 0.0
        self.validate()

    def validate(self):
        checks = [
            (self.dataset.name in DATASETS, f"dataset.name must be one of {DATASETS}"),
            (self.activation in ACTIVATIONS, f"activation must be one of {ACTIVATIONS}"),
            (len(self.model) > 0, "model needs at least one conv block"),
            (self.epochs >= 1, "epochs must be >= 1"),
            (self.batch_size >= 1, "batch_size must be >= 1"),
            (self.schedule.initial >= 0, "schedule.initial must be >= 0"),
            (self.schedule.kind in SCHEDULE_PARAMS, f"schedule.kind must be one of {tuple(SCHEDULE_PARAMS)}"),
            (0.0 <= self.label_smoothing < 1.0, "label_smoothing must be in [0, 1)"),
            (self.log_cadence >= 0, "log_cadence must be >= 0"),
            (self.activation_lr is None or self.activation_lr >= 0, "activation_lr must be >= 0"),
            (0.0 <= self.momentum < 1.0, "momentum must be in [0, 1)"),
            (self.weight_decay >= 0, "weight_decay must be >= 0"),
            (self.dtype in ("float32", "float64"), "dtype must be float32 or float64"),
            (self.num_classes >= 2, "num_classes must be >= 2"),
            (self.prefetch >= 0, "prefetch must be >= 0"),
            (len(self.branch_set) > 0, "branch_set must not be empty"),
        ]
        for block in self.model:
            checks.append((block.out_channels >= 1 and block.kernel >= 1, f"invalid conv block {block}"))
            checks.append((block.stride >= 1 and block.pad >= 0, f"invalid stride/pad in {block}"))
        for name in ("subset", "test_subset"):
            value = getattr(self.dataset, name)
            checks.append((value is None or value >= 1, f"dataset.{name} must be positive"))

        for ok, message in checks:
            if not ok:
                raise ConfigError(message)

        unknown = set(self.schedule.params) - SCHEDULE_PARAMS[self.schedule.kind]
        if unknown:
            raise ConfigError(f"unknown schedule.params for {self.schedule.kind}: {sorted(unknown)}")
        if self.schedule.kind == "step" and self.schedule.params.get("step_size", 1) < 1:
            raise ConfigError("schedule.params.step_size must be >= 1")
        for name in self.branch_set:
            try:
                Branch(name)
            except ValueError:
                raise ConfigError(f"unknown branch {name!r}") from None

    def to_dict(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data):
        if not isinstance(data, dict):
            raise ConfigError("experiment config must be a JSON object")
        data = dict(data)
        _reject_unknown(cls, data, "")
        if "dataset" in data:
            data["dataset"] = _build(DatasetConfig, data["dataset"], "dataset")
        if "schedule" in data:
            data["schedule"] = _build(ScheduleConfig, data["schedule"], "schedule")
        if "model" in data:
            if not isinstance(data["model"], list):
                raise ConfigError("model must be a list of conv blocks")
            data["model"] = [_build(ConvBlockSpec, block, f"model[{i}]") for i, block in enumerate(data["model"])]
        try:
            return cls(**data)
        except TypeError as e:
            raise ConfigError(str(e)) from e


def _reject_unknown(cls, data, path):
    known = {f.name for f in dataclasses.fields(cls)}
    for key in data:
        if key not in known:
            where = f"{path}.{key}" if path else key
            raise ConfigError(f"unknown config key {where!r}")


def _build(cls, data, path):
    if not isinstance(data, dict):
        raise ConfigError(f"{path} must be a JSON object")
    _reject_unknown(cls, data, path)
    try:
        return cls(**data)
    except TypeError as e:
        raise ConfigError(f"{path}: {e}") from e


def load_config(path):
    """Read an ExperimentConfig from a JSON file (OSError propagates)."""
    with open(path) as f:
        text = f.read()
    try:
        data = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON: {e}") from e
    config = ExperimentConfig.from_dict(data)
    logger.info(f"Loaded experiment config from {path}: activation={config.activation}, "
                f"dataset={config.dataset.name}, epochs={config.epochs}, seed={config.seed}")
    return config
