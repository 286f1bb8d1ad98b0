"""Run configuration: dataclasses, strict JSON loading and canonical hashing."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
import types
import typing
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, TypeVar

from .losses import LossForm, LossWeights, PairVariant
from .models import Branch, SegmentorMode
from .preprocess import IntensityPipelineConfig
from .settings import DEFAULT_SETTING, get_mask_for_setting
from .synthdata import SynthConfig

SCHEMA_VERSION = 1
OUTPUT_ROOT_ENV = "PSIGAN_OUTPUT_ROOT"

T = TypeVar("T")


@dataclass
class TrainConfig:
    """Optimizer schedule, loss selection and bookkeeping for one training run."""

    preset: str = "desk"
    lr: float = 1e-4
    batch_size: int = 2
    beta1: float = 0.5
    beta2: float = 0.999
    epochs_constant: int = 30
    epochs_decay: int = 30
    iterations_per_epoch: int | None = None
    loss_form: LossForm = LossForm.LEAST_SQUARES
    pair_variant: PairVariant = PairVariant.IMG_SEG_AGG
    segmentor_mode: SegmentorMode = SegmentorMode.SPLIT
    setting: int = DEFAULT_SETTING
    weights: LossWeights = field(default_factory=LossWeights)
    seed: int = 0
    deterministic: bool = True
    checkpoint_every: int = 1
    snapshot_every: int = 1
    snapshot_samples: int = 4
    pool_size: int = 0
    clip_grad_norm: float | None = None
    eval_branch: Branch = Branch.S_M

    def __post_init__(self) -> None:
        if self.lr <= 0:
            raise ValueError(f"Invalid lr: {self.lr}. Must be > 0.")
        if self.batch_size < 1:
            raise ValueError(f"Invalid batch_size: {self.batch_size}. Must be >= 1.")
        if self.epochs_constant < 0 or self.epochs_decay < 0:
            raise ValueError("Epoch counts must be >= 0.")
        if self.total_epochs < 1:
            raise ValueError("Training needs at least one epoch.")
        if self.pool_size < 0:
            raise ValueError(f"Invalid pool_size: {self.pool_size}.")
        get_mask_for_setting(self.setting)

    @property
    def total_epochs(self) -> int:
        return self.epochs_constant + self.epochs_decay


@dataclass
class EvalOptions:
    split: str = "target_test"
    branch: Branch = Branch.S_M
    spacing: tuple[float, float] = (1.0, 1.0)


@dataclass
class TranslateOptions:
    direction: str = "C2M"
    split: str = "source_train"
    limit: int | None = None
    bins: int = 64


@dataclass
class PlotOptions:
    max_samples: int = 4


@dataclass
class RunConfig:
    """Everything a CLI invocation needs; its canonical form names the run directory."""

    schema_version: int = SCHEMA_VERSION
    seed: int = 0
    deterministic: bool = True
    output_root: str = "runs"
    manifest: str | None = None
    synth: SynthConfig = field(default_factory=SynthConfig)
    preprocess: IntensityPipelineConfig = field(default_factory=IntensityPipelineConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalOptions = field(default_factory=EvalOptions)
    translate: TranslateOptions = field(default_factory=TranslateOptions)
    plot: PlotOptions = field(default_factory=PlotOptions)

    def resolved_train(self) -> TrainConfig:
        """Train payload with the global seed and determinism flag applied."""
        return dataclasses.replace(
            self.train, seed=self.seed, deterministic=self.deterministic
        )

    def resolved_output_root(self) -> Path:
        return Path(os.environ.get(OUTPUT_ROOT_ENV, self.output_root))


def to_dict(obj: Any) -> Any:
    """Convert dataclasses, enums, tuples and paths into plain JSON values."""
    if dataclasses.is_dataclass(obj) and not isinstance(obj, type):
        return {f.name: to_dict(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, Enum):
        return obj.value
    if isinstance(obj, Path):
        return str(obj)
    if isinstance(obj, (list, tuple)):
        return [to_dict(v) for v in obj]
    if isinstance(obj, dict):
        return {str(k): to_dict(v) for k, v in obj.items()}
    return obj


def from_dict(cls: type[T], data: dict[str, Any]) -> T:
    """Build a dataclass from a JSON mapping, rejecting unknown keys.

    Raises:
        ValueError: If a key is unknown or a value cannot be converted
    """
    if not isinstance(data, dict):
        raise ValueError(f"Expected a mapping for {cls.__name__}, got {type(data).__name__}")
    hints = typing.get_type_hints(cls)
    known = {f.name for f in dataclasses.fields(cls)}  # type: ignore[arg-type]
    unknown = sorted(set(data) - known)
    if unknown:
        raise ValueError(f"Unknown keys for {cls.__name__}: {', '.join(unknown)}")
    kwargs = {name: _convert(hints[name], value, name) for name, value in data.items()}
    return cls(**kwargs)


def _convert(tp: Any, value: Any, name: str) -> Any:
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    if origin in (typing.Union, types.UnionType):
        if value is None and type(None) in args:
            return None
        inner = [a for a in args if a is not type(None)]
        return _convert(inner[0], value, name)
    if dataclasses.is_dataclass(tp):
        return from_dict(tp, value)
    if isinstance(tp, type) and issubclass(tp, Enum):
        try:
            return tp(value)
        except ValueError:
            choices = ", ".join(str(m.value) for m in tp)
            raise ValueError(f"Invalid {name}: {value!r}. Must be one of {choices}.") from None
    if origin is tuple:
        return tuple(_convert(args[0], v, name) for v in value)
    if origin is list:
        return [_convert(args[0], v, name) for v in value]
    if origin is dict:
        return {k: _convert(args[1], v, name) for k, v in value.items()}
    if tp is float and isinstance(value, int):
        return float(value)
    return value


def canonical_json(obj: Any) -> str:
    return json.dumps(to_dict(obj), sort_keys=True, separators=(",", ":"))


def config_hash(obj: Any) -> str:
    """Short SHA-256 of the canonical serialization."""
    return hashlib.sha256(canonical_json(obj).encode()).hexdigest()[:12]


def load_run_config(path: Path) -> RunConfig:
    """Load a RunConfig JSON file.

    Raises:
        FileNotFoundError: If the file does not exist (the message names the path)
        ValueError: On unknown keys or a schema-version mismatch
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"config file not found: {path}")
    with open(path) as f:
        data = json.load(f)
    version = data.get("schema_version", SCHEMA_VERSION)
    if version != SCHEMA_VERSION:
        raise ValueError(
            f"Config schema_version {version} is not supported (expected {SCHEMA_VERSION})"
        )
    return from_dict(RunConfig, data)


def save_json(path: Path, data: Any) -> None:
    """Write JSON atomically (temp file then rename)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w") as f:
        json.dump(to_dict(data), f, indent=2, sort_keys=True)
        f.write("\n")
    os.replace(tmp, path)
