"""Experiment configuration: a tree of dataclasses loaded from canonical JSON.

Resolution order is defaults, then the named preset, then the config file, then
command-line overrides. Unknown keys and wrong types anywhere raise
``ConfigError`` naming the dotted key path.
"""
from __future__ import annotations

import copy
import dataclasses
import hashlib
import json
import types
import typing
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Mapping

from .data import BinningMode, SynthSpec
from .errors import ConfigError
from .perturbation import PerturbationKind
from .stability import SdeMode
from .training import ModelSpec, TrainConfig


@dataclass(frozen=True)
class DataConfig:
    """``manifest`` points at a dataset on disk; without it the synthetic set is used."""

    manifest: str | None = None
    bin_ms: float = 1.0
    max_steps: int | None = None
    binning: BinningMode = BinningMode.COUNT
    train_split: str = "train"
    eval_split: str = "test"
    synthetic: SynthSpec = field(default_factory=SynthSpec)


@dataclass(frozen=True)
class SweepConfig:
    kind: PerturbationKind
    strengths: tuple[float, ...] = ()
    alpha: float = 0.01
    k: int = 4
    mixed_factor: float = 10.0


@dataclass(frozen=True)
class PerturbConfig:
    sweeps: tuple[SweepConfig, ...] = ()
    reference_points: bool = False
    include_c_path: bool = True
    split: str = "test"


@dataclass(frozen=True)
class StabilityCase:
    mu: tuple[float, ...]
    sigma: tuple[float, ...]
    W: tuple[float, ...]
    C: tuple[float, ...]
    g_l: float


@dataclass(frozen=True)
class StabilitySection:
    """Explicit ``cases`` or, when empty, a random sweep of ``sweep`` configs."""

    cases: tuple[StabilityCase, ...] = ()
    sweep: int = 10
    sweep_seed: int = 0
    channels: int = 4
    g0_min: float = 0.5
    g0_max: float = 5.0
    proportional: bool = False
    trials: int = 10000
    mode: SdeMode = SdeMode.LINEARIZED
    burn_in: float = 0.5
    monte_carlo: bool = True
    tolerance: float = 0.03
    milstein_check: bool = False
    record_trajectories: int = 0


@dataclass(frozen=True)
class GradcheckSection:
    cases: int = 20
    fd_cases: int = 2
    h: float = 1e-5
    dual_tolerance: float = 1e-10
    fd_tolerance: float = 1e-5


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = 0
    out: str = "runs"
    checkpoint: str | None = None
    threads: int | None = None
    model: ModelSpec = field(default_factory=ModelSpec)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)
    perturb: PerturbConfig = field(default_factory=PerturbConfig)
    stability: StabilitySection = field(default_factory=StabilitySection)
    gradcheck: GradcheckSection = field(default_factory=GradcheckSection)


def _dataset_preset(
    tau_m: float,
    tau_s: float,
    hidden: int,
    epochs: int,
    recurrent: bool,
    c: tuple[float, float] = (0.01, 0.005),
    w: tuple[float, float] = (0.01, 0.005),
    bin_ms: float = 1.0,
) -> dict:
    return {
        "model": {
            "neuron_kind": "dgn",
            "hidden": [hidden],
            "recurrent": recurrent,
            "g_l": 1.0 / tau_m,
            "tau_s": tau_s,
            "theta": 1.0,
        },
        "train": {
            "epochs": epochs,
            "lr": 0.001,
            "init": {
                "c": {"center": c[0], "delta": c[1]},
                "w": {"center": w[0], "delta": w[1]},
            },
        },
        "data": {"bin_ms": bin_ms},
    }


PRESETS: dict[str, dict] = {
    "ti46-ff": _dataset_preset(10.0, 2.0, 100, 64, False),
    "ti46-rec": _dataset_preset(15.0, 1.5, 100, 64, True),
    "tidigits-ff": _dataset_preset(100.0, 1.0, 100, 64, False, w=(0.001, 0.0005)),
    "tidigits-rec": _dataset_preset(10.0, 2.5, 100, 64, True),
    "shd-ff": _dataset_preset(1.0, 0.02, 128, 128, False, bin_ms=4.0),
    "shd-rec": _dataset_preset(
        1.0, 0.02, 128, 128, True, c=(0.001, 0.0005), w=(0.001, 0.0005), bin_ms=4.0
    ),
    "ssc-ff": _dataset_preset(1.0, 0.02, 128, 128, False, bin_ms=4.0),
    "ssc-rec": _dataset_preset(1.0, 0.02, 128, 128, True, bin_ms=4.0),
    "synthetic": {
        "model": {"neuron_kind": "dgn", "hidden": [16], "g_l": 0.1, "tau_s": 2.0},
        "train": {
            "epochs": 50,
            "lr": 0.01,
            "batch_size": 8,
            "init": {
                "w": {"center": 0.2, "delta": 0.1},
                "c": {"center": 0.01, "delta": 0.005},
            },
        },
        "data": {"synthetic": {"test_fraction": 0.25}},
    },
    "synthetic-lif": {
        "model": {"neuron_kind": "lif", "hidden": [16], "g_l": 0.1, "tau_s": 2.0},
        "train": {
            "epochs": 50,
            "lr": 0.01,
            "batch_size": 8,
            "init": {
                "w": {"center": 0.2, "delta": 0.1},
                "c": {"center": 0.01, "delta": 0.005},
            },
        },
        "data": {"synthetic": {"test_fraction": 0.25}},
    },
    "paper-points": {"perturb": {"reference_points": True}},
}
PRESETS["reference-points"] = PRESETS["paper-points"]


def to_dict(value: Any) -> Any:
    """JSON-ready view of a config tree: enums by value, tuples as lists."""
    if dataclasses.is_dataclass(value) and not isinstance(value, type):
        return {f.name: to_dict(getattr(value, f.name)) for f in dataclasses.fields(value)}
    if isinstance(value, Enum):
        return value.value
    if isinstance(value, (list, tuple)):
        return [to_dict(item) for item in value]
    if isinstance(value, dict):
        return {key: to_dict(item) for key, item in value.items()}
    return value


def deep_merge(base: Mapping[str, Any], override: Mapping[str, Any]) -> dict[str, Any]:
    merged = copy.deepcopy(dict(base))
    for key, value in override.items():
        if isinstance(value, Mapping) and isinstance(merged.get(key), Mapping):
            merged[key] = deep_merge(merged[key], value)
        else:
            merged[key] = copy.deepcopy(value)
    return merged


def _type_name(tp: Any) -> str:
    return getattr(tp, "__name__", str(tp))


def _coerce(tp: Any, value: Any, path: str) -> Any:
    origin = typing.get_origin(tp)
    if origin in (typing.Union, types.UnionType):
        options = typing.get_args(tp)
        if value is None:
            if type(None) in options:
                return None
            raise ConfigError(f"{path}: null is not allowed")
        errors = []
        for option in options:
            if option is type(None):
                continue
            try:
                return _coerce(option, value, path)
            except ConfigError as exc:
                errors.append(str(exc))
        raise ConfigError(errors[0] if errors else f"{path}: invalid value")
    if origin is tuple:
        if not isinstance(value, list):
            raise ConfigError(f"{path}: expected a list, got {type(value).__name__}")
        (item_type, *_rest) = typing.get_args(tp)
        return tuple(_coerce(item_type, item, f"{path}[{i}]") for i, item in enumerate(value))
    if dataclasses.is_dataclass(tp):
        return build_dataclass(tp, value, path)
    if isinstance(tp, type) and issubclass(tp, Enum):
        try:
            return tp(value)
        except ValueError:
            allowed = ", ".join(member.value for member in tp)
            raise ConfigError(f"{path}: {value!r} is not one of {allowed}") from None
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{path}: expected bool, got {type(value).__name__}")
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path}: expected int, got {type(value).__name__}")
        return value
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: expected float, got {type(value).__name__}")
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(f"{path}: expected str, got {type(value).__name__}")
        return value
    raise ConfigError(f"{path}: unsupported type {_type_name(tp)}")


def build_dataclass(cls: type, payload: Any, path: str = "") -> Any:
    """Instantiate ``cls`` from a mapping, rejecting unknown keys."""
    if not isinstance(payload, Mapping):
        raise ConfigError(f"{path or '<root>'}: expected an object, got {type(payload).__name__}")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls) if f.init}
    prefix = f"{path}." if path else ""
    for key in payload:
        if key not in names:
            raise ConfigError(f"unknown key {prefix}{key}")
    kwargs = {key: _coerce(hints[key], value, f"{prefix}{key}") for key, value in payload.items()}
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(f"{path or '<root>'}: {exc}") from exc
    except ValueError as exc:
        raise ConfigError(f"{path or '<root>'}: {exc}") from exc


def resolve_config(
    preset: str | None = None,
    payload: Mapping[str, Any] | None = None,
    overrides: Mapping[str, Any] | None = None,
) -> ExperimentConfig:
    tree = to_dict(ExperimentConfig())
    if preset is not None:
        if preset not in PRESETS:
            raise ConfigError(f"unknown preset {preset!r}; choose from {', '.join(sorted(PRESETS))}")
        tree = deep_merge(tree, PRESETS[preset])
    if payload is not None:
        if not isinstance(payload, Mapping):
            raise ConfigError("config file must hold a JSON object")
        tree = deep_merge(tree, payload)
    if overrides:
        tree = deep_merge(tree, overrides)
    return build_dataclass(ExperimentConfig, tree)


def load_config(
    path: Path | None = None,
    preset: str | None = None,
    overrides: Mapping[str, Any] | None = None,
) -> ExperimentConfig:
    payload = None
    if path is not None:
        try:
            payload = json.loads(Path(path).read_text(encoding="utf-8"))
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}:{exc.lineno}: invalid JSON: {exc.msg}") from exc
    return resolve_config(preset, payload, overrides)


def canonical_config_json(config: ExperimentConfig) -> str:
    return json.dumps(to_dict(config), sort_keys=True, separators=(",", ":"))


def config_hash(config: ExperimentConfig) -> str:
    return hashlib.sha256(canonical_config_json(config).encode("utf-8")).hexdigest()
