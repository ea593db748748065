"""Experiment configuration: strict JSON parsing, canonical form and run IDs.

A config file is a single JSON object whose keys are exactly the field names
below. Unknown keys are errors, reported with the dotted path of the offending
field (``method.lr_ff: unknown field``). ``rho`` also accepts ``"inf"``.

Example::

    {
      "seed": 0,
      "task": {"n_classes": 6, "input_dim": 8, "separation": 4.0},
      "train": {"epochs": 30, "lr": 0.05},
      "stream": {
        "shift": {"kind": "additive_gaussian", "sigma": 1.0},
        "ordering": "imbalanced", "rho": "inf", "n_samples": 6400
      },
      "method": {"name": "zerosiam", "lr_f": 0.03, "lr_h": 0.03},
      "emit_plots": false
    }
"""

from __future__ import annotations

import hashlib
import itertools
import json
import math
from dataclasses import MISSING, dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple

from .adapt import MethodSpec
from .autodiff import ContractError
from .models import PredictorInit
from .objectives import DivergenceKind, ObjectiveKind
from .streams import (
    AdditiveGaussian,
    Compose,
    ConfigError,
    FeatureScale,
    MeanShift,
    Mixture,
    NoShift,
    PureNoise,
    SourceTask,
    StreamSpec,
)


@dataclass(frozen=True)
class TrainSpec:
    epochs: int = 30
    lr: float = 0.05


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = 0
    task: SourceTask = SourceTask()
    train: TrainSpec = TrainSpec()
    stream: StreamSpec = StreamSpec()
    method: MethodSpec = MethodSpec()
    pool_size: int = 3000
    steps: Optional[int] = None
    output_dir: str = "runs"
    emit_plots: bool = False

    def validate(self) -> None:
        try:
            self.task.validate()
        except ConfigError as exc:
            raise ConfigError(f"task: {exc}") from None
        try:
            self.stream.validate()
        except ConfigError as exc:
            raise ConfigError(f"stream: {exc}") from None
        if self.pool_size < self.task.n_classes:
            raise ConfigError("pool_size: must be at least n_classes")
        if self.steps is not None and self.steps < 1:
            raise ConfigError("steps: must be >= 1 or null")
        if self.train.epochs < 0 or self.train.lr < 0:
            raise ConfigError("train: epochs and lr must be non-negative")

    @property
    def run_id(self) -> str:
        return run_id(self)


# Fields that only affect where and how results are written, not what they are.
_NON_RESULT_FIELDS = ("output_dir", "emit_plots")

_SHIFT_TYPES = {
    "none": NoShift,
    "additive_gaussian": AdditiveGaussian,
    "mean_shift": MeanShift,
    "feature_scale": FeatureScale,
    "compose": Compose,
    "mixture": Mixture,
    "pure_noise": PureNoise,
}


# ---------------------------------------------------------------- parsing


def _expect(cond: bool, path: str, msg: str) -> None:
    if not cond:
        raise ConfigError(f"{path}: {msg}")


def _scalar(value: Any, default: Any, path: str) -> Any:
    """Check ``value`` against the type of the field's default."""
    if isinstance(default, bool):
        _expect(isinstance(value, bool), path, f"expected true/false, got {value!r}")
        return value
    if isinstance(default, int):
        _expect(isinstance(value, int) and not isinstance(value, bool), path, f"expected an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if value == "inf":
            return math.inf
        _expect(isinstance(value, (int, float)) and not isinstance(value, bool), path, f"expected a number, got {value!r}")
        return float(value)
    if isinstance(default, str):
        _expect(isinstance(value, str), path, f"expected a string, got {value!r}")
        return value
    return value


# Type templates for shift fields that have no default.
_REQUIRED = {"sigma": 0.0, "factor": 0.0, "n_batches": 0}


def _fields_from(cls, data: Any, path: str, nested: Mapping[str, Any] = ()) -> Dict[str, Any]:
    _expect(isinstance(data, dict), path or "<root>", f"expected an object, got {type(data).__name__}")
    names = {f.name: f for f in fields(cls) if f.init}
    kw = {}
    for key, value in data.items():
        sub = f"{path}.{key}" if path else key
        if key not in names:
            raise ConfigError(f"{sub}: unknown field")
        if key in nested:
            kw[key] = nested[key](value, sub)
        else:
            default = cls.__dataclass_fields__[key].default
            if default is MISSING:
                default = _REQUIRED.get(key)
            kw[key] = _scalar(value, default, sub)
    return kw


def _build(cls, kw: Dict[str, Any], path: str):
    try:
        return cls(**kw)
    except (ValueError, ContractError, TypeError) as exc:
        raise ConfigError(f"{path or '<root>'}: {exc}") from None


def parse_shift(data: Any, path: str = "stream.shift"):
    _expect(isinstance(data, dict), path, "expected an object")
    kind = data.get("kind")
    _expect(kind in _SHIFT_TYPES, f"{path}.kind", f"expected one of {sorted(_SHIFT_TYPES)}, got {kind!r}")
    cls = _SHIFT_TYPES[kind]
    body = {k: v for k, v in data.items() if k != "kind"}

    def parts(v, p):
        _expect(isinstance(v, list) and v, p, "expected a non-empty list")
        return tuple(parse_shift(x, f"{p}[{i}]") for i, x in enumerate(v))

    def floats(v, p):
        _expect(isinstance(v, list), p, "expected a list of numbers")
        return tuple(_scalar(x, 0.0, f"{p}[{i}]") for i, x in enumerate(v))

    nested = {"parts": parts, "delta": floats, "proportions": floats}
    return _build(cls, _fields_from(cls, body, path, nested), path)


def parse_predictor(data: Any, path: str) -> PredictorInit:
    if isinstance(data, str):
        data = {"variant": data}
    return _build(PredictorInit, _fields_from(PredictorInit, data, path), path)


def parse_method(data: Any, path: str = "method") -> MethodSpec:
    def enum(kind):
        def conv(v, p):
            try:
                return kind(v)
            except ValueError:
                raise ConfigError(f"{p}: expected one of {[k.value for k in kind]}, got {v!r}") from None
        return conv

    nested = {
        "predictor": parse_predictor,
        "objective": enum(ObjectiveKind),
        "divergence": enum(DivergenceKind),
    }
    return _build(MethodSpec, _fields_from(MethodSpec, data, path, nested), path)


def parse_stream(data: Any, path: str = "stream") -> StreamSpec:
    return _build(StreamSpec, _fields_from(StreamSpec, data, path, {"shift": parse_shift}), path)


def parse_config(data: Any) -> ExperimentConfig:
    def steps(v, p):
        if v is None:
            return None
        return _scalar(v, 0, p)

    nested = {
        "task": lambda v, p: _build(SourceTask, _fields_from(SourceTask, v, p), p),
        "train": lambda v, p: _build(TrainSpec, _fields_from(TrainSpec, v, p), p),
        "stream": parse_stream,
        "method": parse_method,
        "steps": steps,
    }
    cfg = _build(ExperimentConfig, _fields_from(ExperimentConfig, data, "", nested), "")
    cfg.validate()
    return cfg


def load_config(path) -> ExperimentConfig:
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    return parse_config(data)


# ---------------------------------------------------------------- canonical form


def _plain(value: Any) -> Any:
    if isinstance(value, float) and math.isinf(value):
        return "inf" if value > 0 else "-inf"
    if isinstance(value, (ObjectiveKind, DivergenceKind)):
        return value.value
    if hasattr(value, "__dataclass_fields__"):
        return {f.name: _plain(getattr(value, f.name)) for f in fields(value)}
    if isinstance(value, (list, tuple)):
        return [_plain(v) for v in value]
    return value


def config_to_dict(cfg: ExperimentConfig) -> Dict[str, Any]:
    """Plain-JSON form that :func:`parse_config` reads back to an equal config."""
    return _plain(cfg)


def canonical_json(cfg: ExperimentConfig) -> str:
    d = config_to_dict(cfg)
    for name in _NON_RESULT_FIELDS:
        d.pop(name)
    return json.dumps(d, sort_keys=True, separators=(",", ":"))


def run_id(cfg: ExperimentConfig) -> str:
    """First 16 hex digits of the SHA-256 of the canonical config.

    Output location and plot switches are excluded, so the same experiment
    gets the same ID wherever it is written.
    """
    return hashlib.sha256(canonical_json(cfg).encode()).hexdigest()[:16]


def dump_config(cfg: ExperimentConfig, path) -> None:
    Path(path).write_text(json.dumps(config_to_dict(cfg), indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------- sweeps


SWEEP_AXES = ("alpha", "divergence", "lr_f", "lr_h", "method", "objective", "predictor_init", "rho")


@dataclass(frozen=True)
class SweepSpec:
    """A base config and value lists for some of :data:`SWEEP_AXES`."""

    base: ExperimentConfig
    axes: Tuple[Tuple[str, Tuple[Any, ...]], ...] = field(default=())

    def __post_init__(self):
        axes = dict(self.axes)
        for name, values in axes.items():
            if name not in SWEEP_AXES:
                raise ConfigError(f"axes.{name}: unknown axis; expected one of {SWEEP_AXES}")
            if not values:
                raise ConfigError(f"axes.{name}: empty value list")
        object.__setattr__(self, "axes", tuple(sorted((k, tuple(v)) for k, v in axes.items())))

    def points(self) -> List[Dict[str, Any]]:
        """Axis assignments in lexicographic order (axes by name, values by listed position)."""
        names = [k for k, _ in self.axes]
        return [dict(zip(names, combo)) for combo in itertools.product(*(v for _, v in self.axes))]

    def configs(self) -> List[ExperimentConfig]:
        return [apply_axes(self.base, p) for p in self.points()]


def apply_axes(base: ExperimentConfig, point: Mapping[str, Any]) -> ExperimentConfig:
    method_kw: Dict[str, Any] = {}
    stream_kw: Dict[str, Any] = {}
    for name, value in point.items():
        path = f"axes.{name}"
        if name == "method":
            method_kw["name"] = value
        elif name in ("lr_f", "lr_h", "alpha"):
            method_kw[name] = _scalar(value, 0.0, path)
        elif name == "objective":
            method_kw["objective"] = parse_method({"objective": value}, "axes").objective
        elif name == "divergence":
            method_kw["divergence"] = parse_method({"divergence": value}, "axes").divergence
        elif name == "predictor_init":
            method_kw["predictor"] = parse_predictor(value, path)
        elif name == "rho":
            stream_kw["rho"] = _scalar(value, 0.0, path)
            stream_kw["ordering"] = "imbalanced"
    try:
        method = replace(base.method, **method_kw)
    except (ValueError, ContractError) as exc:
        raise ConfigError(f"axes: {exc}") from None
    cfg = replace(base, method=method, stream=replace(base.stream, **stream_kw))
    cfg.validate()
    return cfg


def parse_axes(data: Any) -> Tuple[Tuple[str, Tuple[Any, ...]], ...]:
    _expect(isinstance(data, dict), "axes", "expected an object mapping axis names to lists")
    out = []
    for name, values in data.items():
        _expect(isinstance(values, list), f"axes.{name}", "expected a list")
        out.append((name, tuple(values)))
    return tuple(out)


def load_sweep(config_path, axes_path) -> SweepSpec:
    base = load_config(config_path)
    try:
        axes = json.loads(Path(axes_path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{axes_path}: invalid JSON ({exc})") from None
    return SweepSpec(base, parse_axes(axes))


def axis_label(value: Any) -> str:
    if isinstance(value, dict):
        return json.dumps(value, sort_keys=True, separators=(",", ":"))
    if isinstance(value, float) and math.isinf(value):
        return "inf"
    return str(value)
