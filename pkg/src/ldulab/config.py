"""Experiment configuration: a tree of dataclasses read from / written to JSON.

Every field has an explicit default, unknown keys are rejected with their
dotted key path, and the fully resolved tree (defaults filled in) is what
gets written next to experiment outputs.
"""

from __future__ import annotations

import dataclasses
import json
import typing
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigError

SCHEMA_VERSION = 1
EXPERIMENTS = ("main", "feasible-region", "budget-ablation", "steps-ablation", "purify-sweep")
SWEEP_KEYS = ("", "k", "delta_255", "t_star", "identity")


@dataclass
class DatasetConfig:
    kind: str = "spiral"
    n_per_identity: int = 6
    n_identities: int = 6
    noise: float = 0.02
    a: float = 0.05
    b: float = 0.045
    turns: float = 3.0
    dim: int = 2
    extent: int = 16
    pool_per_class: int = 400
    n_reference: int = 200
    seed: int = 0


@dataclass
class ScheduleConfig:
    T: int = 200
    kind: str = "linear"
    beta_min: float = 1e-4
    beta_max: float = 0.02


@dataclass
class ModelConfig:
    hidden: list[int] = field(default_factory=lambda: [128, 128, 128])
    conv_width: int = 32
    train_steps: int = 20000
    lr: float = 2e-3
    lr_final: float = 1e-4
    batch: int = 128
    cond_drop: float = 0.1
    seed: int = 0
    checkpoint: str = ""  # load this trained denoiser instead of training one


@dataclass
class SamplerSection:
    k: int = 4
    guidance: float = 1.0
    eval_k: int = 50  # steps used when sampling personalized generations


@dataclass
class PersonalizeConfig:
    method: str = "ti"  # ti | db
    steps: int = 1500
    lr: float = 5e-3
    n_generate: int = 256
    db_steps: int = 1000
    db_lr: float = 1e-4
    prior_weight: float = 1.0


@dataclass
class UnlearnConfig:
    delta_255: float = 10.0  # budget in units of 1/255 of the data range
    eta_lambda: float = 0.1
    lambda0: float = 0.0
    tolerance: float = 1e-3
    steps: int = 2000
    lr: float = 3e-3
    lr_final: float = 0.0  # > 0 turns on a cosine decay of the rho step size down to this value
    n_mc: int = 8
    shuffle: bool = False
    per_identity: bool = False  # one rho per identity instead of one shared rho
    norm: str = "linf-smooth"
    minmax: bool = False
    outer_rounds: int = 10
    tau_steps: int = 100
    rho_steps: int = 100


@dataclass
class AttackConfig:
    name: str = "none"  # none | diffpure | gaussian_filter | quantize
    t_star: int = 30
    kernel_size: int = 7
    sigma: float = 1.0
    levels: int = 32
    # "attacked": the clean baseline personalizes on clean subjects passed through the same attack;
    # "clean": the baseline is plain clean personalization
    baseline: str = "attacked"


@dataclass
class SweepConfig:
    key: str = ""
    values: list[float] = field(default_factory=list)


@dataclass
class MetricsConfig:
    bandwidth: float = 0.1
    carry_draws: int = 64
    carry_points: int = 256


@dataclass
class ExperimentConfig:
    schema_version: int = SCHEMA_VERSION
    experiment: str = "main"
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    sampler: SamplerSection = field(default_factory=SamplerSection)
    personalize: PersonalizeConfig = field(default_factory=PersonalizeConfig)
    unlearn: UnlearnConfig = field(default_factory=UnlearnConfig)
    attack: AttackConfig = field(default_factory=AttackConfig)
    sweep: SweepConfig = field(default_factory=SweepConfig)
    metrics: MetricsConfig = field(default_factory=MetricsConfig)
    seeds: list[int] = field(default_factory=lambda: [0])
    output_dir: str = "runs/out"

    def validate(self) -> "ExperimentConfig":
        if self.schema_version != SCHEMA_VERSION:
            raise ConfigError(f"unsupported schema version {self.schema_version}", "schema_version")
        if self.experiment not in EXPERIMENTS:
            raise ConfigError(f"unknown experiment {self.experiment!r}; expected one of {EXPERIMENTS}", "experiment")
        if self.sweep.key not in SWEEP_KEYS:
            raise ConfigError(f"unknown sweep key {self.sweep.key!r}", "sweep.key")
        if not self.seeds:
            raise ConfigError("at least one seed is required", "seeds")
        if self.sampler.k < 1 or self.sampler.k > self.schedule.T:
            raise ConfigError("k must lie in [1, T]", "sampler.k")
        if self.unlearn.delta_255 <= 0:
            raise ConfigError("budget must be positive", "unlearn.delta_255")
        if self.unlearn.norm not in ("linf-smooth", "l2"):
            raise ConfigError(f"unknown norm {self.unlearn.norm!r}", "unlearn.norm")
        if self.attack.name not in ("none", "diffpure", "gaussian_filter", "quantize"):
            raise ConfigError(f"unknown attack {self.attack.name!r}", "attack.name")
        if self.attack.baseline not in ("attacked", "clean"):
            raise ConfigError(f"unknown baseline {self.attack.baseline!r}", "attack.baseline")
        if self.personalize.method not in ("ti", "db"):
            raise ConfigError(f"unknown personalization method {self.personalize.method!r}", "personalize.method")
        if self.dataset.kind not in ("spiral", "gmm", "glyphs"):
            raise ConfigError(f"unknown dataset kind {self.dataset.kind!r}", "dataset.kind")
        return self

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


def _convert(tp, value, path: str):
    origin = typing.get_origin(tp)
    if dataclasses.is_dataclass(tp):
        if not isinstance(value, dict):
            raise ConfigError(f"expected a table, got {type(value).__name__}", path)
        return _build(tp, value, path)
    if origin is list:
        (inner,) = typing.get_args(tp)
        if not isinstance(value, list):
            raise ConfigError(f"expected a list, got {type(value).__name__}", path)
        return [_convert(inner, v, f"{path}[{i}]") for i, v in enumerate(value)]
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"expected true/false, got {value!r}", path)
        return value
    if tp is int:
        if isinstance(value, bool) or not (isinstance(value, int) or (isinstance(value, float) and value.is_integer())):
            raise ConfigError(f"expected an integer, got {value!r}", path)
        return int(value)
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"expected a number, got {value!r}", path)
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(f"expected a string, got {value!r}", path)
        return value
    raise ConfigError(f"unsupported field type {tp}", path)


def _build(cls, data: dict, prefix: str = ""):
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    for key in data:
        if key not in names:
            raise ConfigError("unknown key", f"{prefix}.{key}" if prefix else key)
    kwargs = {}
    for f in dataclasses.fields(cls):
        if f.name in data:
            kwargs[f.name] = _convert(hints[f.name], data[f.name], f"{prefix}.{f.name}" if prefix else f.name)
    return cls(**kwargs)


def from_dict(data: dict) -> ExperimentConfig:
    if not isinstance(data, dict):
        raise ConfigError("config root must be a table")
    return _build(ExperimentConfig, data).validate()


def load_config(path: str | Path) -> ExperimentConfig:
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"invalid JSON: {exc}", str(path)) from exc
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}", str(path)) from exc
    return from_dict(data)


def apply_overrides(data: dict, overrides: list[str]) -> dict:
    """Apply ``a.b.c=value`` overrides; values are parsed as JSON, falling back to strings."""
    out = json.loads(json.dumps(data))
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        key, raw = item.split("=", 1)
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        node = out
        parts = key.split(".")
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigError("cannot descend into a non-table", key)
        node[parts[-1]] = value
    return out


def write_resolved(config: ExperimentConfig, directory: str | Path) -> Path:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    path = d / "resolved_config.json"
    path.write_text(config.to_json())
    return path
