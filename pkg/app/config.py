"""
Run configuration for QuoVLA.

All settings are frozen dataclasses that validate themselves on construction,
in the same spirit as a small explicit `DatabaseConfig`: higher-level code
decides the values, these classes only guarantee they are coherent.

Config files are TOML with one table per dataclass:

    [train]   learning_rate, weight_decay, grad_clip, warmup_steps, total_steps,
              batch_size, seed, lr_floor, precision, log_every, eval_every,
              quantization_enabled, dual_branch_enabled, adaptive_ste_enabled,
              fm_reduction, raw_branch_mode, tau_min, tau_max
    [dims]    M, d, n_heads, d_ff, L_q, T, D, expert_hidden, n_freqs
    [quant]   bits, g_min, scale_epsilon
    [tc]      lambda1, lambda2, lambda_tc
    [eval]    rho, step_error_threshold, flow_steps, seed

Command-line overrides use `section.key=value` (a bare `key=value` targets
`[train]`); values are parsed as TOML literals.
"""

from __future__ import annotations

import dataclasses
try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Mapping, Optional, Sequence

from app.errors import ConfigError
from app.quantizer import QuantConfig

CONFIG_SCHEMA_VERSION = 1

FM_REDUCTIONS = ("sum", "mean")
RAW_BRANCH_MODES = ("bypass_block", "bypass_quant")
PRECISIONS = ("float64", "float32")


@dataclass(frozen=True)
class Dims:
    """Model and data dimensions."""

    M: int = 16
    d: int = 64
    n_heads: int = 8
    d_ff: int = 256
    L_q: int = 1
    T: int = 8
    D: int = 2
    expert_hidden: int = 128
    n_freqs: int = 8

    def __post_init__(self) -> None:
        for name in ("M", "d", "n_heads", "d_ff", "L_q", "D", "expert_hidden", "n_freqs"):
            if getattr(self, name) < 1:
                raise ConfigError(f"dims.{name} must be >= 1, got {getattr(self, name)}")
        if self.T < 3:
            raise ConfigError(f"dims.T must be >= 3 (second differences), got {self.T}")
        if self.d % self.n_heads:
            raise ConfigError(f"dims.d={self.d} is not divisible by n_heads={self.n_heads}")


@dataclass(frozen=True)
class TCWeights:
    """Weights of the temporal-complexity regularizer."""

    lambda1: float = 1.0
    lambda2: float = 1.0
    lambda_tc: float = 0.3

    def __post_init__(self) -> None:
        for name in ("lambda1", "lambda2", "lambda_tc"):
            if getattr(self, name) < 0:
                raise ConfigError(f"tc.{name} must be nonnegative")


@dataclass(frozen=True)
class EvalConfig:
    """Success predicate and sampler settings for evaluation."""

    rho: float = 0.1
    step_error_threshold: float = 0.2
    flow_steps: int = 10
    seed: int = 0

    def __post_init__(self) -> None:
        if self.rho <= 0 or self.step_error_threshold <= 0:
            raise ConfigError("eval tolerances must be positive")
        if self.flow_steps < 1:
            raise ConfigError("eval.flow_steps must be >= 1")


@dataclass(frozen=True)
class TrainConfig:
    """Every hyperparameter, seed and ablation flag of one run."""

    learning_rate: float = 1e-3
    weight_decay: float = 0.01
    grad_clip: float = 1.0
    warmup_steps: int = 100
    total_steps: int = 2000
    batch_size: int = 64
    seed: int = 0
    lr_floor: float = 0.0
    precision: str = "float64"
    log_every: int = 100
    eval_every: int = 0
    quantization_enabled: bool = True
    dual_branch_enabled: bool = True
    adaptive_ste_enabled: bool = True
    fm_reduction: str = "sum"
    raw_branch_mode: str = "bypass_block"
    tau_min: float = 0.001
    tau_max: float = 0.999
    dims: Dims = field(default_factory=Dims)
    quant: QuantConfig = field(default_factory=QuantConfig)
    tc: TCWeights = field(default_factory=TCWeights)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def __post_init__(self) -> None:
        if self.learning_rate <= 0 or self.grad_clip <= 0:
            raise ConfigError("learning_rate and grad_clip must be positive")
        if self.weight_decay < 0 or self.lr_floor < 0:
            raise ConfigError("weight_decay and lr_floor must be nonnegative")
        if self.lr_floor > self.learning_rate:
            raise ConfigError("lr_floor cannot exceed learning_rate")
        if self.total_steps < 1 or self.batch_size < 1:
            raise ConfigError("total_steps and batch_size must be positive")
        if not (0 <= self.warmup_steps <= self.total_steps):
            raise ConfigError("warmup_steps must lie in [0, total_steps]")
        if self.log_every < 1 or self.eval_every < 0:
            raise ConfigError("log_every must be >= 1 and eval_every >= 0")
        if self.precision not in PRECISIONS:
            raise ConfigError(f"precision must be one of {PRECISIONS}")
        if self.fm_reduction not in FM_REDUCTIONS:
            raise ConfigError(f"fm_reduction must be one of {FM_REDUCTIONS}")
        if self.raw_branch_mode not in RAW_BRANCH_MODES:
            raise ConfigError(f"raw_branch_mode must be one of {RAW_BRANCH_MODES}")
        if not (0.0 <= self.tau_min < self.tau_max <= 1.0):
            raise ConfigError("tau range must satisfy 0 <= tau_min < tau_max <= 1")
        if self.dual_branch_enabled and not self.quantization_enabled:
            raise ConfigError("dual_branch_enabled requires quantization_enabled")

    @classmethod
    def from_default(cls) -> "TrainConfig":
        return cls()

    def to_dict(self) -> dict[str, Any]:
        """JSON-ready snapshot including the schema version."""
        data = dataclasses.asdict(self)
        data["schema_version"] = CONFIG_SCHEMA_VERSION
        return data

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "TrainConfig":
        """Inverse of to_dict; rejects unknown keys and unsupported schema versions."""
        data = dict(data)
        version = data.pop("schema_version", CONFIG_SCHEMA_VERSION)
        if version != CONFIG_SCHEMA_VERSION:
            raise ConfigError(f"unsupported config schema version {version}")
        nested = {
            "dims": _build(Dims, data.pop("dims", {}), "dims"),
            "quant": _build(QuantConfig, data.pop("quant", {}), "quant"),
            "tc": _build(TCWeights, data.pop("tc", {}), "tc"),
            "eval": _build(EvalConfig, data.pop("eval", {}), "eval"),
        }
        return _build(cls, {**data, **nested}, "train")

    def with_data_dims(self, *, M: int, d: int, T: int, D: int) -> "TrainConfig":
        """Copy whose data-facing dims follow a dataset."""
        return replace(self, dims=replace(self.dims, M=M, d=d, T=T, D=D))


PRESETS: dict[str, dict[str, dict[str, Any]]] = {
    "desk": {},
    # Optimizer settings reported for the full-size model; dims stay desk-sized.
    "reported": {
        "train": {"learning_rate": 2.5e-5, "weight_decay": 0.01, "grad_clip": 1.0},
        "dims": {"L_q": 1, "n_heads": 8},
        "quant": {"bits": 8},
    },
}

_SECTIONS = ("train", "dims", "quant", "tc", "eval")


def _build(cls: type, values: Mapping[str, Any], section: str) -> Any:
    known = {f.name for f in fields(cls)}
    unknown = set(values) - known
    if unknown:
        raise ConfigError(f"unknown key(s) in [{section}]: {', '.join(sorted(unknown))}")
    try:
        return cls(**values)
    except TypeError as exc:
        raise ConfigError(f"invalid [{section}] values: {exc}") from exc


def parse_override(text: str) -> tuple[str, str, Any]:
    """Split `section.key=value` into its parts, parsing value as TOML."""
    if "=" not in text:
        raise ConfigError(f"override {text!r} is not of the form key=value")
    lhs, raw = text.split("=", 1)
    section, _, key = lhs.strip().rpartition(".")
    section = section or "train"
    try:
        value = tomllib.loads(f"v = {raw.strip()}")["v"]
    except tomllib.TOMLDecodeError:
        value = raw.strip()
    return section, key, value


def _merge(tables: dict[str, dict[str, Any]], extra: Mapping[str, Mapping[str, Any]]) -> None:
    for section, values in extra.items():
        if section not in _SECTIONS:
            continue
        tables.setdefault(section, {}).update(values)


def load_config(
    path: Optional[Path] = None,
    overrides: Sequence[str] = (),
    *,
    preset: str = "desk",
) -> TrainConfig:
    """Build a TrainConfig from preset, then TOML file, then overrides."""
    if preset not in PRESETS:
        raise ConfigError(f"unknown preset {preset!r}; expected one of {sorted(PRESETS)}")
    tables: dict[str, dict[str, Any]] = {name: {} for name in _SECTIONS}
    _merge(tables, PRESETS[preset])

    if path is not None:
        try:
            with Path(path).open("rb") as fh:
                _merge(tables, tomllib.load(fh))
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"config file {path} is not valid TOML: {exc}") from exc

    for text in overrides:
        section, key, value = parse_override(text)
        if section not in _SECTIONS:
            raise ConfigError(f"unknown config section {section!r}")
        tables[section][key] = value

    return TrainConfig.from_dict({**tables["train"], **{s: tables[s] for s in _SECTIONS if s != "train"}})


def read_table(path: Optional[Path], section: str) -> dict[str, Any]:
    """Return one raw table from a TOML file (empty if absent)."""
    if path is None:
        return {}
    try:
        with Path(path).open("rb") as fh:
            return dict(tomllib.load(fh).get(section, {}))
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid TOML: {exc}") from exc
