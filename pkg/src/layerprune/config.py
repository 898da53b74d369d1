"""Run configuration: one flat, versioned YAML schema shared by every command."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Any, Iterable, Mapping

import yaml

SCHEMA_VERSION = 1
OBJECTIVES = ("sft", "kd", "adaptive_kd")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class PipelineConfig:
    schema_version: int = SCHEMA_VERSION
    seed: int = 0

    # corpus
    corpus_kind: str = "markov-chain"
    corpus_length: int = 1_000_000
    corpus_seed: int = 0
    markov_branching: int = 4
    copy_min: int = 4
    copy_max: int = 16
    modulus: int = 97

    # model
    n_layers: int = 8
    d_model: int = 64
    n_heads: int = 4
    d_ff: int = 256
    vocab: int = 256
    max_seq: int = 128
    protected: tuple[int, ...] | None = None

    # teacher training
    teacher_steps: int = 1500
    teacher_lr: float = 3e-3
    teacher_warmup: int = 100
    teacher_lr_floor: float = 3e-4
    teacher_target_ppl: float = 0.0
    teacher_eval_every: int = 250

    # pruning schedule
    T: int = 1000
    T_M: int = 100
    beta: float = 0.9
    k: int = 6
    k_horizon: str = "search"
    tau_horizon: str = "total"
    init: str = "kl"
    standardize_scores: bool = True

    # optimisation
    lr: float = 1e-3
    warmup: int = 50
    lr_floor: float = 1e-4
    optimizer: str = "adam"
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    grad_clip: float = 1.0
    batch_size: int = 8
    seq_len: int = 64
    objective: str = "adaptive_kd"
    K: int = 10
    calib_count: int = 40

    # evaluation / bookkeeping
    eval_every: int = 100
    eval_tokens: int = 16384
    ckpt_every: int = 0
    oracle_batch: int = 64

    # paths
    corpus: str | None = None
    teacher: str | None = None
    cache: str | None = None
    run_dir: str | None = None

    def __post_init__(self):
        if self.protected is not None:
            object.__setattr__(self, "protected", tuple(int(p) for p in self.protected))
        self.validate()

    def validate(self) -> None:
        if self.schema_version != SCHEMA_VERSION:
            raise ConfigError(f"unsupported schema_version {self.schema_version}")
        if not 0 <= self.T_M <= self.T or self.T <= 0:
            raise ConfigError(f"need 0 <= T_M <= T and T > 0 (T={self.T}, T_M={self.T_M})")
        if not 0 <= self.warmup <= self.T:
            raise ConfigError(f"warmup={self.warmup} must lie in [0, T]")
        if self.lr <= 0:
            raise ConfigError("lr must be positive")
        if not 0 < self.beta < 1:
            raise ConfigError("beta must be in (0, 1)")
        if self.objective not in OBJECTIVES:
            raise ConfigError(f"objective must be one of {OBJECTIVES}")
        if self.optimizer not in ("adam", "sgd"):
            raise ConfigError("optimizer must be adam or sgd")
        if self.k_horizon not in ("search", "total") or self.tau_horizon not in ("search", "total"):
            raise ConfigError("k_horizon / tau_horizon must be 'search' or 'total'")
        if self.init not in ("kl", "bi", "zero"):
            raise ConfigError("init must be kl, bi or zero")
        if self.k > self.n_layers or self.k < len(self.protected_layers):
            raise ConfigError(f"k={self.k} must lie in [|protected|, n_layers]")
        if self.seq_len > self.max_seq:
            raise ConfigError("seq_len exceeds max_seq")

    @property
    def protected_layers(self) -> tuple[int, ...]:
        if self.protected is None:
            return (0, self.n_layers - 1)
        return self.protected

    def replace(self, **changes) -> "PipelineConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict[str, Any]:
        d = dataclasses.asdict(self)
        if d["protected"] is not None:
            d["protected"] = list(d["protected"])
        return d

    def model_config(self):
        from .model import ModelConfig

        return ModelConfig(
            n_layers=self.n_layers,
            d_model=self.d_model,
            n_heads=self.n_heads,
            d_ff=self.d_ff,
            vocab=self.vocab,
            max_seq=self.max_seq,
            protected=self.protected_layers,
        )


FIELD_NAMES = tuple(f.name for f in fields(PipelineConfig))


_DEFAULTS = {f.name: f.default for f in fields(PipelineConfig)}


def _coerce(key: str, value: Any) -> Any:
    if key not in FIELD_NAMES:
        raise ConfigError(f"unknown config key {key!r}")
    default = _DEFAULTS[key]
    if value is None or default is None:
        return value
    kind = type(default)
    if kind is bool:
        ok = isinstance(value, bool)
    elif kind is int:
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif kind is float:
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
        value = float(value) if ok else value
    else:
        ok = isinstance(value, kind)
    if not ok:
        raise ConfigError(f"{key} expects {kind.__name__}, got {value!r}")
    return value


def from_mapping(data: Mapping[str, Any], base: PipelineConfig | None = None) -> PipelineConfig:
    base = base or PipelineConfig()
    changes = {k: _coerce(k, v) for k, v in data.items()}
    try:
        return dataclasses.replace(base, **changes)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None


def parse_overrides(items: Iterable[str]) -> dict[str, Any]:
    """``["key=value", ...]`` with YAML-typed values."""
    out = {}
    for item in items:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        key, raw = item.split("=", 1)
        key = key.strip().replace("-", "_")
        out[key] = yaml.safe_load(raw) if raw.strip() else None
    return out


def load(path: str | Path | None = None, overrides: Mapping[str, Any] | None = None) -> PipelineConfig:
    data: dict[str, Any] = {}
    if path is not None:
        loaded = yaml.safe_load(Path(path).read_text()) or {}
        if not isinstance(loaded, dict):
            raise ConfigError(f"{path} is not a key/value document")
        data.update(loaded)
    if overrides:
        data.update(overrides)
    return from_mapping(data)


def dump(cfg: PipelineConfig) -> str:
    return yaml.safe_dump(cfg.to_dict(), sort_keys=True)
