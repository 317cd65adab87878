"""Flat ``key = value`` run configuration with typed validation."""

from __future__ import annotations

import math
from dataclasses import dataclass, fields
from pathlib import Path

from .backbones import BACKBONE_KINDS
from .errors import ConfigError
from .trainer import GATE_MODES, ModelSpec, TrainConfig

__all__ = ["RunConfig", "parse_config", "load_config", "dump_config"]


@dataclass
class RunConfig:
    benchmark: str = "odebench-2"
    dataset: str = ""  # path to a generated dataset; empty -> generate in memory
    backbone: str = "lora"
    experts: int = 2
    ctx_dim: int = 4
    split_contexts: bool = True
    width: int = 64
    depth: int = 3
    activation: str = "swish"
    seed: int = 0
    out: str = "runs/default"
    # training
    outer_iters: int = 500
    inner_iters_theta: int = 12
    inner_iters_xi: int = 12
    lr_theta: float = 3e-3
    lr_xi: float = 3e-2
    prox: float = 1e-4
    batch_size: int = 0  # 0 -> E / M
    gate_period: int = 1
    substeps: int = 2
    sigma: float = 1e-4
    kmeans_iters: int = 20
    kmeans_tol: float = 1e-3
    gate_mode: str = "mixer"
    lr_gate: float = 1e-2
    eval_every: int = 1
    checkpoint_every: int = 10
    # adaptation
    adapt_steps: int = 100
    adapt_lr: float = 3e-2
    tprmse_eps: float = 0.1

    def validate(self) -> None:
        from .datagen import BENCHMARKS

        if self.benchmark not in BENCHMARKS:
            raise ConfigError(f"unknown benchmark {self.benchmark!r}; choose from {sorted(BENCHMARKS)}")
        if self.backbone not in BACKBONE_KINDS:
            raise ConfigError(f"unknown backbone {self.backbone!r}; choose from {BACKBONE_KINDS}")
        if self.gate_mode not in GATE_MODES:
            raise ConfigError(f"gate_mode must be one of {GATE_MODES}")
        for name in ("experts", "ctx_dim", "width", "depth", "checkpoint_every"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.adapt_steps < 0 or self.batch_size < 0:
            raise ConfigError("adapt_steps and batch_size must be non-negative")
        if not (math.isfinite(self.adapt_lr) and self.adapt_lr >= 0 and self.tprmse_eps > 0):
            raise ConfigError("adapt_lr must be non-negative and tprmse_eps positive")
        if self.split_contexts and self.ctx_dim % self.experts:
            raise ConfigError(f"ctx_dim {self.ctx_dim} is not divisible by {self.experts} experts")
        self.train_config().validate()

    def train_config(self) -> TrainConfig:
        names = {f.name for f in fields(TrainConfig)}
        kw = {k: getattr(self, k) for k in names if hasattr(self, k)}
        kw["batch_size"] = self.batch_size or None
        return TrainConfig(**kw)

    def model_spec(self, state_dim: int, n_envs: int) -> ModelSpec:
        return ModelSpec(self.backbone, state_dim, n_envs, self.experts, self.ctx_dim, self.split_contexts,
                         self.seed, self.width, self.depth, self.activation)


def _convert(key: str, raw: str, kind: str):
    try:
        if kind == "bool":
            low = raw.lower()
            if low in ("true", "yes", "1", "on"):
                return True
            if low in ("false", "no", "0", "off"):
                return False
            raise ValueError(raw)
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
    except ValueError:
        raise ConfigError(f"{key}: cannot read {raw!r} as {kind}") from None
    return raw


def parse_config(text: str, overrides: dict | None = None) -> RunConfig:
    """Parse ``key = value`` lines (``#`` starts a comment); unknown keys are errors."""
    types = {f.name: f.type for f in fields(RunConfig)}
    values: dict = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in types:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        if key in values:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        values[key] = _convert(key, raw, types[key])
    for key, v in (overrides or {}).items():
        if v is None:
            continue
        if key not in types:
            raise ConfigError(f"unknown override {key!r}")
        values[key] = _convert(key, str(v), types[key]) if isinstance(v, str) else v
    cfg = RunConfig(**values)
    cfg.validate()
    return cfg


def load_config(path, overrides: dict | None = None) -> RunConfig:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file {p} does not exist")
    return parse_config(p.read_text(), overrides)


def dump_config(cfg: RunConfig) -> str:
    lines = []
    for f in fields(RunConfig):
        v = getattr(cfg, f.name)
        lines.append(f"{f.name} = {str(v).lower() if isinstance(v, bool) else v}")
    return "\n".join(lines) + "\n"
