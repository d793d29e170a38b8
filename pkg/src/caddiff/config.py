"""Dataclass configs for schedules, networks, training and sampling runs.

A run is described by a single JSON document; ``load_run_config`` parses it
and command-line flags may override individual fields afterwards.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass
from pathlib import Path

KERNEL_CHOICES = ("gaussian", "scale", "prior", "uniform")


class ConfigError(ValueError):
    """Raised when a run config is malformed or references missing paths."""


@dataclass(frozen=True)
class ScheduleConfig:
    """Coefficients of the forward corruption schedule.

    The cumulative absorbing mass follows (t/T)**gamma_exponent; the base
    kernels' self-preservation decays linearly from 1 to alpha_min.
    """

    steps: int = 100
    alpha_min: float = 0.2
    beta_ratio: float = 0.1
    gamma_exponent: float = 2.0
    sigma2: float = 2.0
    mu: float = 1.0
    coordinate_kernel: str = "gaussian"
    dimensional_kernel: str = "scale"
    boolean_kernel: str = "prior"

    def __post_init__(self):
        if self.steps < 1:
            raise ConfigError("steps must be >= 1")
        if not 0.0 <= self.alpha_min <= 1.0:
            raise ConfigError("alpha_min must be in [0, 1]")
        if not 0.0 <= self.beta_ratio <= 1.0:
            raise ConfigError("beta_ratio must be in [0, 1]")
        if self.gamma_exponent <= 0:
            raise ConfigError("gamma_exponent must be positive")
        if self.sigma2 <= 0 or self.mu <= 0:
            raise ConfigError("sigma2 and mu must be positive")
        for name in ("coordinate_kernel", "dimensional_kernel", "boolean_kernel"):
            if getattr(self, name) not in KERNEL_CHOICES:
                raise ConfigError(f"{name} must be one of {KERNEL_CHOICES}")


@dataclass(frozen=True)
class DenoiserConfig:
    """Shapes of the two denoising networks."""

    d_model: int = 256
    n_blocks_cmd: int = 8
    n_blocks_param: int = 4
    n_heads: int = 8
    n_cmd_states: int = 7      # 6 commands + absorbing
    n_param_states: int = 257  # 256 values + absorbing
    max_cmd_len: int = 60
    max_param_len: int = 280
    condition: str = "none"    # "none" | "length"
    dropout: float = 0.0

    def __post_init__(self):
        if self.d_model % self.n_heads != 0:
            raise ConfigError("d_model must be divisible by n_heads")
        if self.condition not in ("none", "length"):
            raise ConfigError("condition must be 'none' or 'length'")
        if self.max_cmd_len < 1 or self.max_param_len < 1:
            raise ConfigError("max lengths must be positive")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads


@dataclass(frozen=True)
class TrainConfig:
    corpus: str
    iterations: int
    seed: int
    batch_size: int = 64
    lr: float = 4e-5
    checkpoint_interval: int = 1000
    aux_ce_weight: float = 0.0
    dtype: str = "float32"

    def __post_init__(self):
        if self.iterations < 0:
            raise ConfigError("iterations must be >= 0")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError("dtype must be float32 or float64")


@dataclass(frozen=True)
class SampleConfig:
    n: int
    seed: int
    length: int | None = None

    def __post_init__(self):
        if self.n < 0:
            raise ConfigError("n must be >= 0")


@dataclass(frozen=True)
class RunConfig:
    schedule: ScheduleConfig
    net: DenoiserConfig
    train: TrainConfig
    sample: SampleConfig
    checkpoint_dir: str = "checkpoints"
    log_path: str = "train_log.ndjson"


def _build(cls, data: dict, where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected an object")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - names
    if unknown:
        raise ConfigError(f"{where}: unknown fields {sorted(unknown)}")
    try:
        return cls(**data)
    except TypeError as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def run_config_from_dict(doc: dict) -> RunConfig:
    if not isinstance(doc, dict):
        raise ConfigError("run config must be a JSON object")
    known = {"schedule", "net", "train", "sample", "checkpoint_dir", "log_path"}
    unknown = set(doc) - known
    if unknown:
        raise ConfigError(f"unknown top-level fields {sorted(unknown)}")
    if "train" not in doc:
        raise ConfigError("missing 'train' block")
    if "sample" not in doc:
        raise ConfigError("missing 'sample' block")
    return RunConfig(
        schedule=_build(ScheduleConfig, doc.get("schedule", {}), "schedule"),
        net=_build(DenoiserConfig, doc.get("net", {}), "net"),
        train=_build(TrainConfig, doc["train"], "train"),
        sample=_build(SampleConfig, doc["sample"], "sample"),
        checkpoint_dir=doc.get("checkpoint_dir", "checkpoints"),
        log_path=doc.get("log_path", "train_log.ndjson"),
    )


def run_config_to_dict(cfg: RunConfig) -> dict:
    return {
        "schedule": dataclasses.asdict(cfg.schedule),
        "net": dataclasses.asdict(cfg.net),
        "train": dataclasses.asdict(cfg.train),
        "sample": dataclasses.asdict(cfg.sample),
        "checkpoint_dir": cfg.checkpoint_dir,
        "log_path": cfg.log_path,
    }


def load_run_config(path: str | Path) -> RunConfig:
    """Parse a run config file and check that referenced input paths exist."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from exc
    cfg = run_config_from_dict(doc)
    corpus = Path(cfg.train.corpus)
    if not corpus.is_absolute():
        corpus = path.parent / corpus
        cfg = dataclasses.replace(
            cfg, train=dataclasses.replace(cfg.train, corpus=str(corpus))
        )
    if not corpus.exists():
        raise ConfigError(f"corpus path does not exist: {corpus}")
    return cfg
