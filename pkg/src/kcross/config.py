"""Structured run configuration with strict key checking.

Every default in the package is overridable from one JSON file; unknown
keys are rejected (typo'd keys must fail loudly, not silently fall back to
defaults), and the fully resolved config is echoed into the run directory
so a run can be reproduced from its snapshot alone.

Schema (all sections optional, all keys optional within a section):

    {
      "train":   { ... TrainConfig fields ...,
                   "loss_weights": { tumor, structure, frequency,
                                     similarity, laplacian, lpips },
                   "kernel_bank":  { sigmas: [...], weights: [...] } },
      "model":   { ... ModelConfig fields ... },
      "data":    { "manifest": "path/to/manifest.jsonl",
                   "ratings": "path/to/ratings-export.jsonl" | null },
      "phantom": { "n": 200, "seed": 7, "size": 64, "healthy_every": 4 }
    }
"""

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigurationError
from .losses import LossWeights, MMDKernelBank
from .model import ModelConfig
from .training import TrainConfig


@dataclass
class DataConfig:
    manifest: str | None = None
    ratings: str | None = None


@dataclass
class PhantomConfig:
    n: int = 200
    seed: int = 7
    size: int = 64
    healthy_every: int = 4


@dataclass
class RunConfig:
    train: TrainConfig = field(default_factory=TrainConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    data: DataConfig = field(default_factory=DataConfig)
    phantom: PhantomConfig = field(default_factory=PhantomConfig)


def _build(cls, raw, path):
    if not isinstance(raw, dict):
        raise ConfigurationError(f"config section {path!r} must be an object")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(raw) - set(fields)
    if unknown:
        raise ConfigurationError(
            f"unknown config key(s) under {path!r}: {sorted(unknown)}; "
            f"known: {sorted(fields)}"
        )
    kwargs = {}
    for name, value in raw.items():
        target = fields[name].type
        if name == "loss_weights":
            kwargs[name] = _build(LossWeights, value, f"{path}.{name}")
        elif name == "kernel_bank":
            if isinstance(value, dict) and "sigmas" in value:
                value = dict(value)
                value["sigmas"] = tuple(value["sigmas"])
                if "weights" in value:
                    value["weights"] = tuple(value["weights"])
            kwargs[name] = _build(MMDKernelBank, value, f"{path}.{name}")
        else:
            kwargs[name] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigurationError(f"bad config section {path!r}: {exc}") from exc


SECTIONS = {
    "train": TrainConfig,
    "model": ModelConfig,
    "data": DataConfig,
    "phantom": PhantomConfig,
}


def run_config_from_dict(raw) -> RunConfig:
    if not isinstance(raw, dict):
        raise ConfigurationError("config root must be a JSON object")
    unknown = set(raw) - set(SECTIONS)
    if unknown:
        raise ConfigurationError(
            f"unknown top-level config key(s): {sorted(unknown)}; known: {sorted(SECTIONS)}"
        )
    kwargs = {
        name: _build(cls, raw[name], name) for name, cls in SECTIONS.items() if name in raw
    }
    cfg = RunConfig(**kwargs)
    cfg.train.validate()
    return cfg


def load_run_config(path=None) -> RunConfig:
    if path is None:
        return RunConfig()
    path = Path(path)
    if not path.exists():
        raise ConfigurationError(f"config file not found: {path}")
    try:
        raw = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"{path}: invalid JSON ({exc})") from exc
    return run_config_from_dict(raw)


def resolved_dict(cfg: RunConfig) -> dict:
    return dataclasses.asdict(cfg)


def write_snapshot(cfg: RunConfig, run_dir) -> Path:
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    out = run_dir / "config_resolved.json"
    out.write_text(json.dumps(resolved_dict(cfg), indent=2, sort_keys=True) + "\n")
    return out
