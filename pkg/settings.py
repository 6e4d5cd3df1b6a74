"""
SETTINGS - Environment and run configuration
============================================
Environment variables (optionally from a .env file):

    AFFECT_CAPTION_URL      remote captioning endpoint (http caption provider)
    AFFECT_CAPTION_API_KEY  bearer token sent to the captioning endpoint
    AFFECT_CACHE_DIR        root of the caption / inversion caches (.affect_cache)
    AFFECT_NUM_WORKERS      per-image worker threads in sweeps (1)

Run configuration comes from a JSON file (see CONFIG.md) and is parsed into a
RunConfig. Unknown sections or keys are rejected.
"""

import json
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Dict, List, Optional

from dotenv import load_dotenv

from errors import ConfigError

load_dotenv()

CAPTION_URL = os.environ.get("AFFECT_CAPTION_URL", "")
CAPTION_API_KEY = os.environ.get("AFFECT_CAPTION_API_KEY", "")
CACHE_DIR = Path(os.environ.get("AFFECT_CACHE_DIR", ".affect_cache"))
NUM_WORKERS = int(os.environ.get("AFFECT_NUM_WORKERS", "1"))


@dataclass
class TrainSection:
    epochs: int = 30
    batch_size: int = 32
    learning_rate: float = 1e-3
    val_fraction: float = 0.1
    input_size: int = 64
    patience: int = 10


@dataclass
class AdaptSection:
    method: str = "parametric"
    reference: List[float] = field(default_factory=lambda: [0.5, 0.0])
    w1: float = 1.0
    w2: float = 0.15
    iters: int = 200
    learning_rate: float = 0.05


@dataclass
class DiffusionSection:
    train_steps: int = 1000
    beta_lo: float = 1e-4
    beta_hi: float = 0.02
    ddim_steps: int = 50
    cfg_scale: float = 2.0
    guidance_scale: float = 0.2
    nto_scale: Optional[float] = None  # None reconstructs at cfg_scale
    nto_inner_steps: int = 10
    nto_learning_rate: float = 1e-2


@dataclass
class SweepSection:
    methods: List[str] = field(default_factory=lambda: ["parametric", "style", "diffusion"])
    adaptation_weights: List[float] = field(default_factory=lambda: [0.1, 0.3, 0.5, 0.7, 1.0])
    guidance_weights: List[float] = field(default_factory=lambda: [0.05, 0.1, 0.2, 0.3, 0.4])
    similarity_weight: float = 1.0
    max_images: Optional[int] = None
    manual_params: Optional[str] = None


@dataclass
class MetricsSection:
    wavelet: str = "db4"
    wavelet_levels: int = 4
    orientation_bins: int = 16
    magnitude_percentile: float = 90.0
    contrast_sigmas: List[float] = field(default_factory=lambda: [1.0, 2.0, 4.0, 8.0])


@dataclass
class RunConfig:
    seed: int = 0
    train: TrainSection = field(default_factory=TrainSection)
    adapt: AdaptSection = field(default_factory=AdaptSection)
    diffusion: DiffusionSection = field(default_factory=DiffusionSection)
    sweep: SweepSection = field(default_factory=SweepSection)
    metrics: MetricsSection = field(default_factory=MetricsSection)

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


_SECTIONS = {
    "train": TrainSection,
    "adapt": AdaptSection,
    "diffusion": DiffusionSection,
    "sweep": SweepSection,
    "metrics": MetricsSection,
}


def _build_section(name: str, cls, values: Any):
    if not isinstance(values, dict):
        raise ConfigError(f"section '{name}' must be an object")
    known = {f.name for f in fields(cls)}
    unknown = set(values) - known
    if unknown:
        raise ConfigError(f"unknown keys in '{name}': {sorted(unknown)}")
    return cls(**values)


def parse_config(raw: Dict[str, Any]) -> RunConfig:
    """Build a RunConfig from a decoded JSON object."""
    if not isinstance(raw, dict):
        raise ConfigError("config root must be an object")
    unknown = set(raw) - set(_SECTIONS) - {"seed"}
    if unknown:
        raise ConfigError(f"unknown config sections: {sorted(unknown)}")
    kwargs: Dict[str, Any] = {}
    if "seed" in raw:
        kwargs["seed"] = int(raw["seed"])
    for name, cls in _SECTIONS.items():
        if name in raw:
            kwargs[name] = _build_section(name, cls, raw[name])
    return RunConfig(**kwargs)


def load_config(path: Optional[str]) -> RunConfig:
    """Load a JSON run configuration; None yields the defaults."""
    if path is None:
        return RunConfig()
    try:
        with open(path, "r", encoding="utf-8") as fh:
            raw = json.load(fh)
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"invalid JSON in {path}: {exc}") from exc
    return parse_config(raw)
