"""
CHECKPOINTS - Shared model container
====================================
All trained networks (pixel regressor, guidance regressor, semantic embedder,
disentangler, denoiser) are written as one torch.save dictionary:

    {
        "format": "affect-checkpoint/1",
        "kind": "pixel_regressor",
        "architecture": {...constructor kwargs...},
        "state_dict": {...},
        "seed": 0,
        "metrics": {...training history / validation scores...},
    }

load_checkpoint rebuilds the module from the architecture descriptor through
the registry below, keyed by kind.
"""

import logging
import pickle
from pathlib import Path
from typing import Any, Callable, Dict, Optional, Tuple, Type, Union

import torch
from torch import nn

from errors import ConfigError

logger = logging.getLogger(__name__)

FORMAT = "affect-checkpoint/1"

_REGISTRY: Dict[str, Type[nn.Module]] = {}


def register_kind(kind: str) -> Callable[[Type[nn.Module]], Type[nn.Module]]:
    """Class decorator: make a module loadable by kind."""

    def wrap(cls: Type[nn.Module]) -> Type[nn.Module]:
        _REGISTRY[kind] = cls
        cls.checkpoint_kind = kind
        return cls

    return wrap


def save_checkpoint(model: nn.Module, path: Union[str, Path], seed: Optional[int] = None,
                    metrics: Optional[Dict[str, Any]] = None) -> Path:
    kind = getattr(model, "checkpoint_kind", None)
    if kind is None or kind not in _REGISTRY:
        raise ConfigError(f"{type(model).__name__} is not a registered checkpoint kind")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "format": FORMAT,
        "kind": kind,
        "architecture": model.architecture(),
        "state_dict": model.state_dict(),
        "seed": seed,
        "metrics": metrics if metrics is not None else getattr(model, "metrics", {}),
    }
    torch.save(payload, path)
    logger.info("saved %s checkpoint to %s", kind, path)
    return path


def load_checkpoint(path: Union[str, Path], expected_kind: Optional[str] = None,
                    device: str = "cpu") -> Tuple[nn.Module, Dict[str, Any]]:
    """Rebuild a registered module; returns (model, container without weights)."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"checkpoint not found: {path}")
    try:
        payload = torch.load(path, map_location=device, weights_only=False)
    except (RuntimeError, EOFError, OSError, pickle.UnpicklingError) as exc:
        raise ConfigError(f"cannot read checkpoint {path}: {exc}") from exc
    if not isinstance(payload, dict) or payload.get("format") != FORMAT:
        raise ConfigError(f"{path} is not an {FORMAT} container")
    kind = payload["kind"]
    if expected_kind is not None and kind != expected_kind:
        raise ConfigError(f"{path} holds a '{kind}' model, expected '{expected_kind}'")
    if kind not in _REGISTRY:
        raise ConfigError(f"unknown checkpoint kind '{kind}'")
    model = _REGISTRY[kind](**payload["architecture"])
    model.load_state_dict(payload["state_dict"])
    model.metrics = dict(payload.get("metrics") or {})
    if hasattr(model, "mark_trained"):
        model.mark_trained()
    model.eval()
    meta = {k: v for k, v in payload.items() if k != "state_dict"}
    logger.info("loaded %s checkpoint from %s", kind, path)
    return model, meta
