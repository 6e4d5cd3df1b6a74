"""
PARAMETRIC ADAPTER - Emotion-guided optimization of global transform parameters
===============================================================================
Objective over the transform parameters p (projected onto the bounds box):

    L(p) = w1 * (1 - cos(E(I), E(T(I, p)))) + w2 * || [v', a'] - R(T(I, p)) ||

The similarity term is one minus cosine so that minimising keeps the
semantics of I. The emotion distance is Euclidean on (valence, arousal).

The optimizer starts at identity_params, takes Adam steps with betas
(0.9, 0.0) and lr 0.05, projects after every step and returns the best
iterate seen. It stops early when the best objective improves by less than
1e-6 over 20 iterations. A non-finite objective stops the run and the last
finite best iterate is returned with aborted=True.
"""

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Tuple, Union

import numpy as np
import torch

from affect_regressor import EmotionRating, predict_emotion
from diff_transforms import (DEFAULT_PARAM_BOUNDS, ParamBounds, TransformParams, apply_transforms,
                             apply_transforms_tensor, clamp_params, identity_params)
from errors import ConfigError
from imaging import EmotionReference, Image, save_image, to_rgb
from semantic_services import cosine_similarity_tensor

logger = logging.getLogger(__name__)

LEARNING_RATE = 0.05
BETAS = (0.9, 0.0)
DEFAULT_ITERS = 200
EARLY_STOP_TOL = 1e-6
EARLY_STOP_WINDOW = 20
DISTANCE_EPS = 1e-12

PRESETS: Dict[str, Tuple[float, float]] = {
    "behavioral_study": (1.0, 0.15),
    "bidirectional": (1.0, 0.2),
}


@dataclass
class AdaptationResult:
    adapted: Image
    params_or_code: Any
    loss_trace: List[float]
    emotion_before: Optional[EmotionRating]
    emotion_after: Optional[EmotionRating]
    method: str = "parametric"
    reference: EmotionReference = field(default_factory=EmotionReference)
    aborted: bool = False
    iterations: int = 0
    best_iteration: int = 0
    extra: Dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        if not all(np.isfinite(v) for v in self.loss_trace):
            raise ValueError("loss_trace must be finite")

    def reconstruction_error(self, original: Image) -> float:
        """Mean absolute pixel difference to the original."""
        a = to_rgb(original).pixels
        b = to_rgb(self.adapted).pixels
        if a.shape != b.shape:
            raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
        return float(np.abs(a - b).mean())

    def emotion_distance(self) -> Optional[float]:
        if self.emotion_after is None:
            return None
        return self.emotion_after.distance(self.reference.valence_ref, self.reference.arousal_ref)

    def to_sidecar(self) -> Dict[str, Any]:
        code = self.params_or_code
        if hasattr(code, "to_dict"):
            code = code.to_dict()
        elif isinstance(code, torch.Tensor):
            code = code.detach().to(torch.float64).reshape(-1).tolist()
        return {
            "method": self.method,
            "reference": [self.reference.valence_ref, self.reference.arousal_ref],
            "params": code,
            "loss_trace": [float(v) for v in self.loss_trace],
            "emotion_before": list(self.emotion_before.as_tuple()) if self.emotion_before else None,
            "emotion_after": list(self.emotion_after.as_tuple()) if self.emotion_after else None,
            "aborted": self.aborted,
            "iterations": self.iterations,
            "best_iteration": self.best_iteration,
            **self.extra,
        }


def write_adaptation(result: AdaptationResult, out_png: Union[str, Path]) -> Tuple[Path, Path]:
    """Write the adapted PNG and a JSON sidecar with the same stem."""
    out_png = Path(out_png)
    save_image(result.adapted, out_png)
    sidecar = out_png.with_suffix(".json")
    sidecar.write_text(json.dumps(result.to_sidecar(), indent=2), encoding="utf-8")
    return out_png, sidecar


# =========================================================================
# OPTIMIZER
# =========================================================================

@dataclass
class MinimizeResult:
    best: torch.Tensor
    trace: List[float]
    aborted: bool
    iterations: int
    best_iteration: int


def minimize_projected(objective: Callable[[torch.Tensor], torch.Tensor], x0: torch.Tensor,
                       project: Callable[[torch.Tensor], torch.Tensor] = lambda v: v,
                       iters: int = DEFAULT_ITERS, lr: float = LEARNING_RATE,
                       tol: float = EARLY_STOP_TOL, window: int = EARLY_STOP_WINDOW,
                       label: str = "adapt") -> MinimizeResult:
    """First-order projected minimisation returning the best iterate.

    trace[i] is the objective at the i-th iterate, evaluated before the step.
    """
    x = x0.detach().clone().requires_grad_(True)
    opt = torch.optim.Adam([x], lr=lr, betas=BETAS)
    trace: List[float] = []
    best_history: List[float] = []
    best_val, best_x, best_it = float("inf"), x0.detach().clone(), 0
    aborted = False
    for it in range(iters):
        loss = objective(x)
        value = float(loss)
        if not np.isfinite(value):
            aborted = True
            logger.warning("%s: non-finite objective at iteration %d, keeping last finite iterate", label, it)
            break
        trace.append(value)
        if value < best_val:
            best_val, best_x, best_it = value, x.detach().clone(), it
        best_history.append(best_val)
        logger.debug("%s iter %d: objective=%.6f", label, it, value)
        if len(best_history) > window and best_history[-1 - window] - best_val < tol:
            logger.info("%s: converged after %d iterations (objective %.6f)", label, it + 1, best_val)
            break
        # gradient for x only; shared model parameters are never written
        (grad,) = torch.autograd.grad(loss, x, allow_unused=True)
        x.grad = grad if grad is not None else torch.zeros_like(x)
        opt.step()
        with torch.no_grad():
            x.copy_(project(x))
    else:
        logger.info("%s: iteration budget spent (objective %.6f)", label, best_val)
    return MinimizeResult(best_x, trace, aborted, len(trace), best_it)


# =========================================================================
# OBJECTIVE
# =========================================================================

def _module_dtype(module, fallback: torch.dtype) -> torch.dtype:
    p = next(iter(module.parameters()), None) if module is not None and hasattr(module, "parameters") else None
    return p.dtype if p is not None else fallback


def emotion_distance_tensor(pred: torch.Tensor, ref: EmotionReference) -> torch.Tensor:
    """Euclidean distance of each row of an N x 2 prediction to (v', a')."""
    diff = ref.as_tensor(pred.dtype) - pred
    return torch.sqrt((diff ** 2).sum(dim=1) + DISTANCE_EPS)


class ParametricObjective:
    """Callable L(p) for a fixed image, reference, regressor and embedder."""

    def __init__(self, x: torch.Tensor, ref: EmotionReference, R, embedder, w1: float, w2: float):
        self.x = x
        self.ref = ref
        self.R = R
        self.embedder = embedder
        self.w1 = w1
        self.w2 = w2
        self.c_ref = None
        if w1 > 0:
            with torch.no_grad():
                self.c_ref = embedder.embed_tensor(x)

    def transformed(self, v: torch.Tensor) -> torch.Tensor:
        return apply_transforms_tensor(self.x, TransformParams(v.to(self.x.dtype)))

    def __call__(self, v: torch.Tensor) -> torch.Tensor:
        y = self.transformed(v)
        loss = torch.zeros((), dtype=y.dtype)
        if self.w1 > 0:
            c_hat = self.embedder.embed_tensor(y)
            loss = loss + self.w1 * (1.0 - cosine_similarity_tensor(self.c_ref, c_hat)).mean()
        if self.w2 > 0:
            pred = self.R(y.to(_module_dtype(self.R, y.dtype)))
            loss = loss + self.w2 * emotion_distance_tensor(pred, self.ref).mean()
        return loss


def _validate(w1: float, w2: float, iters: int) -> None:
    if w1 < 0 or w2 < 0:
        raise ConfigError(f"weights must be non-negative (w1={w1}, w2={w2})")
    if iters < 1:
        raise ConfigError("iters must be at least 1")


def optimize_params(img: Image, ref: EmotionReference, R, embedder, w1: float, w2: float,
                    iters: int = DEFAULT_ITERS, seed: int = 0, lr: float = LEARNING_RATE,
                    bounds: ParamBounds = DEFAULT_PARAM_BOUNDS,
                    dtype: torch.dtype = torch.float32) -> AdaptationResult:
    """Minimise L(p) from the identity parameters; returns the best projected iterate."""
    _validate(w1, w2, iters)
    if w1 > 0 and embedder is None:
        raise ConfigError("w1 > 0 requires a semantic embedder")
    torch.manual_seed(seed)
    img = to_rgb(img)
    x = img.to_tensor(dtype)
    objective = ParametricObjective(x, ref, R, embedder, w1, w2)
    box = bounds.to(dtype)
    run = minimize_projected(
        objective,
        identity_params(dtype).values,
        project=lambda v: clamp_params(TransformParams(v), box).values,
        iters=iters, lr=lr, label="parametric",
    )
    best = clamp_params(TransformParams(run.best.to(torch.float64)), bounds)
    adapted = apply_transforms(img, best, bounds)
    return AdaptationResult(
        adapted=adapted,
        params_or_code=best,
        loss_trace=run.trace,
        emotion_before=predict_emotion(R, img),
        emotion_after=predict_emotion(R, adapted),
        method="parametric",
        reference=ref,
        aborted=run.aborted,
        iterations=run.iterations,
        best_iteration=run.best_iteration,
        extra={"w1": w1, "w2": w2, "seed": seed},
    )


def manual_adapt(img: Image, params: TransformParams, R=None,
                 ref: EmotionReference = EmotionReference()) -> AdaptationResult:
    """Expert-parameter baseline: apply a fixed TransformParams without optimization."""
    img = to_rgb(img)
    adapted = apply_transforms(img, params)
    return AdaptationResult(
        adapted=adapted,
        params_or_code=params,
        loss_trace=[],
        emotion_before=predict_emotion(R, img) if R is not None else None,
        emotion_after=predict_emotion(R, adapted) if R is not None else None,
        method="manual",
        reference=ref,
    )
