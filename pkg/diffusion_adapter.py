"""
DIFFUSION ADAPTER - Inversion, null-text optimization and dual-conditioned resampling
=====================================================================================
Pipeline for one image:

  1. z_0 = E(I); DDIM-invert with the caption embedding C to get z*_T ... z*_0.
  2. Null-text optimization: for each sampling step (T -> 1) tune the
     unconditional embedding so the guided step lands on the inverted
     trajectory. Inner Adam loop, full precision.
  3. Resample from z*_T with the blended noise estimate

        eps = w * eps(z, t, C) + (1 - w) * eps(z, t, null_t) + s * grad_z D(z, t)
        D(z, t) = || ref - R_u(DM_half(z, t, null)) ||^2

     followed by the plain DDIM update. The DDIM coefficient on eps is
     negative, so the +s * grad D term moves the latent down the distance.
  4. Decode I_hat = D(z_0).

Inversion products are cached per (image, caption, denoiser, steps, NTO
settings) so re-runs with new (w, s) skip steps 1-2.
"""

import hashlib
import logging
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import torch
import torch.nn.functional as F
from cachetools import LRUCache

import settings
from affect_regressor import EmotionRating, GuidanceRegressor, predict_emotion, predict_emotion_mid
from errors import CaptionError, ConfigError, DivergenceError, ShapeMismatchError
from imaging import EmotionReference, Image, content_hash, to_rgb
from noise_schedule import (NoiseSchedule, ddim_inverse_step, ddim_step, ddim_timesteps,
                            forward_diffuse, make_schedule)
from parametric_adapter import AdaptationResult

logger = logging.getLogger(__name__)

__all__ = [
    "NoiseSchedule", "make_schedule", "forward_diffuse", "ddim_step", "ddim_timesteps",
    "LatentTrajectory", "NullTextEmbeddings", "GuidanceConfig", "InversionCache",
    "ddim_invert", "null_text_optimize", "guidance_score", "dual_conditioned_step",
    "resample", "adapt_image_diffusion", "adapt_image_cg_only", "sample_unconditional",
]

DEFAULT_DDIM_STEPS = 50
NTO_SCALE = 7.5
NTO_INNER_STEPS = 10
NTO_LEARNING_RATE = 1e-2
NTO_SKIP_BELOW = 1e-12


@dataclass
class LatentTrajectory:
    """Inverted latents ordered [z*_T, ..., z*_0] with their DDIM timesteps."""

    latents: List[torch.Tensor]
    timesteps: List[int]
    cond: torch.Tensor

    def __post_init__(self):
        if len(self.latents) != len(self.timesteps):
            raise ShapeMismatchError("one latent per timestep expected")

    @property
    def z_T(self) -> torch.Tensor:
        return self.latents[0]

    @property
    def z_0(self) -> torch.Tensor:
        return self.latents[-1]

    def __len__(self) -> int:
        return len(self.latents)


@dataclass
class NullTextEmbeddings:
    """One unconditional embedding per sampling step (T -> 1)."""

    embeddings: List[torch.Tensor]
    losses: List[List[float]] = field(default_factory=list)
    failed_steps: List[int] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.embeddings)


@dataclass(frozen=True)
class GuidanceConfig:
    cfg_scale: float = 2.0
    guidance_scale: float = 0.2
    reference: EmotionReference = field(default_factory=EmotionReference)

    def __post_init__(self):
        if self.cfg_scale < 0 or self.guidance_scale < 0:
            raise ConfigError("cfg_scale and guidance_scale must be non-negative")


def _check_latent(denoiser, z: torch.Tensor) -> None:
    if tuple(z.shape[1:]) != tuple(denoiser.latent_shape):
        raise ShapeMismatchError(f"latent {tuple(z.shape)} does not match denoiser {denoiser.latent_shape}")


def _check_schedule(denoiser, schedule: NoiseSchedule) -> None:
    if schedule.T != denoiser.train_steps:
        raise ShapeMismatchError(f"schedule T={schedule.T} but denoiser expects T={denoiser.train_steps}")


def _param_dtype(module) -> torch.dtype:
    p = next(iter(module.parameters()), None)
    return p.dtype if p is not None else torch.float32


def _full_precision(dtype: torch.dtype) -> torch.dtype:
    return torch.float32 if dtype in (torch.float16, torch.bfloat16) else dtype


# =========================================================================
# INVERSION
# =========================================================================

def ddim_invert(z0: torch.Tensor, C: torch.Tensor, schedule: NoiseSchedule, denoiser,
                steps: int = DEFAULT_DDIM_STEPS) -> LatentTrajectory:
    """Run the DDIM update backwards from z_0 to z_T, keeping every intermediate.

    The noise estimate for the move t -> t_next is eps(z_t, t_next, C).
    """
    _check_schedule(denoiser, schedule)
    _check_latent(denoiser, z0)
    ts = ddim_timesteps(schedule, steps)
    ascending = ts[::-1]
    z = z0.detach()
    latents = [z]
    with torch.no_grad():
        for t, t_next in zip(ascending[:-1], ascending[1:]):
            eps = denoiser(z, t_next, C)
            z = ddim_inverse_step(z, t, t_next, schedule, eps)
            if not torch.isfinite(z).all():
                raise DivergenceError(f"non-finite latent during inversion at t={t_next}")
            latents.append(z)
    return LatentTrajectory(latents[::-1], ts, C.detach())


def _cfg_eps(eps_c: torch.Tensor, eps_u: torch.Tensor, w: float) -> torch.Tensor:
    return w * eps_c + (1.0 - w) * eps_u


def null_text_optimize(traj: LatentTrajectory, C: torch.Tensor, denoiser, schedule: NoiseSchedule,
                       w: float = NTO_SCALE, inner_steps: int = NTO_INNER_STEPS,
                       lr: float = NTO_LEARNING_RATE, init: Optional[torch.Tensor] = None) -> NullTextEmbeddings:
    """Per-timestep minimisation of ||z*_{t-1} - z_{t-1}(z~_t, null_t, C)||^2.

    Each inner step is accepted only if it lowers the objective, otherwise the
    step is undone and the learning rate halved, so every recorded trace is
    nonincreasing. The warm start for step k is the result of step k - 1.
    """
    dtype = _full_precision(_param_dtype(denoiser))
    null = (init if init is not None else denoiser.null_embedding()).detach().to(dtype).clone()
    C = C.detach().to(dtype)
    z_cur = traj.z_T.detach().to(dtype)
    result = NullTextEmbeddings([])
    for k, (t, t_prev) in enumerate(zip(traj.timesteps[:-1], traj.timesteps[1:])):
        target = traj.latents[k + 1].detach().to(dtype)
        with torch.no_grad():
            eps_c = denoiser(z_cur, t, C)

        def objective(e: torch.Tensor) -> torch.Tensor:
            z_prev = ddim_step(z_cur, t, t_prev, schedule, _cfg_eps(eps_c, denoiser(z_cur, t, e), w))
            return F.mse_loss(z_prev, target, reduction="sum")

        null = null.detach().clone().requires_grad_(True)
        with torch.no_grad():
            current = float(objective(null))
        trace = [current]
        if current > NTO_SKIP_BELOW:
            opt = torch.optim.Adam([null], lr=lr)
            for _ in range(inner_steps):
                previous = null.detach().clone()
                (grad,) = torch.autograd.grad(objective(null), null)
                null.grad = grad
                opt.step()
                with torch.no_grad():
                    candidate = float(objective(null))
                    if candidate <= current:
                        current = candidate
                    else:
                        null.copy_(previous)
                        for group in opt.param_groups:
                            group["lr"] *= 0.5
                trace.append(current)
            if not trace[-1] < trace[0]:
                result.failed_steps.append(t)
                logger.warning("null-text step t=%d did not improve (objective %.3e)", t, trace[0])
        result.embeddings.append(null.detach().clone())
        result.losses.append(trace)
        with torch.no_grad():
            eps_u = denoiser(z_cur, t, null.detach())
            z_cur = ddim_step(z_cur, t, t_prev, schedule, _cfg_eps(eps_c, eps_u, w))
    return result


# =========================================================================
# GUIDANCE
# =========================================================================

def emotion_distance(g: GuidanceRegressor, denoiser, z_t: torch.Tensor, t: int,
                     ref: EmotionReference) -> torch.Tensor:
    """D(z_t, t) = ||ref - R_u(DM_half(z_t, t, null))||^2, summed over the batch."""
    u = denoiser.forward_half(z_t, t, denoiser.null_embedding().detach())
    pred = predict_emotion_mid(g, u)
    return ((ref.as_tensor(pred.dtype) - pred) ** 2).sum()


def guidance_score(g: GuidanceRegressor, denoiser, z_t: torch.Tensor, t: int,
                   ref: EmotionReference, scale: float = 1.0) -> torch.Tensor:
    """Latent-shaped gradient of scale * D with respect to z_t (first half of the denoiser only)."""
    _check_latent(denoiser, z_t)
    with torch.enable_grad():
        z = z_t.detach().requires_grad_(True)
        dist = scale * emotion_distance(g, denoiser, z, t, ref)
        (grad,) = torch.autograd.grad(dist, z)
    return grad


def dual_conditioned_step(z_t: torch.Tensor, t: int, t_prev: int, C: torch.Tensor, null_t: torch.Tensor,
                          cfg: GuidanceConfig, denoiser, g: Optional[GuidanceRegressor],
                          schedule: NoiseSchedule) -> torch.Tensor:
    """One resampling step with CFG blending and the emotion guidance term."""
    with torch.no_grad():
        eps_c = denoiser(z_t, t, C)
        eps_u = denoiser(z_t, t, null_t)
    eps = cfg.cfg_scale * eps_c + (1.0 - cfg.cfg_scale) * eps_u
    if cfg.guidance_scale != 0.0:
        if g is None:
            raise ConfigError("guidance_scale > 0 requires a guidance regressor")
        eps = eps + cfg.guidance_scale * guidance_score(g, denoiser, z_t, t, cfg.reference)
    return ddim_step(z_t, t, t_prev, schedule, eps.detach())


def resample(traj: LatentTrajectory, C: torch.Tensor, nulls: Sequence[torch.Tensor], cfg: GuidanceConfig,
             denoiser, g: Optional[GuidanceRegressor], schedule: NoiseSchedule,
             record_distance: bool = False) -> Tuple[torch.Tensor, List[float]]:
    """Run dual-conditioned steps from z*_T to z_0; optionally record D per step."""
    if len(nulls) != len(traj.timesteps) - 1:
        raise ShapeMismatchError(f"{len(nulls)} null embeddings for {len(traj.timesteps) - 1} steps")
    z = traj.z_T
    distances: List[float] = []
    for k, (t, t_prev) in enumerate(zip(traj.timesteps[:-1], traj.timesteps[1:])):
        if record_distance and g is not None:
            with torch.no_grad():
                distances.append(float(emotion_distance(g, denoiser, z, t, cfg.reference)))
        z = dual_conditioned_step(z, t, t_prev, C, nulls[k], cfg, denoiser, g, schedule)
        if not torch.isfinite(z).all():
            raise DivergenceError(f"non-finite latent during resampling at t={t}")
    return z, distances


def sample_unconditional(denoiser, schedule: NoiseSchedule, n: int, steps: int = DEFAULT_DDIM_STEPS,
                         seed: int = 0) -> List[Image]:
    """Deterministic DDIM samples from Gaussian noise with the null embedding."""
    gen = torch.Generator().manual_seed(seed)
    z = torch.randn((n, *denoiser.latent_shape), generator=gen)
    null = denoiser.null_embedding().detach()
    ts = ddim_timesteps(schedule, steps)
    with torch.no_grad():
        for t, t_prev in zip(ts[:-1], ts[1:]):
            z = ddim_step(z, t, t_prev, schedule, denoiser(z, t, null))
        x = denoiser.decode(z)
    return [Image.from_tensor(x[i:i + 1]) for i in range(n)]


# =========================================================================
# CACHE
# =========================================================================

class InversionCache:
    """Content-hash keyed store of trajectories and null-text embeddings.

    In-memory LRU in front of `<root>/<key>.pt`; writes are serialised.
    """

    def __init__(self, root: Optional[Union[str, Path]] = None, maxsize: int = 32):
        self.root = Path(root) if root is not None else settings.CACHE_DIR / "inversions"
        self._memory: LRUCache = LRUCache(maxsize=maxsize)
        self._lock = threading.Lock()
        self.hits = 0
        self.misses = 0

    @staticmethod
    def make_key(img: Image, caption: str, denoiser, steps: int, nto_scale: float,
                 inner_steps: int, lr: float, optimize_nulls: bool = True) -> str:
        h = hashlib.sha256()
        parts = [content_hash(img), caption, denoiser.describe(), str(steps), repr(nto_scale),
                 str(inner_steps), repr(lr), str(optimize_nulls)]
        weights = hashlib.sha256()
        for tensor in denoiser.state_dict().values():
            weights.update(tensor.detach().cpu().contiguous().numpy().tobytes())
        parts.append(weights.hexdigest())
        h.update("\x1f".join(parts).encode("utf-8"))
        return h.hexdigest()

    def get(self, key: str) -> Optional[Dict]:
        with self._lock:
            if key in self._memory:
                self.hits += 1
                return self._memory[key]
            path = self.root / f"{key}.pt"
            if path.is_file():
                payload = torch.load(path, weights_only=False)
                self._memory[key] = payload
                self.hits += 1
                logger.info("inversion cache hit (disk) %s", key[:12])
                return payload
            self.misses += 1
            return None

    def put(self, key: str, payload: Dict) -> None:
        with self._lock:
            self.root.mkdir(parents=True, exist_ok=True)
            tmp = self.root / f"{key}.pt.tmp"
            torch.save(payload, tmp)
            tmp.replace(self.root / f"{key}.pt")
            self._memory[key] = payload


# =========================================================================
# END-TO-END
# =========================================================================

def _invert_and_optimize(img: Image, C: torch.Tensor, caption: str, denoiser, schedule: NoiseSchedule,
                         steps: int, nto_scale: float, inner_steps: int, lr: float,
                         optimize_nulls: bool, cache: Optional[InversionCache]):
    key = InversionCache.make_key(img, caption, denoiser, steps, nto_scale, inner_steps, lr, optimize_nulls)
    if cache is not None:
        cached = cache.get(key)
        if cached is not None:
            traj = LatentTrajectory(cached["latents"], cached["timesteps"], cached["cond"])
            nulls = NullTextEmbeddings(cached["nulls"], cached["nto_losses"], cached["nto_failed"])
            return traj, nulls, key, True

    x = to_rgb(img).to_tensor(_param_dtype(denoiser))
    if x.shape[-2:] != (denoiser.image_size, denoiser.image_size):
        x = F.interpolate(x, size=(denoiser.image_size, denoiser.image_size), mode="bilinear", align_corners=False)
    z0 = denoiser.encode(x)
    traj = ddim_invert(z0, C, schedule, denoiser, steps)
    if optimize_nulls:
        nulls = null_text_optimize(traj, C, denoiser, schedule, w=nto_scale, inner_steps=inner_steps, lr=lr)
    else:
        fixed = denoiser.null_embedding().detach()
        nulls = NullTextEmbeddings([fixed] * (len(traj) - 1))
    if cache is not None:
        cache.put(key, {"latents": traj.latents, "timesteps": traj.timesteps, "cond": traj.cond,
                        "nulls": nulls.embeddings, "nto_losses": nulls.losses, "nto_failed": nulls.failed_steps})
    return traj, nulls, key, False


def adapt_image_diffusion(img: Image, caption: Optional[str], ref: EmotionReference, cfg: GuidanceConfig,
                          denoiser, g: Optional[GuidanceRegressor], schedule: NoiseSchedule,
                          regressor=None, steps: int = DEFAULT_DDIM_STEPS, nto_scale: Optional[float] = None,
                          inner_steps: int = NTO_INNER_STEPS, nto_lr: float = NTO_LEARNING_RATE,
                          cache: Optional[InversionCache] = None, use_text: bool = True,
                          optimize_nulls: bool = True, seed: int = 0) -> AdaptationResult:
    """Invert, null-text optimize, then resample toward `ref` with CFG + emotion guidance.

    nto_scale=None tunes the null embeddings for the resampling scale cfg.cfg_scale.
    `regressor` (pixel space) supplies the before/after emotion readings.
    """
    if use_text and not caption:
        raise CaptionError("text-conditioned diffusion adaptation needs a caption")
    if cfg.reference != ref:
        cfg = GuidanceConfig(cfg.cfg_scale, cfg.guidance_scale, ref)
    _check_schedule(denoiser, schedule)
    img = to_rgb(img)
    caption_text = caption if use_text else ""
    nto_scale = cfg.cfg_scale if nto_scale is None else nto_scale
    with torch.no_grad():
        C = denoiser.embed_text([caption_text]).detach() if use_text else denoiser.null_embedding().detach()

    traj, nulls, key, hit = _invert_and_optimize(img, C, caption_text, denoiser, schedule, steps,
                                                 nto_scale, inner_steps, nto_lr, optimize_nulls, cache)
    z0_hat, distances = resample(traj, C, nulls.embeddings, cfg, denoiser, g, schedule, record_distance=True)
    with torch.no_grad():
        x_hat = denoiser.decode(z0_hat)
    if x_hat.shape[-2:] != (img.height, img.width):
        x_hat = F.interpolate(x_hat, size=(img.height, img.width), mode="bilinear", align_corners=False)
    adapted = Image.from_tensor(x_hat.to(torch.float64))

    before: Optional[EmotionRating] = predict_emotion(regressor, img) if regressor is not None else None
    after: Optional[EmotionRating] = predict_emotion(regressor, adapted) if regressor is not None else None
    info = {
        "cfg_scale": cfg.cfg_scale,
        "guidance_scale": cfg.guidance_scale,
        "nto_scale": nto_scale if optimize_nulls else None,
        "ddim_steps": steps,
        "train_steps": schedule.T,
        "seed": seed,
        "cache_key": key,
        "cache_hit": hit,
        "text_conditioned": use_text,
        "nto_failed_steps": list(nulls.failed_steps),
    }
    logger.info("diffusion adaptation done (w=%.2f, s=%.2f, cache %s)",
                cfg.cfg_scale, cfg.guidance_scale, "hit" if hit else "miss")
    return AdaptationResult(adapted=adapted, params_or_code=info, loss_trace=distances,
                            emotion_before=before, emotion_after=after, method="diffusion", reference=ref)


def adapt_image_cg_only(img: Image, ref: EmotionReference, guidance_scale: float, denoiser,
                        g: GuidanceRegressor, schedule: NoiseSchedule, regressor=None,
                        steps: int = DEFAULT_DDIM_STEPS, cache: Optional[InversionCache] = None,
                        seed: int = 0) -> AdaptationResult:
    """Ablation: null-embedding DDIM inversion, no null-text tuning, classifier guidance only (w = 0)."""
    cfg = GuidanceConfig(cfg_scale=0.0, guidance_scale=guidance_scale, reference=ref)
    result = adapt_image_diffusion(img, None, ref, cfg, denoiser, g, schedule, regressor=regressor,
                                   steps=steps, cache=cache, use_text=False, optimize_nulls=False, seed=seed)
    result.method = "cg_only"
    return result
