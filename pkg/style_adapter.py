"""
STYLE ADAPTER - Content/style disentangler and latent style optimization
========================================================================
Disentangler:
    E_c: image -> spatial content code (instance-normalised, so global color
         statistics are stripped out of it)
    E_s: image -> global style vector s (S = 8)
    D:   (content, style) -> image; style enters through AdaIN parameters
         produced by an MLP and a final per-channel color affine.

Training (no discriminator): image reconstruction plus content and style
latent reconstruction after swapping styles inside a batch.

Style optimization with the content code c0 = E_c(I) held fixed:

    L(s) = w1 * mean|E_c(I) - E_c(D(c0, s))| + w2 * || [v', a'] - R(D(c0, s)) ||

starting from s0 = E_s(I), same first-order optimizer as the parametric
adapter. s is unconstrained; the sidecar records ||s - s0||.
"""

import logging
from dataclasses import dataclass
from typing import Dict, List, Sequence, Tuple, Union

import torch
import torch.nn.functional as F
from torch import nn
from tqdm import tqdm

from affect_regressor import images_to_batch, predict_emotion
from checkpoints import register_kind
from errors import ConfigError, CorpusTooSmallError, ModelNotTrainedError
from imaging import DatasetManifest, EmotionReference, Image, to_rgb
from parametric_adapter import (DEFAULT_ITERS, LEARNING_RATE, AdaptationResult, _module_dtype,
                                emotion_distance_tensor, minimize_projected)

logger = logging.getLogger(__name__)

MIN_CORPUS = 100
STYLE_DIM = 8

PRESETS: Dict[str, Tuple[float, float]] = {
    "behavioral_study": (1.0, 0.2),
    "bidirectional": (1.0, 0.2),
}


class AdaIN(nn.Module):
    """Instance norm whose affine parameters are set per sample."""

    def __init__(self, channels: int):
        super().__init__()
        self.channels = channels
        self.norm = nn.InstanceNorm2d(channels, affine=False)

    def forward(self, x: torch.Tensor, gamma: torch.Tensor, beta: torch.Tensor) -> torch.Tensor:
        return self.norm(x) * (1 + gamma[:, :, None, None]) + beta[:, :, None, None]


class AdaResBlock(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.conv1 = nn.Conv2d(channels, channels, 3, padding=1)
        self.ada1 = AdaIN(channels)
        self.conv2 = nn.Conv2d(channels, channels, 3, padding=1)
        self.ada2 = AdaIN(channels)

    def forward(self, x: torch.Tensor, params: torch.Tensor) -> torch.Tensor:
        g1, b1, g2, b2 = params.chunk(4, dim=1)
        h = F.relu(self.ada1(self.conv1(x), g1, b1))
        h = self.ada2(self.conv2(h), g2, b2)
        return x + h


@register_kind("disentangler")
class Disentangler(nn.Module):
    def __init__(self, image_size: int = 32, content_channels: int = 64, style_dim: int = STYLE_DIM,
                 width: int = 16, mlp_dim: int = 64):
        super().__init__()
        if image_size % 4:
            raise ConfigError("image_size must be divisible by 4")
        self.image_size = image_size
        self.content_channels = content_channels
        self.style_dim = style_dim
        self.width = width
        self.mlp_dim = mlp_dim

        self.content_encoder = nn.Sequential(
            nn.Conv2d(3, width, 5, padding=2), nn.InstanceNorm2d(width), nn.ReLU(),
            nn.Conv2d(width, 2 * width, 4, stride=2, padding=1), nn.InstanceNorm2d(2 * width), nn.ReLU(),
            nn.Conv2d(2 * width, content_channels, 4, stride=2, padding=1), nn.InstanceNorm2d(content_channels),
            nn.ReLU(),
        )
        self.style_encoder = nn.Sequential(
            nn.Conv2d(3, width, 5, padding=2), nn.ReLU(),
            nn.Conv2d(width, 2 * width, 4, stride=2, padding=1), nn.ReLU(),
            nn.Conv2d(2 * width, 2 * width, 4, stride=2, padding=1), nn.ReLU(),
            nn.AdaptiveAvgPool2d(1), nn.Flatten(),
            nn.Linear(2 * width, style_dim),
        )
        n_ada = 2 * 4 * content_channels
        self.mlp = nn.Sequential(
            nn.Linear(style_dim, mlp_dim), nn.ReLU(),
            nn.Linear(mlp_dim, mlp_dim), nn.ReLU(),
            nn.Linear(mlp_dim, n_ada + 6),
        )
        self.res1 = AdaResBlock(content_channels)
        self.res2 = AdaResBlock(content_channels)
        self.up = nn.Sequential(
            nn.Upsample(scale_factor=2, mode="nearest"),
            nn.Conv2d(content_channels, 2 * width, 5, padding=2), nn.ReLU(),
            nn.Upsample(scale_factor=2, mode="nearest"),
            nn.Conv2d(2 * width, width, 5, padding=2), nn.ReLU(),
            nn.Conv2d(width, 3, 7, padding=3),
        )
        self.trained = False
        self.metrics: Dict = {}

    def architecture(self) -> Dict:
        return {"image_size": self.image_size, "content_channels": self.content_channels,
                "style_dim": self.style_dim, "width": self.width, "mlp_dim": self.mlp_dim}

    def mark_trained(self) -> None:
        self.trained = True

    def _resize(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[-2:] == (self.image_size, self.image_size):
            return x
        return F.interpolate(x, size=(self.image_size, self.image_size), mode="bilinear", align_corners=False)

    def content(self, x: torch.Tensor) -> torch.Tensor:
        return self.content_encoder(self._resize(x))

    def style(self, x: torch.Tensor) -> torch.Tensor:
        return self.style_encoder(self._resize(x))

    def decode(self, c: torch.Tensor, s: torch.Tensor) -> torch.Tensor:
        params = self.mlp(s)
        n = 4 * self.content_channels
        h = self.res1(c, params[:, :n])
        h = self.res2(h, params[:, n:2 * n])
        logits = self.up(h)
        scale, shift = params[:, 2 * n:2 * n + 3], params[:, 2 * n + 3:]
        return torch.sigmoid(logits * (1 + scale[:, :, None, None]) + shift[:, :, None, None])

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.decode(self.content(x), self.style(x))


# =========================================================================
# TRAINING
# =========================================================================

@dataclass
class DisentanglerTrainConfig:
    epochs: int = 40
    batch_size: int = 32
    learning_rate: float = 1e-3
    seed: int = 0
    val_fraction: float = 0.1
    image_size: int = 32
    content_weight: float = 1.0
    style_weight: float = 1.0

    def __post_init__(self):
        if not 0.0 < self.val_fraction < 1.0:
            raise ConfigError("val_fraction must be in (0, 1)")


def psnr(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Per-sample PSNR in dB for tensors in [0, 1]."""
    mse = ((a - b) ** 2).flatten(1).mean(dim=1).clamp_min(1e-12)
    return 10.0 * torch.log10(1.0 / mse)


def _swap_losses(model: Disentangler, x: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    c = model.content(x)
    s = model.style(x)
    recon = model.decode(c, s)
    s_other = s.roll(1, dims=0)
    swapped = model.decode(c, s_other)
    c_back = model.content(swapped)
    s_back = model.style(swapped)
    return F.l1_loss(recon, x), F.l1_loss(c_back, c), F.l1_loss(s_back, s_other)


def train_disentangler(corpus: Union[DatasetManifest, Sequence[Image]], cfg: DisentanglerTrainConfig,
                       verbose: bool = False) -> Disentangler:
    """Fit E_c, E_s and D; reports held-out PSNR, content consistency and a style-swap FID."""
    from quality_scores import compute_fid
    from semantic_services import ThumbnailEmbedder

    images = corpus.load_images() if isinstance(corpus, DatasetManifest) else list(corpus)
    if len(images) < MIN_CORPUS:
        raise CorpusTooSmallError(f"disentangler needs at least {MIN_CORPUS} images, got {len(images)}")
    torch.manual_seed(cfg.seed)
    model = Disentangler(image_size=cfg.image_size)
    data = images_to_batch(images, cfg.image_size)
    n = data.shape[0]
    n_val = max(2, int(round(n * cfg.val_fraction)))
    perm = torch.randperm(n, generator=torch.Generator().manual_seed(cfg.seed))
    train_x, val_x = data[perm[n_val:]], data[perm[:n_val]]

    opt = torch.optim.Adam(model.parameters(), lr=cfg.learning_rate)
    gen = torch.Generator().manual_seed(cfg.seed + 1)
    trace: List[float] = []
    epochs = range(cfg.epochs)
    if verbose:
        epochs = tqdm(epochs, desc="train disentangler")
    model.train()
    for epoch in epochs:
        order = torch.randperm(train_x.shape[0], generator=gen)
        total = 0.0
        for start in range(0, train_x.shape[0], cfg.batch_size):
            x = train_x[order[start:start + cfg.batch_size]]
            if x.shape[0] < 2:
                continue
            rec, c_rec, s_rec = _swap_losses(model, x)
            loss = rec + cfg.content_weight * c_rec + cfg.style_weight * s_rec
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += float(loss) * x.shape[0]
        trace.append(total / train_x.shape[0])
        logger.info("disentangler epoch %d: loss=%.5f", epoch + 1, trace[-1])

    model.eval()
    model.mark_trained()
    with torch.no_grad():
        c = model.content(val_x)
        s = model.style(val_x)
        recon = model.decode(c, s)
        swapped = model.decode(c, s.roll(1, dims=0))
        consistency = (model.content(swapped) - c).abs().flatten(1).mean(dim=1)
    swap_images = [Image.from_tensor(swapped[i:i + 1].to(torch.float64)) for i in range(n_val)]
    val_images = [Image.from_tensor(val_x[i:i + 1].to(torch.float64)) for i in range(n_val)]
    model.metrics = {
        "loss_trace": trace,
        "val_psnr": float(psnr(recon, val_x).mean()),
        "content_consistency": float(consistency.mean()),
        "content_consistency_max": float(consistency.max()),
        "style_swap_fid": compute_fid(swap_images, val_images, ThumbnailEmbedder()),
        "style_swap_embedder": ThumbnailEmbedder().describe(),
        "n_train": int(n - n_val),
        "n_val": int(n_val),
    }
    logger.info("disentangler trained: PSNR %.2f dB, swap FID %.4f",
                model.metrics["val_psnr"], model.metrics["style_swap_fid"])
    return model


# =========================================================================
# CODES
# =========================================================================

def _require_trained(model: Disentangler) -> None:
    if not getattr(model, "trained", False):
        raise ModelNotTrainedError("disentangler has not been trained or loaded")


def _image_tensor(model: Disentangler, img: Image) -> torch.Tensor:
    return to_rgb(img).to_tensor(next(model.parameters()).dtype)


def encode_content(model: Disentangler, img: Image) -> torch.Tensor:
    _require_trained(model)
    with torch.no_grad():
        return model.content(_image_tensor(model, img))


def encode_style(model: Disentangler, img: Image) -> torch.Tensor:
    _require_trained(model)
    with torch.no_grad():
        return model.style(_image_tensor(model, img))


def decode(model: Disentangler, content: torch.Tensor, style: torch.Tensor) -> torch.Tensor:
    """D(c, s) as an N x 3 x H x W tensor; differentiable with respect to style."""
    _require_trained(model)
    return model.decode(content, style)


def reconstruct(model: Disentangler, img: Image) -> Image:
    """D(E_c(I), E_s(I)) at the original resolution."""
    x = decode(model, encode_content(model, img), encode_style(model, img)).detach()
    return _to_image(x, img)


def _to_image(x: torch.Tensor, like: Image) -> Image:
    if x.shape[-2:] != (like.height, like.width):
        x = F.interpolate(x, size=(like.height, like.width), mode="bilinear", align_corners=False)
    return Image.from_tensor(x.to(torch.float64))


# =========================================================================
# STYLE OPTIMIZATION
# =========================================================================

@dataclass
class StyleSolution:
    style: torch.Tensor
    style_init: torch.Tensor
    content: torch.Tensor

    @property
    def shift_norm(self) -> float:
        return float((self.style - self.style_init).norm())

    def to_dict(self) -> Dict:
        return {
            "style": self.style.detach().to(torch.float64).reshape(-1).tolist(),
            "style_init": self.style_init.detach().to(torch.float64).reshape(-1).tolist(),
            "style_shift_norm": self.shift_norm,
        }


class StyleObjective:
    """Callable L(s) with the content code held at c0."""

    def __init__(self, model: Disentangler, x: torch.Tensor, ref: EmotionReference, R, w1: float, w2: float):
        self.model = model
        self.ref = ref
        self.R = R
        self.w1 = w1
        self.w2 = w2
        with torch.no_grad():
            self.c0 = model.content(x)

    def decoded(self, s: torch.Tensor) -> torch.Tensor:
        return self.model.decode(self.c0, s)

    def __call__(self, s: torch.Tensor) -> torch.Tensor:
        y = self.decoded(s)
        loss = torch.zeros((), dtype=y.dtype)
        if self.w1 > 0:
            loss = loss + self.w1 * (self.c0 - self.model.content(y)).abs().mean()
        if self.w2 > 0:
            pred = self.R(y.to(_module_dtype(self.R, y.dtype)))
            loss = loss + self.w2 * emotion_distance_tensor(pred, self.ref).mean()
        return loss


def optimize_style(img: Image, ref: EmotionReference, R, model: Disentangler, w1: float, w2: float,
                   iters: int = DEFAULT_ITERS, seed: int = 0, lr: float = LEARNING_RATE) -> AdaptationResult:
    """Optimise the style vector from s0 = E_s(I) toward the emotional reference."""
    if w1 < 0 or w2 < 0:
        raise ConfigError(f"weights must be non-negative (w1={w1}, w2={w2})")
    if iters < 1:
        raise ConfigError("iters must be at least 1")
    _require_trained(model)
    torch.manual_seed(seed)
    img = to_rgb(img)
    x = _image_tensor(model, img)
    objective = StyleObjective(model, x, ref, R, w1, w2)
    with torch.no_grad():
        s0 = model.style(x)
    run = minimize_projected(objective, s0, iters=iters, lr=lr, label="style")
    with torch.no_grad():
        adapted = _to_image(objective.decoded(run.best), img)

    solution = StyleSolution(run.best, s0, objective.c0)
    return AdaptationResult(
        adapted=adapted,
        params_or_code=solution,
        loss_trace=run.trace,
        emotion_before=predict_emotion(R, img),
        emotion_after=predict_emotion(R, adapted),
        method="style",
        reference=ref,
        aborted=run.aborted,
        iterations=run.iterations,
        best_iteration=run.best_iteration,
        extra={"w1": w1, "w2": w2, "seed": seed, "style_shift_norm": solution.shift_norm},
    )
