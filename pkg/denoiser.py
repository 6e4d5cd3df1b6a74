"""
DENOISER - Desk-scale text-conditioned noise predictor
======================================================
eps_theta(z_t, t, C): a small U-shaped network with FiLM conditioning from a
sinusoidal time embedding plus a caption embedding.

- Latent codec is the identity on pixels: z_0 = 2I - 1, I = (z + 1) / 2.
- forward_half(z_t, t, C) returns the activation after the bottleneck block
  (the mid-layer tap u_t consumed by the guidance regressor).
- HashTextEncoder turns captions into vectors with a hashed bag of words;
  the empty caption maps to a learned null embedding.

Training uses the standard noise-prediction objective with 10% of captions
replaced by the null embedding so classifier-free guidance has an
unconditional branch to extrapolate from.
"""

import hashlib
import logging
import math
import re
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Union

import torch
import torch.nn.functional as F
from torch import nn
from tqdm import tqdm

from affect_regressor import images_to_batch
from checkpoints import register_kind
from errors import ConfigError
from imaging import DatasetManifest, Image
from noise_schedule import NoiseSchedule, forward_diffuse

logger = logging.getLogger(__name__)

_TOKEN = re.compile(r"[a-z0-9]+")


class HashTextEncoder(nn.Module):
    """Hashed bag-of-words caption encoder with a learned null embedding."""

    def __init__(self, buckets: int = 512, dim: int = 32):
        super().__init__()
        self.buckets = buckets
        self.dim = dim
        self.bag = nn.EmbeddingBag(buckets, dim, mode="mean")
        self.null = nn.Parameter(torch.zeros(1, dim))

    def token_ids(self, caption: str) -> List[int]:
        return [int(hashlib.md5(tok.encode("utf-8")).hexdigest(), 16) % self.buckets
                for tok in _TOKEN.findall(caption.lower())]

    def forward(self, captions: Sequence[str]) -> torch.Tensor:
        rows = []
        for caption in captions:
            ids = self.token_ids(caption or "")
            if not ids:
                rows.append(self.null)
            else:
                rows.append(self.bag(torch.tensor([ids], dtype=torch.long)))
        return torch.cat(rows, dim=0)


def timestep_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float32) / half)
    args = t.to(torch.float32).view(-1, 1) * freqs.view(1, -1)
    return torch.cat([torch.sin(args), torch.cos(args)], dim=1)


class FiLMBlock(nn.Module):
    """conv -> GroupNorm -> FiLM(cond) -> SiLU -> conv, with a residual path."""

    def __init__(self, c_in: int, c_out: int, cond_dim: int):
        super().__init__()
        self.conv1 = nn.Conv2d(c_in, c_out, 3, padding=1)
        self.norm1 = nn.GroupNorm(8, c_out)
        self.film = nn.Linear(cond_dim, 2 * c_out)
        self.conv2 = nn.Conv2d(c_out, c_out, 3, padding=1)
        self.norm2 = nn.GroupNorm(8, c_out)
        self.skip = nn.Conv2d(c_in, c_out, 1) if c_in != c_out else nn.Identity()

    def forward(self, x: torch.Tensor, cond: torch.Tensor) -> torch.Tensor:
        h = self.norm1(self.conv1(x))
        scale, shift = self.film(cond).chunk(2, dim=1)
        h = F.silu(h * (1 + scale[:, :, None, None]) + shift[:, :, None, None])
        h = F.silu(self.norm2(self.conv2(h)))
        return h + self.skip(x)


@register_kind("denoiser")
class TinyDenoiser(nn.Module):
    def __init__(self, image_size: int = 32, channels: int = 3, base: int = 32,
                 text_dim: int = 32, text_buckets: int = 512, time_dim: int = 64,
                 train_steps: int = 1000):
        super().__init__()
        if image_size % 4:
            raise ConfigError("image_size must be divisible by 4")
        self.image_size = image_size
        self.channels = channels
        self.base = base
        self.text_dim = text_dim
        self.text_buckets = text_buckets
        self.time_dim = time_dim
        self.train_steps = train_steps

        self.text_encoder = HashTextEncoder(text_buckets, text_dim)
        self.time_mlp = nn.Sequential(nn.Linear(time_dim, time_dim), nn.SiLU(), nn.Linear(time_dim, time_dim))
        self.text_proj = nn.Linear(text_dim, time_dim)

        self.conv_in = nn.Conv2d(channels, base, 3, padding=1)
        self.down1 = FiLMBlock(base, base, time_dim)
        self.pool1 = nn.Conv2d(base, base, 3, stride=2, padding=1)
        self.down2 = FiLMBlock(base, 2 * base, time_dim)
        self.pool2 = nn.Conv2d(2 * base, 2 * base, 3, stride=2, padding=1)
        self.mid = FiLMBlock(2 * base, 2 * base, time_dim)
        self.up2 = FiLMBlock(4 * base, 2 * base, time_dim)
        self.up1 = FiLMBlock(3 * base, base, time_dim)
        self.conv_out = nn.Conv2d(base, channels, 3, padding=1)
        self.trained = False
        self.metrics: Dict = {}

    def architecture(self) -> Dict:
        return {"image_size": self.image_size, "channels": self.channels, "base": self.base,
                "text_dim": self.text_dim, "text_buckets": self.text_buckets,
                "time_dim": self.time_dim, "train_steps": self.train_steps}

    def mark_trained(self) -> None:
        self.trained = True

    @property
    def latent_shape(self):
        return (self.channels, self.image_size, self.image_size)

    def describe(self) -> str:
        return f"tiny_denoiser(size={self.image_size},base={self.base},T={self.train_steps})"

    # codec ---------------------------------------------------------------
    @staticmethod
    def encode(x: torch.Tensor) -> torch.Tensor:
        return 2.0 * x - 1.0

    @staticmethod
    def decode(z: torch.Tensor) -> torch.Tensor:
        return ((z + 1.0) / 2.0).clamp(0.0, 1.0)

    # conditioning --------------------------------------------------------
    def embed_text(self, captions: Sequence[str]) -> torch.Tensor:
        return self.text_encoder(captions)

    def null_embedding(self) -> torch.Tensor:
        return self.text_encoder.null

    def _cond(self, t: Union[int, torch.Tensor], text: torch.Tensor, n: int) -> torch.Tensor:
        t = torch.as_tensor(t, dtype=torch.long).reshape(-1)
        if t.numel() == 1:
            t = t.expand(n)
        if text.shape[0] == 1 and n > 1:
            text = text.expand(n, -1)
        temb = self.time_mlp(timestep_embedding(t, self.time_dim).to(text.dtype))
        return temb + self.text_proj(text)

    def _down(self, z: torch.Tensor, cond: torch.Tensor):
        h0 = self.down1(self.conv_in(z), cond)
        h1 = self.down2(self.pool1(h0), cond)
        mid = self.mid(self.pool2(h1), cond)
        return mid, (h0, h1)

    def forward_half(self, z: torch.Tensor, t: Union[int, torch.Tensor], text: torch.Tensor) -> torch.Tensor:
        """Mid-layer activation u_t = DM_half(z_t, t, text)."""
        return self._down(z, self._cond(t, text, z.shape[0]))[0]

    def forward(self, z: torch.Tensor, t: Union[int, torch.Tensor], text: torch.Tensor) -> torch.Tensor:
        cond = self._cond(t, text, z.shape[0])
        mid, (h0, h1) = self._down(z, cond)
        u = F.interpolate(mid, scale_factor=2, mode="nearest")
        u = self.up2(torch.cat([u, h1], dim=1), cond)
        u = F.interpolate(u, scale_factor=2, mode="nearest")
        u = self.up1(torch.cat([u, h0], dim=1), cond)
        return self.conv_out(u)


@dataclass
class DenoiserTrainConfig:
    epochs: int = 60
    batch_size: int = 32
    learning_rate: float = 2e-3
    seed: int = 0
    cond_dropout: float = 0.1
    image_size: int = 32
    base_channels: int = 32

    def __post_init__(self):
        if not 0.0 <= self.cond_dropout < 1.0:
            raise ConfigError("cond_dropout must be in [0, 1)")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be positive")


def _fixed_eval_loss(model: TinyDenoiser, z0: torch.Tensor, text: torch.Tensor,
                     schedule: NoiseSchedule, seed: int) -> float:
    gen = torch.Generator().manual_seed(seed)
    t = torch.randint(1, schedule.T + 1, (z0.shape[0],), generator=gen)
    noise = torch.randn(z0.shape, generator=gen)
    with torch.no_grad():
        return float(F.mse_loss(model(forward_diffuse(z0, t, schedule, noise), t, text), noise))


def train_tiny_denoiser(corpus: Union[DatasetManifest, Sequence[Image]], schedule: NoiseSchedule,
                        cfg: DenoiserTrainConfig, captions: Optional[Sequence[str]] = None,
                        verbose: bool = False) -> TinyDenoiser:
    """Fit eps_theta with min E||eps - eps_theta(z_t, t, C)||^2 on a small corpus."""
    if isinstance(corpus, DatasetManifest):
        images = corpus.load_images()
        if captions is None:
            captions = [e.caption or "" for e in corpus.entries]
    else:
        images = list(corpus)
    captions = list(captions) if captions is not None else [""] * len(images)
    if len(images) == 0 or len(captions) != len(images):
        raise ConfigError("need one caption per image and a non-empty corpus")

    torch.manual_seed(cfg.seed)
    model = TinyDenoiser(image_size=cfg.image_size, base=cfg.base_channels, train_steps=schedule.T)
    z0_all = model.encode(images_to_batch(images, cfg.image_size))
    n = z0_all.shape[0]
    opt = torch.optim.Adam(model.parameters(), lr=cfg.learning_rate)
    gen = torch.Generator().manual_seed(cfg.seed + 1)

    eval_idx = torch.arange(min(n, 64))
    eval_captions = [captions[i] for i in eval_idx.tolist()]
    initial = _fixed_eval_loss(model, z0_all[eval_idx], model.embed_text(eval_captions).detach(),
                               schedule, cfg.seed + 2)
    trace: List[float] = []
    epochs = range(cfg.epochs)
    if verbose:
        epochs = tqdm(epochs, desc="train denoiser")
    model.train()
    for epoch in epochs:
        perm = torch.randperm(n, generator=gen)
        total = 0.0
        for start in range(0, n, cfg.batch_size):
            idx = perm[start:start + cfg.batch_size]
            z0 = z0_all[idx]
            drop = torch.rand(idx.numel(), generator=gen) < cfg.cond_dropout
            batch_caps = ["" if d else captions[i] for i, d in zip(idx.tolist(), drop.tolist())]
            t = torch.randint(1, schedule.T + 1, (idx.numel(),), generator=gen)
            noise = torch.randn(z0.shape, generator=gen)
            pred = model(forward_diffuse(z0, t, schedule, noise), t, model.embed_text(batch_caps))
            loss = F.mse_loss(pred, noise)
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += float(loss) * idx.numel()
        trace.append(total / n)
        logger.info("denoiser epoch %d: loss=%.5f", epoch + 1, trace[-1])

    model.eval()
    model.mark_trained()
    final = _fixed_eval_loss(model, z0_all[eval_idx], model.embed_text(eval_captions).detach(),
                             schedule, cfg.seed + 2)
    model.metrics = {"loss_trace": trace, "initial_loss": initial, "final_loss": final, "n_images": n}
    logger.info("denoiser trained: eval loss %.4f -> %.4f", initial, final)
    return model
