"""
SYNTHETIC CORPUS - Shapes images with oracle affect labels
==========================================================
Desk-scale stand-in for licensed affective databases. Each image is a colored
circle or square on a colored background; labels come from direct pixel
statistics so every trained model can be checked against an exact oracle:

    valence = mean HSV value       (brightness)
    arousal = mean HSV saturation

Ratings are written on a 1-9 scale with a matching scale table, so the
corpus also exercises rating normalization.
"""

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Tuple, Union

import numpy as np
import torch
from torch import nn

from imaging import AffectiveSample, DatasetManifest, Image, ingest_manifest, save_image, write_manifest

logger = logging.getLogger(__name__)

DATASET_NAME = "shapes"
RATING_SCALE = (1.0, 9.0)
CLASSES = ("circle", "square")

_HUE_NAMES = ((0.0, "red"), (1 / 12, "orange"), (1 / 6, "yellow"), (1 / 3, "green"),
              (1 / 2, "cyan"), (2 / 3, "blue"), (5 / 6, "magenta"), (1.0, "red"))


def _hue_name(h: float, s: float, v: float) -> str:
    if v < 0.2:
        return "black"
    if s < 0.15:
        return "white" if v > 0.8 else "gray"
    return min(_HUE_NAMES, key=lambda hn: abs(hn[0] - h))[1]


def _hsv_to_rgb(h: float, s: float, v: float) -> np.ndarray:
    i = int(h * 6.0) % 6
    f = h * 6.0 - int(h * 6.0)
    p, q, t = v * (1 - s), v * (1 - s * f), v * (1 - s * (1 - f))
    return np.array([(v, t, p), (q, v, p), (p, v, t), (p, q, v), (t, p, v), (v, p, q)][i])


def oracle_labels(pixels: np.ndarray) -> Tuple[float, float]:
    """(mean HSV value, mean HSV saturation) of an H x W x 3 array."""
    mx = pixels.max(axis=2)
    mn = pixels.min(axis=2)
    sat = np.where(mx > 0, (mx - mn) / np.where(mx > 0, mx, 1.0), 0.0)
    return float(mx.mean()), float(sat.mean())


@dataclass(frozen=True)
class ShapeSample:
    image: Image
    caption: str
    label: int
    valence: float
    arousal: float


def make_shapes(n: int, size: int = 32, seed: int = 0) -> List[ShapeSample]:
    """Draw n random shape images; pixels are 8-bit quantized so labels survive PNG round trips."""
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) + 0.5
    samples = []
    for _ in range(n):
        label = int(rng.integers(0, len(CLASSES)))
        bg_hsv = (rng.random(), rng.uniform(0.0, 1.0), rng.uniform(0.15, 1.0))
        fg_hsv = (rng.random(), rng.uniform(0.0, 1.0), rng.uniform(0.15, 1.0))
        cx, cy = rng.uniform(0.3, 0.7, size=2) * size
        radius = rng.uniform(0.15, 0.3) * size
        if CLASSES[label] == "circle":
            mask = (xx - cx) ** 2 + (yy - cy) ** 2 <= radius ** 2
        else:
            mask = (np.abs(xx - cx) <= radius) & (np.abs(yy - cy) <= radius)
        pixels = np.empty((size, size, 3))
        pixels[:] = _hsv_to_rgb(*bg_hsv)
        pixels[mask] = _hsv_to_rgb(*fg_hsv)
        pixels = np.clip(pixels + rng.normal(0.0, 0.02, pixels.shape), 0.0, 1.0)
        pixels = np.round(pixels * 255.0) / 255.0
        valence, arousal = oracle_labels(pixels)
        caption = f"a {_hue_name(*fg_hsv)} {CLASSES[label]} on a {_hue_name(*bg_hsv)} background"
        samples.append(ShapeSample(Image(pixels), caption, label, valence, arousal))
    return samples


def write_shapes_corpus(out_dir: Union[str, Path], n: int, size: int = 32, seed: int = 0) -> Path:
    """Write PNGs, manifest.csv (1-9 ratings) and manifest_scales.csv; returns the manifest path."""
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    lo, hi = RATING_SCALE
    rows = []
    for i, s in enumerate(make_shapes(n, size, seed)):
        rel = Path("images") / f"shape_{i:05d}.png"
        save_image(s.image, out_dir / rel)
        rows.append(AffectiveSample(
            image_path=rel.as_posix(),
            valence=round(lo + (hi - lo) * s.valence, 10),
            arousal=round(lo + (hi - lo) * s.arousal, 10),
            source_dataset=DATASET_NAME,
            caption=s.caption,
        ))
    path = write_manifest(rows, out_dir / "manifest.csv", {DATASET_NAME: RATING_SCALE})
    logger.info("wrote %d synthetic shapes to %s", n, out_dir)
    return path


def load_shapes_manifest(out_dir: Union[str, Path], n: int, size: int = 32, seed: int = 0) -> DatasetManifest:
    """Write a corpus and ingest it (raw ratings)."""
    return ingest_manifest(write_shapes_corpus(out_dir, n, size, seed))


class OracleRegressor(nn.Module):
    """Differentiable exact labeler: (mean HSV value, mean HSV saturation).

    Drop-in for a trained PixelRegressor wherever the true label function is
    wanted (adapter sign checks, trend experiments).
    """

    checkpoint_kind = None

    def __init__(self, eps: float = 1e-6):
        super().__init__()
        self.eps = eps
        self.trained = True

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        mx = x.max(dim=1).values
        mn = x.min(dim=1).values
        sat = (mx - mn) / (mx + self.eps)
        return torch.stack([mx.mean(dim=(1, 2)), sat.mean(dim=(1, 2))], dim=1)

    def describe(self) -> str:
        return "oracle(value,saturation)"


def shape_images(n: int, size: int = 32, seed: int = 0) -> List[Image]:
    return [s.image for s in make_shapes(n, size, seed)]


def bright_image(size: int = 32, level: float = 0.9, seed: Optional[int] = None) -> Image:
    """Near-uniform over-bright gray image (used to check that adaptation darkens)."""
    rng = np.random.default_rng(seed)
    noise = rng.normal(0.0, 0.02, (size, size, 3)) if seed is not None else 0.0
    return Image(np.clip(np.full((size, size, 3), level) + noise, 0.0, 1.0))
