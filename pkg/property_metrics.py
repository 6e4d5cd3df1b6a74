"""
PROPERTY METRICS - Perceptual image statistics for adapted images
=================================================================
brightness               mean HSV value
saturation               mean HSV saturation
colorfulness             sqrt(var_rg + var_yb) + 0.3 * sqrt(mu_rg^2 + mu_yb^2)
contrast                 band-limited (Peli) contrast, mean RMS over bands
blur                     Crete re-blur score in [0, 1], higher = blurrier
edge_orientation_entropy entropy (bits) of strong-edge orientations
lowfreq_energy           coarse wavelet energy, Z-scored against a corpus
symmetry                 left half vs mirrored right half feature correlation

Every choice the literature leaves open (band sigmas, wavelet, levels, bins,
magnitude percentile, symmetry features) is a parameter and is stamped into
the report via MetricsSettings.describe().
"""

import logging
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Sequence, Tuple, Union

import numpy as np
import pandas as pd
import pywt
import torch
from scipy import ndimage
from skimage import color as skcolor
from skimage.filters import gabor_kernel
from skimage.transform import resize as sk_resize

from imaging import Image, to_rgb

logger = logging.getLogger(__name__)

CONTRAST_FLOOR = 1e-2
BLUR_WINDOW = 9
WAVELET_WORK_SIZE = 128


@dataclass
class MetricsSettings:
    wavelet: str = "db4"
    wavelet_levels: int = 4
    orientation_bins: int = 16
    magnitude_percentile: float = 90.0
    contrast_sigmas: List[float] = field(default_factory=lambda: [1.0, 2.0, 4.0, 8.0])

    @classmethod
    def from_section(cls, section) -> "MetricsSettings":
        return cls(**asdict(section))

    def describe(self) -> str:
        sig = ",".join(f"{s:g}" for s in self.contrast_sigmas)
        return (f"wavelet={self.wavelet}/{self.wavelet_levels} bins={self.orientation_bins} "
                f"pct={self.magnitude_percentile:g} sigmas={sig}")


DEFAULT_SETTINGS = MetricsSettings()


def _rgb(img: Image) -> np.ndarray:
    return to_rgb(img).pixels


def _luminance(img: Image) -> np.ndarray:
    return skcolor.rgb2gray(_rgb(img))


def _rgb_array(src: Union[Image, np.ndarray]) -> np.ndarray:
    return _rgb(src) if isinstance(src, Image) else np.asarray(src, dtype=np.float64)


# =========================================================================
# COLOR
# =========================================================================

def brightness(img: Image) -> float:
    return float(_rgb(img).max(axis=2).mean())


def saturation(img: Image) -> float:
    return float(skcolor.rgb2hsv(_rgb(img))[:, :, 1].mean())


def colorfulness(img: Image) -> float:
    px = _rgb(img)
    r, g, b = px[:, :, 0], px[:, :, 1], px[:, :, 2]
    rg = r - g
    yb = 0.5 * (r + g) - b
    spread = np.sqrt(rg.var() + yb.var())
    offset = np.sqrt(rg.mean() ** 2 + yb.mean() ** 2)
    return float(spread + 0.3 * offset)


# =========================================================================
# STRUCTURE
# =========================================================================

def contrast(img: Image, sigmas: Sequence[float] = DEFAULT_SETTINGS.contrast_sigmas) -> float:
    """Mean over bands of the RMS of bandpass / lowpass local contrast."""
    lum = _luminance(img)
    previous = lum
    rms = []
    for sigma in sigmas:
        low = ndimage.gaussian_filter(lum, sigma, mode="reflect")
        band = previous - low
        local = band / np.maximum(low, CONTRAST_FLOOR)
        rms.append(np.sqrt(np.mean(local ** 2)))
        previous = low
    return float(np.mean(rms))


def _blur_direction(lum: np.ndarray, axis: int) -> float:
    blurred = ndimage.uniform_filter1d(lum, BLUR_WINDOW, axis=axis, mode="reflect")
    d_img = np.abs(np.diff(lum, axis=axis))
    d_blur = np.abs(np.diff(blurred, axis=axis))
    variation = np.maximum(0.0, d_img - d_blur)
    total = d_img.sum()
    if total <= 0.0:
        return 1.0
    return float((total - variation.sum()) / total)


def blur(img: Image) -> float:
    """Crete no-reference blur: how little of the variation survives a strong re-blur."""
    lum = _luminance(img)
    score = max(_blur_direction(lum, 0), _blur_direction(lum, 1))
    return float(np.clip(score, 0.0, 1.0))


def orientation_histogram(img: Image, bins: int = DEFAULT_SETTINGS.orientation_bins,
                          percentile: float = DEFAULT_SETTINGS.magnitude_percentile) -> np.ndarray:
    """Counts of strong-edge orientations over [0, pi)."""
    lum = _luminance(img)
    gx = ndimage.sobel(lum, axis=1, mode="reflect")
    gy = ndimage.sobel(lum, axis=0, mode="reflect")
    mag = np.hypot(gx, gy)
    if not np.any(mag > 0):
        return np.zeros(bins)
    threshold = np.percentile(mag, percentile)
    mask = (mag >= threshold) & (mag > 0)
    theta = np.mod(np.arctan2(gy[mask], gx[mask]), np.pi)
    idx = np.minimum((theta / np.pi * bins).astype(int), bins - 1)
    return np.bincount(idx, minlength=bins).astype(np.float64)


def edge_orientation_entropy(img: Image, bins: int = DEFAULT_SETTINGS.orientation_bins,
                             percentile: float = DEFAULT_SETTINGS.magnitude_percentile) -> float:
    hist = orientation_histogram(img, bins, percentile)
    total = hist.sum()
    if total == 0:
        return 0.0
    p = hist[hist > 0] / total
    return float(max(0.0, -(p * np.log2(p)).sum()))


# =========================================================================
# WAVELET LOW-FREQUENCY ENERGY
# =========================================================================

def coarse_wavelet_energy(img: Image, wavelet: str = DEFAULT_SETTINGS.wavelet,
                          levels: int = DEFAULT_SETTINGS.wavelet_levels) -> float:
    """Raw energy of the two coarsest decomposition levels, averaged over R, G, B and gray.

    Channels are mean-removed and resampled to a fixed working size, so a
    constant image scores 0 and the value does not depend on resolution.
    """
    px = _rgb(img)
    planes = [px[:, :, c] for c in range(3)] + [skcolor.rgb2gray(px)]
    size = (WAVELET_WORK_SIZE, WAVELET_WORK_SIZE)
    energies = []
    for plane in planes:
        plane = sk_resize(plane, size, order=1, anti_aliasing=True, mode="reflect")
        plane = plane - plane.mean()
        coeffs = pywt.wavedec2(plane, wavelet, mode="periodization", level=levels)
        coarse = [coeffs[0]] + list(coeffs[1]) + (list(coeffs[2]) if len(coeffs) > 2 else [])
        energies.append(sum(float(np.sum(c ** 2)) for c in coarse) / plane.size)
    return float(np.mean(energies))


@dataclass
class CorpusStats:
    """Reference mean and std of the raw coarse energy over a corpus."""

    mean: float
    std: float
    n: int
    wavelet: str = DEFAULT_SETTINGS.wavelet
    levels: int = DEFAULT_SETTINGS.wavelet_levels

    def __post_init__(self):
        if not np.isfinite(self.mean) or not np.isfinite(self.std) or self.std <= 0:
            raise ValueError(f"degenerate corpus statistics (mean={self.mean}, std={self.std})")

    @classmethod
    def from_images(cls, images: Sequence[Image], wavelet: str = DEFAULT_SETTINGS.wavelet,
                    levels: int = DEFAULT_SETTINGS.wavelet_levels) -> "CorpusStats":
        raw = np.array([coarse_wavelet_energy(img, wavelet, levels) for img in images])
        if raw.size < 2:
            raise ValueError("corpus statistics need at least two images")
        stats = cls(float(raw.mean()), float(raw.std()), int(raw.size), wavelet, levels)
        logger.info(f"corpus wavelet energy over {stats.n} images: mean={stats.mean:.5f} std={stats.std:.5f}")
        return stats

    def zscore(self, raw: float) -> float:
        return (raw - self.mean) / self.std


def lowfreq_energy(img: Image, corpus_stats: CorpusStats) -> float:
    return float(corpus_stats.zscore(coarse_wavelet_energy(img, corpus_stats.wavelet, corpus_stats.levels)))


# =========================================================================
# SYMMETRY
# =========================================================================

class GaborBank:
    """Fixed Gabor magnitude responses on luminance (4 orientations x 2 frequencies)."""

    def __init__(self, frequencies: Sequence[float] = (0.15, 0.3), orientations: int = 4):
        self.frequencies = tuple(frequencies)
        self.orientations = orientations
        self.kernels = [gabor_kernel(f, theta=np.pi * k / orientations)
                        for f in self.frequencies for k in range(orientations)]

    def describe(self) -> str:
        return f"gabor(freqs={list(self.frequencies)},orient={self.orientations})"

    def __call__(self, src: Union[Image, np.ndarray]) -> np.ndarray:
        lum = skcolor.rgb2gray(_rgb_array(src))
        maps = []
        for k in self.kernels:
            re = ndimage.convolve(lum, np.real(k), mode="reflect")
            im = ndimage.convolve(lum, np.imag(k), mode="reflect")
            maps.append(np.hypot(re, im))
        return np.stack(maps)


class RegressorFeatureExtractor:
    """First two convolutional blocks of a trained pixel regressor."""

    def __init__(self, regressor):
        self.regressor = regressor

    def describe(self) -> str:
        return f"regressor_early({self.regressor.describe()})"

    def __call__(self, src: Union[Image, np.ndarray]) -> np.ndarray:
        dtype = next(self.regressor.parameters()).dtype
        x = torch.from_numpy(np.ascontiguousarray(_rgb_array(src))).permute(2, 0, 1).unsqueeze(0).to(dtype)
        with torch.no_grad():
            out = self.regressor.early_features(x)
        return out[0].to(torch.float64).numpy()


def _halves(img: Image) -> Tuple[np.ndarray, np.ndarray]:
    """Left half and mirrored right half as raw H x W//2 x 3 arrays (may be narrower than an Image allows)."""
    px = _rgb(img)
    half = px.shape[1] // 2
    left = np.ascontiguousarray(px[:, :half])
    right = np.ascontiguousarray(px[:, px.shape[1] - half:][:, ::-1])
    return left, right


def symmetry(img: Image, feature_extractor=None) -> float:
    """Normalized correlation of the left half and the mirrored right half, mapped to [0, 1]."""
    extractor = feature_extractor if feature_extractor is not None else GaborBank()
    left, right = _halves(img)
    a = np.asarray(extractor(left), dtype=np.float64).ravel()
    b = np.asarray(extractor(right), dtype=np.float64).ravel()
    a = a - a.mean()
    b = b - b.mean()
    denom = np.sqrt((a @ a) * (b @ b))
    if denom <= 1e-24:
        return 1.0 if np.allclose(a, b) else 0.5
    r = float(np.clip(a @ b / denom, -1.0, 1.0))
    return 0.5 * (r + 1.0)


# =========================================================================
# REPORTS
# =========================================================================

@dataclass
class PropertyReport:
    image_id: str
    brightness: float
    saturation: float
    colorfulness: float
    contrast: float
    blur: float
    edge_orientation_entropy: float
    lowfreq_energy: float
    symmetry: float

    def __post_init__(self):
        for name, value in self.values().items():
            if not np.isfinite(value):
                raise ValueError(f"{name} is not finite for {self.image_id}")

    def values(self) -> Dict[str, float]:
        d = asdict(self)
        d.pop("image_id")
        return d


METRIC_NAMES = [f for f in PropertyReport.__dataclass_fields__ if f != "image_id"]


def report(img: Image, corpus_stats: CorpusStats, extractor=None, image_id: str = "",
           settings: MetricsSettings = DEFAULT_SETTINGS) -> PropertyReport:
    return PropertyReport(
        image_id=image_id,
        brightness=brightness(img),
        saturation=saturation(img),
        colorfulness=colorfulness(img),
        contrast=contrast(img, settings.contrast_sigmas),
        blur=blur(img),
        edge_orientation_entropy=edge_orientation_entropy(img, settings.orientation_bins,
                                                          settings.magnitude_percentile),
        lowfreq_energy=lowfreq_energy(img, corpus_stats),
        symmetry=symmetry(img, extractor),
    )


def report_frame(reports: Sequence[PropertyReport]) -> pd.DataFrame:
    return pd.DataFrame([asdict(r) for r in reports], columns=["image_id"] + METRIC_NAMES)
