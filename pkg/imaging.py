"""
IMAGING - Image representation, I/O, color spaces and affective manifests
=========================================================================
Images are stored as float64 H x W x C arrays in [0, 1]. Quantization to 8 bit
only happens when an image is written to disk.

Affective datasets are described by a CSV manifest

    path,valence,arousal,dataset,caption

plus a sidecar scale table ``dataset,min,max`` holding the published rating
bounds of each source database. Ratings stay raw on ingest and are mapped onto
[0, 1] by normalize_ratings().
"""

import hashlib
import logging
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
import torch
import torch.nn.functional as F
from PIL import Image as PILImage, UnidentifiedImageError
from skimage import color as skcolor

from errors import ImageLoadError, ManifestError

logger = logging.getLogger(__name__)

MIN_SIDE = 8
MANIFEST_COLUMNS = ("path", "valence", "arousal", "dataset")
SCALE_COLUMNS = ("dataset", "min", "max")

PathLike = Union[str, Path]


class ColorSpace(str, Enum):
    RGB = "RGB"
    HSV = "HSV"
    GRAY = "GRAY"


@dataclass(frozen=True)
class Image:
    """H x W x C pixels in [0, 1] tagged with their color space."""

    pixels: np.ndarray
    color_space: ColorSpace = ColorSpace.RGB

    def __post_init__(self):
        px = np.array(self.pixels, dtype=np.float64, copy=True)
        if px.ndim == 2:
            px = px[:, :, None]
        if px.ndim != 3 or px.shape[2] not in (1, 3):
            raise ImageLoadError(f"unsupported image shape {px.shape}")
        if px.shape[0] < MIN_SIDE or px.shape[1] < MIN_SIDE:
            raise ImageLoadError(f"image {px.shape[0]}x{px.shape[1]} smaller than {MIN_SIDE}x{MIN_SIDE}")
        if not np.all(np.isfinite(px)):
            raise ImageLoadError("image contains non-finite values")
        if px.min() < 0.0 or px.max() > 1.0:
            raise ImageLoadError(f"pixel values outside [0, 1]: [{px.min():.4f}, {px.max():.4f}]")
        if (px.shape[2] == 1) != (self.color_space == ColorSpace.GRAY):
            raise ImageLoadError(f"{px.shape[2]} channel(s) inconsistent with {self.color_space.value}")
        px.setflags(write=False)
        object.__setattr__(self, "pixels", px)

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def channels(self) -> int:
        return self.pixels.shape[2]

    def to_tensor(self, dtype: torch.dtype = torch.float32) -> torch.Tensor:
        """1 x C x H x W tensor (RGB expected by the networks)."""
        return torch.from_numpy(np.ascontiguousarray(self.pixels.transpose(2, 0, 1))).to(dtype).unsqueeze(0)

    @classmethod
    def from_tensor(cls, tensor: torch.Tensor, color_space: ColorSpace = ColorSpace.RGB) -> "Image":
        """Build an Image from a (1 x) C x H x W tensor, clipping float noise."""
        t = tensor.detach().to("cpu", torch.float64)
        if t.dim() == 4:
            if t.shape[0] != 1:
                raise ImageLoadError(f"expected a single image, got batch of {t.shape[0]}")
            t = t[0]
        px = t.permute(1, 2, 0).numpy()
        return cls(np.clip(px, 0.0, 1.0), color_space)


def to_rgb(img: Image) -> Image:
    """Return an RGB view of any image."""
    if img.color_space == ColorSpace.RGB:
        return img
    return convert_color(img, ColorSpace.RGB)


def load_image(path: PathLike) -> Image:
    """Decode a PNG/JPEG raster into an RGB (or GRAY) Image scaled to [0, 1]."""
    path = Path(path)
    if not path.is_file():
        raise ImageLoadError(f"image not found: {path}")
    try:
        with PILImage.open(path) as pil:
            pil.load()
            mode = pil.mode
            if mode == "P":
                pil = pil.convert("RGB")
                mode = "RGB"
            arr = np.asarray(pil)
    except (UnidentifiedImageError, OSError) as exc:
        raise ImageLoadError(f"cannot decode {path}: {exc}") from exc

    if mode in ("1", "L"):
        px = arr.astype(np.float64) / (1.0 if mode == "1" else 255.0)
        return Image(px, ColorSpace.GRAY)
    if mode in ("I;16", "I;16B", "I;16L", "I"):
        px = np.clip(arr.astype(np.float64) / 65535.0, 0.0, 1.0)
        return Image(px, ColorSpace.GRAY)
    if mode == "RGB":
        return Image(arr.astype(np.float64) / 255.0, ColorSpace.RGB)
    raise ImageLoadError(f"unsupported raster mode '{mode}' ({len(pil.getbands())} channels) in {path}")


def save_image(img: Image, path: PathLike) -> Path:
    """Write an 8-bit PNG."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    rgb_or_gray = img if img.color_space != ColorSpace.HSV else to_rgb(img)
    q = np.round(rgb_or_gray.pixels * 255.0).astype(np.uint8)
    if q.shape[2] == 1:
        PILImage.fromarray(q[:, :, 0]).save(path, format="PNG")
    else:
        PILImage.fromarray(q).save(path, format="PNG")
    return path


def convert_color(img: Image, target: ColorSpace) -> Image:
    """Standard RGB <-> HSV <-> GRAY conversion (hue scaled to [0, 1])."""
    target = ColorSpace(target)
    if target == img.color_space:
        raise ValueError(f"image is already {target.value}")

    if img.color_space == ColorSpace.HSV:
        rgb = skcolor.hsv2rgb(img.pixels)
    elif img.color_space == ColorSpace.GRAY:
        rgb = np.repeat(img.pixels, 3, axis=2)
    else:
        rgb = img.pixels

    if target == ColorSpace.RGB:
        out = rgb
    elif target == ColorSpace.HSV:
        out = skcolor.rgb2hsv(rgb)
    else:
        out = skcolor.rgb2gray(rgb)[:, :, None]
    return Image(np.clip(out, 0.0, 1.0), target)


def resize_image(img: Image, size: Tuple[int, int]) -> Image:
    """Bilinear resize to (height, width)."""
    t = img.to_tensor(torch.float64)
    out = F.interpolate(t, size=size, mode="bilinear", align_corners=False)
    return Image.from_tensor(out, img.color_space)


def content_hash(img: Image) -> str:
    """SHA-256 over the 8-bit quantized pixels and their shape."""
    q = np.round(img.pixels * 255.0).astype(np.uint8)
    h = hashlib.sha256()
    h.update(str(q.shape).encode("ascii"))
    h.update(q.tobytes())
    return h.hexdigest()


# =========================================================================
# AFFECTIVE MANIFESTS
# =========================================================================

@dataclass(frozen=True)
class EmotionReference:
    """Target point (v', a') of an adaptation. Default is neutral valence, minimal arousal."""

    valence_ref: float = 0.5
    arousal_ref: float = 0.0

    def __post_init__(self):
        for name in ("valence_ref", "arousal_ref"):
            v = float(getattr(self, name))
            if not np.isfinite(v) or v < -1.0 or v > 1.0:
                raise ValueError(f"{name}={v} outside [-1, 1]")
            object.__setattr__(self, name, v)

    def as_tensor(self, dtype: torch.dtype = torch.float32) -> torch.Tensor:
        return torch.tensor([self.valence_ref, self.arousal_ref], dtype=dtype)

    @classmethod
    def parse(cls, text: str) -> "EmotionReference":
        """Parse 'v,a' as written on the command line."""
        parts = [p.strip() for p in str(text).split(",")]
        if len(parts) != 2:
            raise ValueError(f"reference must be 'valence,arousal', got '{text}'")
        return cls(float(parts[0]), float(parts[1]))


@dataclass(frozen=True)
class AffectiveSample:
    image_path: str
    valence: float
    arousal: float
    source_dataset: str
    caption: Optional[str] = None


@dataclass(frozen=True)
class DatasetManifest:
    """Immutable list of affective samples plus per-source rating scales."""

    entries: Tuple[AffectiveSample, ...]
    scale_metadata: Dict[str, Tuple[float, float]]
    scale_origin: Dict[str, str] = field(default_factory=dict)
    normalized: bool = False

    def __post_init__(self):
        object.__setattr__(self, "entries", tuple(self.entries))
        paths = [e.image_path for e in self.entries]
        if len(paths) != len(set(paths)):
            raise ManifestError("duplicate image_path entries")
        missing = {e.source_dataset for e in self.entries} - set(self.scale_metadata)
        if missing:
            raise ManifestError(f"no rating scale for datasets {sorted(missing)}")

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def datasets(self) -> List[str]:
        return sorted({e.source_dataset for e in self.entries})

    def labels(self) -> np.ndarray:
        """N x 2 array of (valence, arousal)."""
        return np.array([[e.valence, e.arousal] for e in self.entries], dtype=np.float64).reshape(-1, 2)

    def subset(self, indices: Iterable[int]) -> "DatasetManifest":
        chosen = [self.entries[i] for i in indices]
        used = {e.source_dataset for e in chosen}
        return replace(
            self,
            entries=tuple(chosen),
            scale_metadata={k: v for k, v in self.scale_metadata.items() if k in used},
            scale_origin={k: v for k, v in self.scale_origin.items() if k in used},
        )

    def load_images(self) -> List[Image]:
        return [to_rgb(load_image(e.image_path)) for e in self.entries]


def _read_scale_table(path: Path) -> Dict[str, Tuple[float, float]]:
    try:
        df = pd.read_csv(path, dtype=str, keep_default_na=False)
    except (OSError, pd.errors.ParserError, pd.errors.EmptyDataError) as exc:
        raise ManifestError(f"cannot read scale table {path}: {exc}") from exc
    missing_cols = [c for c in SCALE_COLUMNS if c not in df.columns]
    if missing_cols:
        raise ManifestError(f"scale table {path} missing columns {missing_cols}")
    scales: Dict[str, Tuple[float, float]] = {}
    for idx, row in df.iterrows():
        line = int(idx) + 2
        try:
            lo, hi = float(row["min"]), float(row["max"])
        except ValueError as exc:
            raise ManifestError(f"non-numeric scale bounds in {path.name}", line) from exc
        scales[row["dataset"].strip()] = (lo, hi)
    return scales


def _default_scale_path(manifest_path: Path) -> Optional[Path]:
    for candidate in (manifest_path.with_name(manifest_path.stem + "_scales.csv"),
                      manifest_path.with_name("scales.csv")):
        if candidate.is_file():
            return candidate
    return None


def ingest_manifest(path: PathLike, scale_path: Optional[PathLike] = None) -> DatasetManifest:
    """Parse a manifest CSV and its scale table; ratings are kept raw.

    With a scale table, every manifest dataset must be listed in it; rows for
    datasets the manifest does not use are ignored with a warning. Without
    any scale table the empirical (min, max) per dataset is used and flagged
    'empirical' in scale_origin.
    """
    path = Path(path)
    try:
        df = pd.read_csv(path, dtype=str, keep_default_na=False, encoding="utf-8")
    except (OSError, pd.errors.ParserError, pd.errors.EmptyDataError) as exc:
        raise ManifestError(f"cannot read manifest {path}: {exc}") from exc
    missing_cols = [c for c in MANIFEST_COLUMNS if c not in df.columns]
    if missing_cols:
        raise ManifestError(f"manifest {path} missing columns {missing_cols}")

    entries: List[AffectiveSample] = []
    seen = set()
    for idx, row in df.iterrows():
        line = int(idx) + 2
        try:
            valence = float(row["valence"])
            arousal = float(row["arousal"])
        except ValueError as exc:
            raise ManifestError("valence/arousal must be numeric", line) from exc
        if not (np.isfinite(valence) and np.isfinite(arousal)):
            raise ManifestError("non-finite rating", line)
        dataset = row["dataset"].strip()
        if not dataset:
            raise ManifestError("empty dataset name", line)
        image_path = Path(row["path"].strip())
        if not image_path.is_absolute():
            image_path = path.parent / image_path
        if not image_path.is_file():
            raise ManifestError(f"image not found: {image_path}", line)
        key = str(image_path)
        if key in seen:
            raise ManifestError(f"duplicate path {key}", line)
        seen.add(key)
        caption = row["caption"].strip() if "caption" in df.columns else ""
        entries.append(AffectiveSample(key, valence, arousal, dataset, caption or None))

    scale_path = Path(scale_path) if scale_path is not None else _default_scale_path(path)
    published = _read_scale_table(scale_path) if scale_path is not None else {}
    present = {e.source_dataset for e in entries}
    if scale_path is not None:
        unknown = present - set(published)
        if unknown:
            raise ManifestError(f"unknown dataset(s) {sorted(unknown)}: no published scale in {scale_path.name}")
        extra = set(published) - present
        if extra:
            logger.warning(f"Scale table {scale_path.name} lists unused dataset(s) {sorted(extra)}; ignored")
            published = {ds: published[ds] for ds in present}

    scales: Dict[str, Tuple[float, float]] = dict(published)
    origin = {ds: "published" for ds in published}
    for ds in sorted(present - set(published)):
        ratings = [r for e in entries if e.source_dataset == ds for r in (e.valence, e.arousal)]
        scales[ds] = (min(ratings), max(ratings))
        origin[ds] = "empirical"
        logger.warning(f"No published scale for '{ds}', using empirical range {scales[ds]}")

    logger.info(f"Ingested {len(entries)} samples from {len(present)} dataset(s) ({path.name})")
    return DatasetManifest(tuple(entries), scales, origin, normalized=False)


def normalize_ratings(m: DatasetManifest) -> DatasetManifest:
    """Affinely map each rating through its source scale onto [0, 1]."""
    for ds in m.datasets:
        lo, hi = m.scale_metadata[ds]
        if not hi > lo:
            raise ManifestError(f"degenerate rating scale for '{ds}': min={lo}, max={hi}")

    def _norm(r: float, ds: str) -> float:
        lo, hi = m.scale_metadata[ds]
        return float(np.clip((r - lo) / (hi - lo), 0.0, 1.0))

    entries = tuple(
        replace(e, valence=_norm(e.valence, e.source_dataset), arousal=_norm(e.arousal, e.source_dataset))
        for e in m.entries
    )
    return DatasetManifest(
        entries,
        {ds: (0.0, 1.0) for ds in m.scale_metadata},
        dict(m.scale_origin),
        normalized=True,
    )


def write_manifest(samples: Sequence[AffectiveSample], path: PathLike,
                   scales: Optional[Dict[str, Tuple[float, float]]] = None) -> Path:
    """Write a manifest CSV (and a '<stem>_scales.csv' sidecar when scales are given)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    df = pd.DataFrame(
        [{"path": s.image_path, "valence": s.valence, "arousal": s.arousal,
          "dataset": s.source_dataset, "caption": s.caption or ""} for s in samples],
        columns=["path", "valence", "arousal", "dataset", "caption"],
    )
    df.to_csv(path, index=False, encoding="utf-8")
    if scales:
        pd.DataFrame(
            [{"dataset": k, "min": v[0], "max": v[1]} for k, v in sorted(scales.items())],
            columns=list(SCALE_COLUMNS),
        ).to_csv(path.with_name(path.stem + "_scales.csv"), index=False)
    return path
