"""
SEMANTIC SERVICES - Image embedders and caption providers
=========================================================
Embedders map images to vectors used for the semantic-similarity term of the
adapters and for FID/KID:

- AutoencoderEmbedder:     encoder half of a small autoencoder trained on the
                           experiment corpus. Differentiable w.r.t. pixels.
- ThumbnailEmbedder:       pooled color thumbnail + channel spread. No training.
- RegressorFeatureEmbedder: penultimate features of a trained PixelRegressor.

Caption providers:

- ManifestCaptionProvider: captions read from the manifest.
- HttpCaptionProvider:     remote vision-language endpoint. POSTs a base64 PNG
                           and an instruction, expects {"caption": ...}.
                           Retries with exponential backoff, 30 s timeout,
                           responses cached on disk by a hash of the file bytes.
"""

import base64
import hashlib
import io
import json
import logging
import threading
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Union

import numpy as np
import requests
import torch
import torch.nn.functional as F
from cachetools import LRUCache
from PIL import Image as PILImage
from requests.adapters import HTTPAdapter
from torch import nn
from tqdm import tqdm
from urllib3.util.retry import Retry

import settings
from affect_regressor import images_to_batch
from checkpoints import register_kind
from errors import CaptionError, ConfigError, ProviderUnavailableError
from imaging import DatasetManifest, Image, load_image, to_rgb

logger = logging.getLogger(__name__)

CAPTION_INSTRUCTION = (
    "Describe the content of this image in one short descriptive sentence. "
    "Name the main objects, their colors and the setting."
)


@dataclass(frozen=True)
class SemanticEmbedding:
    vector: np.ndarray
    provider: str = ""

    def __post_init__(self):
        v = np.asarray(self.vector, dtype=np.float64).reshape(-1)
        if not np.all(np.isfinite(v)):
            raise ValueError("embedding has non-finite entries")
        if not np.linalg.norm(v) > 0:
            raise ValueError("embedding has zero norm")
        object.__setattr__(self, "vector", v)

    @property
    def dim(self) -> int:
        return int(self.vector.shape[0])


# =========================================================================
# EMBEDDERS
# =========================================================================

@register_kind("semantic_embedder")
class AutoencoderEmbedder(nn.Module):
    """Conv encoder -> D-dim code; a mirrored decoder is only used for training."""

    def __init__(self, input_size: int = 32, dim: int = 64, width: int = 16):
        super().__init__()
        if input_size % 8:
            raise ConfigError("input_size must be divisible by 8")
        self.input_size = input_size
        self.dim = dim
        self.width = width
        s = input_size // 8
        self.encoder = nn.Sequential(
            nn.Conv2d(3, width, 4, stride=2, padding=1), nn.LeakyReLU(0.2),
            nn.Conv2d(width, 2 * width, 4, stride=2, padding=1), nn.LeakyReLU(0.2),
            nn.Conv2d(2 * width, 4 * width, 4, stride=2, padding=1), nn.LeakyReLU(0.2),
            nn.Flatten(),
            nn.Linear(4 * width * s * s, dim),
        )
        self.decoder = nn.Sequential(
            nn.Linear(dim, 4 * width * s * s), nn.LeakyReLU(0.2),
            nn.Unflatten(1, (4 * width, s, s)),
            nn.ConvTranspose2d(4 * width, 2 * width, 4, stride=2, padding=1), nn.LeakyReLU(0.2),
            nn.ConvTranspose2d(2 * width, width, 4, stride=2, padding=1), nn.LeakyReLU(0.2),
            nn.ConvTranspose2d(width, 3, 4, stride=2, padding=1), nn.Sigmoid(),
        )
        self.trained = False
        self.metrics: Dict = {}

    name = "autoencoder"

    def architecture(self) -> Dict:
        return {"input_size": self.input_size, "dim": self.dim, "width": self.width}

    def mark_trained(self) -> None:
        self.trained = True

    @property
    def ready(self) -> bool:
        return self.trained

    def describe(self) -> str:
        return f"autoencoder(dim={self.dim},input={self.input_size})"

    def _resize(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[-2:] == (self.input_size, self.input_size):
            return x
        return F.interpolate(x, size=(self.input_size, self.input_size), mode="bilinear", align_corners=False)

    def embed_tensor(self, x: torch.Tensor) -> torch.Tensor:
        return self.encoder(self._resize(x).to(self.encoder[0].weight.dtype))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.decoder(self.embed_tensor(x))


class ThumbnailEmbedder:
    """4x4 average-pooled RGB thumbnail, per-channel std and a constant unit entry."""

    name = "thumbnail"
    ready = True

    def __init__(self, grid: int = 4):
        self.grid = grid
        self.dim = 3 * grid * grid + 3 + 1

    def describe(self) -> str:
        return f"thumbnail(grid={self.grid})"

    def embed_tensor(self, x: torch.Tensor) -> torch.Tensor:
        pooled = F.adaptive_avg_pool2d(x, self.grid).flatten(1)
        spread = x.flatten(2).std(dim=2, unbiased=False)
        ones = torch.ones(x.shape[0], 1, dtype=x.dtype, device=x.device)
        return torch.cat([pooled, spread, ones], dim=1)


class RegressorFeatureEmbedder:
    """Penultimate features of a trained pixel regressor (plus a constant unit entry)."""

    name = "regressor_features"

    def __init__(self, regressor):
        self.regressor = regressor
        self.dim = regressor.hidden + 1

    @property
    def ready(self) -> bool:
        return bool(getattr(self.regressor, "trained", False))

    def describe(self) -> str:
        return f"regressor_features({self.regressor.describe()})"

    def embed_tensor(self, x: torch.Tensor) -> torch.Tensor:
        feats = self.regressor.features(x.to(next(self.regressor.parameters()).dtype))
        ones = torch.ones(x.shape[0], 1, dtype=feats.dtype, device=feats.device)
        return torch.cat([feats, ones], dim=1)


def _require_ready(provider) -> None:
    if provider is None or not getattr(provider, "ready", False):
        raise ProviderUnavailableError(f"embedding provider {provider!r} is not initialised")


def embed_image(provider, img: Image) -> SemanticEmbedding:
    _require_ready(provider)
    x = to_rgb(img).to_tensor(torch.float32)
    with torch.no_grad():
        v = provider.embed_tensor(x)[0]
    return SemanticEmbedding(v.to(torch.float64).numpy(), provider.describe())


def embed_images(provider, images: Sequence[Image], batch_size: int = 64) -> np.ndarray:
    """N x D float64 feature matrix."""
    _require_ready(provider)
    out = []
    with torch.no_grad():
        for start in range(0, len(images), batch_size):
            out.append(provider.embed_tensor(images_to_batch(images[start:start + batch_size])).to(torch.float64).numpy())
    return np.concatenate(out, axis=0)


def cosine_similarity(a: SemanticEmbedding, b: SemanticEmbedding) -> float:
    va, vb = a.vector, b.vector
    if va.shape != vb.shape:
        raise ValueError(f"embedding dimensions differ: {va.shape} vs {vb.shape}")
    cos = float(np.dot(va, vb) / (np.linalg.norm(va) * np.linalg.norm(vb)))
    return float(np.clip(cos, -1.0, 1.0))


def cosine_similarity_tensor(a: torch.Tensor, b: torch.Tensor, eps: float = 1e-12) -> torch.Tensor:
    """Row-wise cosine similarity of two N x D tensors (differentiable)."""
    dot = (a * b).sum(dim=1)
    return dot / (a.norm(dim=1) * b.norm(dim=1)).clamp_min(eps)


@dataclass
class EmbedderTrainConfig:
    epochs: int = 40
    batch_size: int = 32
    learning_rate: float = 2e-3
    seed: int = 0
    input_size: int = 32
    dim: int = 64


def train_autoencoder_embedder(images: Sequence[Image], cfg: EmbedderTrainConfig,
                               verbose: bool = False) -> AutoencoderEmbedder:
    """Train the in-process semantic embedder as an image autoencoder (L1 + MSE)."""
    if len(images) < 2:
        raise ConfigError("need at least two images to train the embedder")
    torch.manual_seed(cfg.seed)
    model = AutoencoderEmbedder(input_size=cfg.input_size, dim=cfg.dim)
    data = images_to_batch(images, cfg.input_size)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.learning_rate)
    gen = torch.Generator().manual_seed(cfg.seed + 1)
    trace: List[float] = []
    epochs = range(cfg.epochs)
    if verbose:
        epochs = tqdm(epochs, desc="train embedder")
    model.train()
    for epoch in epochs:
        perm = torch.randperm(data.shape[0], generator=gen)
        total = 0.0
        for start in range(0, data.shape[0], cfg.batch_size):
            x = data[perm[start:start + cfg.batch_size]]
            recon = model(x)
            loss = F.l1_loss(recon, x) + F.mse_loss(recon, x)
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += float(loss) * x.shape[0]
        trace.append(total / data.shape[0])
        logger.info("embedder epoch %d: loss=%.5f", epoch + 1, trace[-1])
    model.eval()
    model.mark_trained()
    model.metrics = {"loss_trace": trace}
    return model


# =========================================================================
# CAPTIONS
# =========================================================================

@dataclass(frozen=True)
class CaptionRecord:
    image_path: str
    caption: str
    provider: str

    def __post_init__(self):
        if not self.caption or not self.caption.strip():
            raise CaptionError(f"empty caption for {self.image_path}")


class ManifestCaptionProvider:
    name = "manifest"

    def __init__(self, manifest: DatasetManifest):
        self._captions = {str(Path(e.image_path)): e.caption for e in manifest.entries}

    def caption(self, path: Union[str, Path]) -> str:
        text = self._captions.get(str(Path(path)))
        if not text:
            raise CaptionError(f"manifest has no caption for {path}")
        return text


class HttpCaptionProvider:
    """Remote captioning client with retries, timeout and a content-hash cache."""

    name = "http"
    RETRIES = 3
    BACKOFF_FACTOR = 1.0
    TIMEOUT = 30
    RETRY_STATUS = (429, 500, 502, 503, 504)

    def __init__(self, url: Optional[str] = None, api_key: Optional[str] = None,
                 cache_dir: Optional[Union[str, Path]] = None, instruction: str = CAPTION_INSTRUCTION):
        self.url = url if url is not None else settings.CAPTION_URL
        if not self.url:
            raise ProviderUnavailableError("no caption endpoint configured (AFFECT_CAPTION_URL)")
        self.api_key = api_key if api_key is not None else settings.CAPTION_API_KEY
        self.cache_dir = Path(cache_dir) if cache_dir is not None else settings.CACHE_DIR / "captions"
        self.instruction = instruction
        self.session = self._create_session()
        self._memory: LRUCache = LRUCache(maxsize=1024)
        self._lock = threading.Lock()
        self.remote_calls = 0

    def _create_session(self) -> requests.Session:
        session = requests.Session()
        session.headers.update({"Content-Type": "application/json"})
        if self.api_key:
            session.headers["Authorization"] = f"Bearer {self.api_key}"
        retry_strategy = Retry(
            total=self.RETRIES,
            backoff_factor=self.BACKOFF_FACTOR,
            status_forcelist=list(self.RETRY_STATUS),
            allowed_methods=["POST"],
        )
        adapter = HTTPAdapter(max_retries=retry_strategy)
        session.mount("https://", adapter)
        session.mount("http://", adapter)
        return session

    def _cache_path(self, key: str) -> Path:
        return self.cache_dir / f"{key}.json"

    def _lookup(self, key: str) -> Optional[str]:
        with self._lock:
            if key in self._memory:
                return self._memory[key]
            path = self._cache_path(key)
            if path.is_file():
                caption = json.loads(path.read_text(encoding="utf-8"))["caption"]
                self._memory[key] = caption
                return caption
        return None

    def _store(self, key: str, path: str, caption: str) -> None:
        with self._lock:
            self.cache_dir.mkdir(parents=True, exist_ok=True)
            tmp = self._cache_path(key).with_suffix(".tmp")
            tmp.write_text(json.dumps({"caption": caption, "image_path": path}), encoding="utf-8")
            tmp.replace(self._cache_path(key))
            self._memory[key] = caption

    def _request(self, img: Image) -> str:
        buf = io.BytesIO()
        q = np.round(to_rgb(img).pixels * 255.0).astype(np.uint8)
        PILImage.fromarray(q).save(buf, format="PNG")
        payload = {"image": base64.b64encode(buf.getvalue()).decode("ascii"), "instruction": self.instruction}
        self.remote_calls += 1
        try:
            response = self.session.post(self.url, json=payload, timeout=self.TIMEOUT)
        except requests.RequestException as exc:
            raise CaptionError(f"caption request failed after {self.RETRIES} retries: {exc}") from exc
        if response.status_code != 200:
            raise CaptionError(f"caption endpoint returned {response.status_code}: {response.text[:200]}")
        try:
            caption = str(response.json()["caption"]).strip()
        except (ValueError, KeyError, TypeError) as exc:
            raise CaptionError("caption endpoint returned malformed JSON") from exc
        if not caption:
            raise CaptionError("caption endpoint returned an empty caption")
        return caption

    def caption(self, path: Union[str, Path]) -> str:
        img = load_image(path)
        # keyed on the file bytes: two files that decode to the same pixels stay distinct
        key = hashlib.sha256(Path(path).read_bytes()).hexdigest()
        cached = self._lookup(key)
        if cached is not None:
            logger.debug("caption cache hit for %s", path)
            return cached
        caption = self._request(img)
        self._store(key, str(path), caption)
        return caption


def caption_image(provider, path: Union[str, Path]) -> CaptionRecord:
    if provider is None:
        raise ProviderUnavailableError("no caption provider")
    return CaptionRecord(str(path), provider.caption(path), provider.name)


def make_caption_provider(kind: str, manifest: Optional[DatasetManifest] = None):
    if kind == "manifest":
        if manifest is None:
            raise ConfigError("manifest caption provider needs a manifest")
        return ManifestCaptionProvider(manifest)
    if kind == "http":
        return HttpCaptionProvider()
    raise ConfigError(f"unknown caption provider '{kind}'")
