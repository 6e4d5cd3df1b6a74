"""
AFFECT REGRESSOR - Valence/arousal prediction from pixels and from denoiser activations
=======================================================================================
Two networks, one training loop:

- PixelRegressor R:     image -> (valence, arousal). 4 conv blocks at a fixed
                        input size (64 by default), global pooling, 2-layer head.
- GuidanceRegressor R_u: denoiser mid-layer activation u_t -> (valence, arousal).
                        4 x (conv -> ReLU -> max-pool) followed by 2 linear layers.

Both heads end in a logistic so predictions always lie in [0, 1]^2. Training
minimises MSE, holds out a seeded validation split (10% by default), augments
with horizontal flips and stops after `patience` epochs without a new best
validation MAE. The best weights are restored at the end.
"""

import logging
import math
from dataclasses import asdict, dataclass
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn
from torch.utils.data import DataLoader, TensorDataset
from tqdm import tqdm

from checkpoints import register_kind
from errors import ConfigError, ModelNotTrainedError, ShapeMismatchError
from imaging import DatasetManifest, Image, to_rgb
from noise_schedule import NoiseSchedule, forward_diffuse

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class EmotionRating:
    valence: float
    arousal: float

    def as_tuple(self) -> Tuple[float, float]:
        return (self.valence, self.arousal)

    def distance(self, valence_ref: float, arousal_ref: float) -> float:
        return math.hypot(self.valence - valence_ref, self.arousal - arousal_ref)


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 32
    learning_rate: float = 1e-3
    seed: int = 0
    val_fraction: float = 0.1
    input_size: int = 64
    patience: int = 10
    augment_flip: bool = True

    def __post_init__(self):
        if not 0.0 < self.val_fraction < 1.0:
            raise ConfigError(f"val_fraction must be in (0, 1), got {self.val_fraction}")
        if self.epochs < 1 or self.batch_size < 1 or self.patience < 1:
            raise ConfigError("epochs, batch_size and patience must be positive")
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be positive")
        if self.input_size < 16:
            raise ConfigError("input_size must be at least 16")

    @classmethod
    def from_section(cls, section, seed: int, **overrides) -> "TrainConfig":
        values = {k: v for k, v in asdict(section).items() if k in cls.__dataclass_fields__}
        values.update(overrides)
        return cls(seed=seed, **values)


# =========================================================================
# NETWORKS
# =========================================================================

def _conv_block(c_in: int, c_out: int) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(c_in, c_out, 3, padding=1),
        nn.ReLU(inplace=False),
        nn.MaxPool2d(2, ceil_mode=True),
    )


@register_kind("pixel_regressor")
class PixelRegressor(nn.Module):
    """Small CNN emotion regressor operating on RGB tensors in [0, 1]."""

    def __init__(self, input_size: int = 64, width: int = 16, hidden: int = 64):
        super().__init__()
        self.input_size = input_size
        self.width = width
        self.hidden = hidden
        self.block1 = _conv_block(3, width)
        self.block2 = _conv_block(width, 2 * width)
        self.block3 = _conv_block(2 * width, 4 * width)
        self.block4 = _conv_block(4 * width, 4 * width)
        self.fc1 = nn.Linear(4 * width, hidden)
        self.fc2 = nn.Linear(hidden, 2)
        self.trained = False
        self.metrics: Dict = {}

    def architecture(self) -> Dict:
        return {"input_size": self.input_size, "width": self.width, "hidden": self.hidden}

    def mark_trained(self) -> None:
        self.trained = True

    def describe(self) -> str:
        return f"pixel_regressor(input={self.input_size},width={self.width})"

    def _resize(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[-2:] == (self.input_size, self.input_size):
            return x
        return F.interpolate(x, size=(self.input_size, self.input_size), mode="bilinear", align_corners=False)

    def early_features(self, x: torch.Tensor) -> torch.Tensor:
        """Activations after the first two conv blocks, at the input's own resolution."""
        return self.block2(self.block1(x))

    def features(self, x: torch.Tensor) -> torch.Tensor:
        """Penultimate (hidden) features."""
        h = self.block4(self.block3(self.early_features(self._resize(x))))
        return F.relu(self.fc1(h.mean(dim=(2, 3))))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(self.fc2(self.features(x)))


@register_kind("guidance_regressor")
class GuidanceRegressor(nn.Module):
    """R_u: regresses (valence, arousal) from a denoiser mid-layer activation."""

    def __init__(self, in_channels: int, spatial: Sequence[int], width: int = 32, hidden: int = 64):
        super().__init__()
        self.in_channels = in_channels
        self.spatial = (int(spatial[0]), int(spatial[1]))
        self.width = width
        self.hidden = hidden
        self.convs = nn.Sequential(
            _conv_block(in_channels, width),
            _conv_block(width, width),
            _conv_block(width, 2 * width),
            _conv_block(2 * width, 2 * width),
        )
        h, w = self.spatial
        for _ in range(4):
            h, w = math.ceil(h / 2), math.ceil(w / 2)
        self.fc1 = nn.Linear(2 * width * h * w, hidden)
        self.fc2 = nn.Linear(hidden, 2)
        self.trained = False
        self.metrics: Dict = {}

    def architecture(self) -> Dict:
        return {"in_channels": self.in_channels, "spatial": list(self.spatial),
                "width": self.width, "hidden": self.hidden}

    def mark_trained(self) -> None:
        self.trained = True

    def check_shape(self, u: torch.Tensor) -> None:
        if u.dim() != 4 or u.shape[1] != self.in_channels or tuple(u.shape[-2:]) != self.spatial:
            raise ShapeMismatchError(
                f"mid-layer activation {tuple(u.shape)} does not match "
                f"(N, {self.in_channels}, {self.spatial[0]}, {self.spatial[1]})"
            )

    def forward(self, u: torch.Tensor) -> torch.Tensor:
        h = self.convs(u).flatten(1)
        return torch.sigmoid(self.fc2(F.relu(self.fc1(h))))


# =========================================================================
# TRAINING
# =========================================================================

def images_to_batch(images: Sequence[Image], size: Optional[int] = None,
                    dtype: torch.dtype = torch.float32) -> torch.Tensor:
    """Stack images into an N x 3 x H x W tensor, optionally resized to size x size."""
    tensors = []
    for img in images:
        x = to_rgb(img).to_tensor(dtype)
        if size is not None and x.shape[-2:] != (size, size):
            x = F.interpolate(x, size=(size, size), mode="bilinear", align_corners=False)
        tensors.append(x)
    return torch.cat(tensors, dim=0)


def _split_indices(n: int, cfg: TrainConfig) -> Tuple[torch.Tensor, torch.Tensor]:
    n_val = max(2, int(round(n * cfg.val_fraction)))
    if n - n_val < 1:
        raise ConfigError(f"{n} samples are too few for a {cfg.val_fraction:.0%} validation split")
    perm = torch.randperm(n, generator=torch.Generator().manual_seed(cfg.seed))
    return perm[n_val:], perm[:n_val]


def _check_manifest(m: DatasetManifest) -> None:
    if len(m) == 0:
        raise ConfigError("empty manifest")
    if not m.normalized:
        raise ConfigError("manifest ratings are not normalized; call normalize_ratings first")


def _fit(model: nn.Module, inputs: torch.Tensor, labels: torch.Tensor, cfg: TrainConfig,
         prepare: Callable[[torch.Tensor, torch.Tensor, torch.Generator], torch.Tensor],
         name: str, verbose: bool = False) -> nn.Module:
    """Shared loop: MSE, Adam, flip augmentation, early stopping on validation MAE.

    prepare(x_batch, idx_batch, generator) turns stored inputs into model inputs.
    """
    train_idx, val_idx = _split_indices(inputs.shape[0], cfg)
    gen = torch.Generator().manual_seed(cfg.seed + 1)
    loader = DataLoader(TensorDataset(train_idx), batch_size=cfg.batch_size, shuffle=True,
                        generator=torch.Generator().manual_seed(cfg.seed + 2))
    opt = torch.optim.Adam(model.parameters(), lr=cfg.learning_rate)
    val_gen_seed = cfg.seed + 3

    history: Dict[str, List] = {"train_loss": [], "train_mae": [], "val_mae": []}
    best_score, best_state, best_epoch, stale = float("inf"), None, -1, 0
    epochs = range(cfg.epochs)
    if verbose:
        epochs = tqdm(epochs, desc=f"train {name}")
    for epoch in epochs:
        model.train()
        total_loss, total_abs, count = 0.0, torch.zeros(2), 0
        for (idx,) in loader:
            x = inputs[idx]
            if cfg.augment_flip:
                flip = torch.rand(x.shape[0], generator=gen) < 0.5
                x = torch.where(flip.view(-1, 1, 1, 1), x.flip(-1), x)
            y = labels[idx]
            pred = model(prepare(x, idx, gen))
            loss = F.mse_loss(pred, y)
            opt.zero_grad()
            loss.backward()
            opt.step()
            total_loss += float(loss) * x.shape[0]
            total_abs += (pred.detach() - y).abs().sum(dim=0)
            count += x.shape[0]

        model.eval()
        with torch.no_grad():
            vgen = torch.Generator().manual_seed(val_gen_seed)
            vpred = model(prepare(inputs[val_idx], val_idx, vgen))
            val_mae = (vpred - labels[val_idx]).abs().mean(dim=0)
        train_mae = (total_abs / count).tolist()
        history["train_loss"].append(total_loss / count)
        history["train_mae"].append(train_mae)
        history["val_mae"].append(val_mae.tolist())
        score = float(val_mae.mean())
        logger.info("%s epoch %d: loss=%.5f val_mae=(%.4f, %.4f)",
                    name, epoch + 1, total_loss / count, float(val_mae[0]), float(val_mae[1]))
        if score < best_score - 1e-9:
            best_score, best_epoch, stale = score, epoch, 0
            best_state = {k: v.detach().clone() for k, v in model.state_dict().items()}
        else:
            stale += 1
            if stale >= cfg.patience:
                logger.info("%s: validation MAE plateaued, stopping after epoch %d", name, epoch + 1)
                break

    if best_state is not None:
        model.load_state_dict(best_state)
    model.eval()
    model.mark_trained()
    best_val = history["val_mae"][best_epoch]
    model.metrics = {
        "history": history,
        "best_epoch": best_epoch + 1,
        "valence_mae": best_val[0],
        "arousal_mae": best_val[1],
        "n_train": int(train_idx.numel()),
        "n_val": int(val_idx.numel()),
    }
    return model


def train_pixel_regressor(m: DatasetManifest, cfg: TrainConfig, verbose: bool = False,
                          images: Optional[Sequence[Image]] = None) -> PixelRegressor:
    """Train R on a normalized manifest. Images may be supplied pre-loaded."""
    _check_manifest(m)
    torch.manual_seed(cfg.seed)
    images = list(images) if images is not None else m.load_images()
    inputs = images_to_batch(images, cfg.input_size)
    labels = torch.tensor(m.labels(), dtype=torch.float32)
    model = PixelRegressor(input_size=cfg.input_size)
    _fit(model, inputs, labels, cfg, lambda x, idx, gen: x, "pixel_regressor", verbose)
    logger.info("pixel regressor trained: val MAE valence=%.4f arousal=%.4f",
                model.metrics["valence_mae"], model.metrics["arousal_mae"])
    return model


def train_guidance_regressor(m: DatasetManifest, denoiser, schedule: NoiseSchedule, cfg: TrainConfig,
                             timestep: Optional[int] = None, verbose: bool = False,
                             images: Optional[Sequence[Image]] = None) -> GuidanceRegressor:
    """Train R_u on mid-layer activations of noised latents.

    For every batch: z_0 = E(I), t ~ U{1..T} (or the fixed `timestep`),
    z_t = forward_diffuse(z_0, t), u_t = DM_half(z_t, t, null) and regress.
    """
    _check_manifest(m)
    if schedule.T != denoiser.train_steps:
        raise ShapeMismatchError(
            f"schedule has T={schedule.T} but the denoiser was trained with T={denoiser.train_steps}"
        )
    if timestep is not None and not 1 <= timestep <= schedule.T:
        raise ConfigError(f"timestep must be in [1, {schedule.T}]")
    torch.manual_seed(cfg.seed)
    images = list(images) if images is not None else m.load_images()
    inputs = images_to_batch(images, denoiser.image_size)
    labels = torch.tensor(m.labels(), dtype=torch.float32)
    denoiser.eval()
    with torch.no_grad():
        z0_all = denoiser.encode(inputs)
        null = denoiser.null_embedding()
        u_sample = denoiser.forward_half(z0_all[:1], torch.ones(1, dtype=torch.long), null)
    model = GuidanceRegressor(in_channels=u_sample.shape[1], spatial=u_sample.shape[-2:])

    def prepare(x: torch.Tensor, idx: torch.Tensor, gen: torch.Generator) -> torch.Tensor:
        n = x.shape[0]
        if timestep is None:
            t = torch.randint(1, schedule.T + 1, (n,), generator=gen)
        else:
            t = torch.full((n,), timestep, dtype=torch.long)
        noise = torch.randn(denoiser.encode(x).shape, generator=gen)
        with torch.no_grad():
            z_t = forward_diffuse(denoiser.encode(x), t, schedule, noise)
            return denoiser.forward_half(z_t, t, null.expand(n, -1))

    _fit(model, inputs, labels, cfg, prepare, "guidance_regressor", verbose)
    model.metrics["timestep"] = timestep
    logger.info("guidance regressor trained: val MAE valence=%.4f arousal=%.4f",
                model.metrics["valence_mae"], model.metrics["arousal_mae"])
    return model


# =========================================================================
# INFERENCE
# =========================================================================

def _require_trained(model) -> None:
    if not getattr(model, "trained", False):
        raise ModelNotTrainedError(f"{type(model).__name__} has not been trained or loaded")


def predict_batch(model: nn.Module, images: Sequence[Image], batch_size: int = 64) -> np.ndarray:
    """N x 2 float64 array of (valence, arousal) predictions."""
    _require_trained(model)
    size = getattr(model, "input_size", None)
    if size is None and len({(img.height, img.width) for img in images}) > 1:
        batch_size = 1
    dtype = next(iter(model.parameters()), torch.empty(0)).dtype
    out = []
    with torch.no_grad():
        for start in range(0, len(images), batch_size):
            x = images_to_batch(images[start:start + batch_size], size)
            out.append(model(x.to(dtype)).to(torch.float64).numpy())
    return np.concatenate(out, axis=0) if out else np.zeros((0, 2))


def predict_emotion(r: nn.Module, img: Image) -> EmotionRating:
    v, a = predict_batch(r, [img])[0]
    return EmotionRating(float(v), float(a))


def predict_emotion_mid(g: GuidanceRegressor, u_t: torch.Tensor) -> torch.Tensor:
    """R_u(u_t) as an N x 2 tensor; differentiable with respect to u_t."""
    _require_trained(g)
    g.check_shape(u_t)
    return g(u_t.to(next(g.parameters()).dtype))


def evaluate_mae(model: nn.Module, m: DatasetManifest,
                 images: Optional[Sequence[Image]] = None) -> Tuple[float, float]:
    """Per-axis mean absolute error of the model's predictions over the manifest."""
    images = list(images) if images is not None else m.load_images()
    pred = predict_batch(model, images)
    err = np.abs(pred - m.labels()).mean(axis=0)
    return float(err[0]), float(err[1])
