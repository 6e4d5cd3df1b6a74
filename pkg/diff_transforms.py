"""
DIFFERENTIABLE TRANSFORMS - Global image edit chain T(I, p)
===========================================================

Fixed application order:

    exposure -> color curves -> tone curve -> contrast -> sharpen/blur
             -> soft clamp -> translate/scale

1. EXPOSURE:      x * 2^e                                   (e in stops)
2. COLOR CURVES:  per-channel piecewise-linear curve, K = 8 segments.
                  Segment slopes are exp(o_k), renormalised so f(1) = 1.
                  Monotone for any offsets; o = 0 is the identity curve.
3. TONE CURVE:    one curve applied to luma Y = 0.299 R + 0.587 G + 0.114 B;
                  every channel is scaled by f(Y) / Y so hue is preserved.
4. CONTRAST:      0.5 + g * (x - 0.5)                       (gain about mid-gray)
5. SHARPEN/BLUR:  unsharp mask x + a * (x - G_1(x)), then Gaussian blur G_sigma.
                  For sigma < 1 the blur ramps linearly (1 - sigma) x + sigma G_1(x)
                  so sigma -> 0 is the identity and the gradient at 0 is non-zero.
6. SOFT CLAMP:    the change d = x - I is squashed into the available headroom,
                  I + h * tanh(d / h), which keeps outputs in [0, 1] with
                  non-vanishing gradients and leaves unchanged pixels exact.
7. GEOMETRY:      bilinear resampling about the centre with edge replication.
                  Bilinear weights are convex so no clamp is needed afterwards.

Every stage is written in torch so gradients with respect to all parameters
come from autograd.
"""

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import torch
import torch.nn.functional as F

from errors import ParamBoundsError
from imaging import Image, to_rgb

logger = logging.getLogger(__name__)

CURVE_KNOTS = 8
BLUR_RADIUS = 15
SHARPEN_SIGMA = 1.0
HEADROOM_EPS = 1e-6
LUMA_EPS = 1e-6
LUMA_WEIGHTS = (0.299, 0.587, 0.114)

# (name, length) in vector order
FIELDS: Tuple[Tuple[str, int], ...] = (
    ("exposure", 1),
    ("tone_curve", CURVE_KNOTS),
    ("color_curves", 3 * CURVE_KNOTS),
    ("contrast", 1),
    ("sharpen_amount", 1),
    ("blur_sigma", 1),
    ("translate", 2),
    ("scale", 1),
)
VECTOR_SIZE = sum(n for _, n in FIELDS)

IDENTITY_VALUES: Dict[str, float] = {
    "exposure": 0.0,
    "tone_curve": 0.0,
    "color_curves": 0.0,
    "contrast": 1.0,
    "sharpen_amount": 0.0,
    "blur_sigma": 0.0,
    "translate": 0.0,
    "scale": 1.0,
}

DEFAULT_BOUNDS: Dict[str, Tuple[float, float]] = {
    "exposure": (-2.0, 2.0),
    "tone_curve": (-1.0, 1.0),
    "color_curves": (-1.0, 1.0),
    "contrast": (0.5, 2.0),
    "sharpen_amount": (0.0, 2.0),
    "blur_sigma": (0.0, 5.0),
    "translate": (-0.1, 0.1),
    "scale": (0.9, 1.1),
}


def _slices() -> Dict[str, slice]:
    out, start = {}, 0
    for name, n in FIELDS:
        out[name] = slice(start, start + n)
        start += n
    return out


SLICES = _slices()


class TransformParams:
    """Parameter vector p of the transform chain, with named field views."""

    def __init__(self, values: torch.Tensor):
        if values.dim() != 1 or values.numel() != VECTOR_SIZE:
            raise ValueError(f"expected a {VECTOR_SIZE}-vector, got shape {tuple(values.shape)}")
        self.values = values

    def field(self, name: str) -> torch.Tensor:
        return self.values[SLICES[name]]

    @property
    def exposure(self) -> torch.Tensor:
        return self.values[SLICES["exposure"]][0]

    @property
    def tone_curve(self) -> torch.Tensor:
        return self.values[SLICES["tone_curve"]]

    @property
    def color_curves(self) -> torch.Tensor:
        return self.values[SLICES["color_curves"]].view(3, CURVE_KNOTS)

    @property
    def contrast(self) -> torch.Tensor:
        return self.values[SLICES["contrast"]][0]

    @property
    def sharpen_amount(self) -> torch.Tensor:
        return self.values[SLICES["sharpen_amount"]][0]

    @property
    def blur_sigma(self) -> torch.Tensor:
        return self.values[SLICES["blur_sigma"]][0]

    @property
    def translate(self) -> torch.Tensor:
        return self.values[SLICES["translate"]]

    @property
    def scale(self) -> torch.Tensor:
        return self.values[SLICES["scale"]][0]

    def detach(self) -> "TransformParams":
        return TransformParams(self.values.detach().clone())

    def replace(self, **updates) -> "TransformParams":
        """Copy with some fields overwritten (scalars or sequences)."""
        values = self.values.detach().clone()
        for name, val in updates.items():
            values[SLICES[name]] = torch.as_tensor(val, dtype=values.dtype).reshape(-1)
        return TransformParams(values)

    def to_dict(self) -> Dict[str, Union[float, List[float]]]:
        v = self.values.detach().to("cpu", torch.float64)
        out: Dict[str, Union[float, List[float]]] = {}
        for name, n in FIELDS:
            vals = v[SLICES[name]].tolist()
            out[name] = vals[0] if n == 1 else vals
        return out

    @classmethod
    def from_dict(cls, data: Dict, dtype: torch.dtype = torch.float64) -> "TransformParams":
        values = identity_params(dtype).values.clone()
        unknown = set(data) - set(SLICES)
        if unknown:
            raise ValueError(f"unknown transform fields: {sorted(unknown)}")
        for name, val in data.items():
            t = torch.as_tensor(val, dtype=dtype).reshape(-1)
            if t.numel() != SLICES[name].stop - SLICES[name].start:
                raise ValueError(f"field '{name}' expects {SLICES[name].stop - SLICES[name].start} values")
            values[SLICES[name]] = t
        return cls(values)

    def to_json(self, path: Optional[Union[str, Path]] = None) -> str:
        text = json.dumps(self.to_dict(), indent=2)
        if path is not None:
            Path(path).write_text(text, encoding="utf-8")
        return text

    @classmethod
    def from_json(cls, source: Union[str, Path]) -> "TransformParams":
        """Load from a JSON file path or a JSON string."""
        path = Path(source) if not str(source).lstrip().startswith("{") else None
        text = path.read_text(encoding="utf-8") if path is not None else str(source)
        return cls.from_dict(json.loads(text))

    def __repr__(self) -> str:
        return f"TransformParams({self.to_dict()})"


def identity_params(dtype: torch.dtype = torch.float64) -> TransformParams:
    """Parameters that map every image to itself."""
    values = torch.empty(VECTOR_SIZE, dtype=dtype)
    for name, _ in FIELDS:
        values[SLICES[name]] = IDENTITY_VALUES[name]
    return TransformParams(values)


def params_to_vector(p: TransformParams) -> torch.Tensor:
    return p.values


def vector_to_params(v: torch.Tensor) -> TransformParams:
    return TransformParams(v)


@dataclass(frozen=True)
class ParamBounds:
    """Box constraints (the feasible set) for every parameter component."""

    lo: torch.Tensor
    hi: torch.Tensor

    def __post_init__(self):
        if self.lo.shape != (VECTOR_SIZE,) or self.hi.shape != (VECTOR_SIZE,):
            raise ValueError("bounds must be full parameter vectors")
        if not torch.all(self.lo < self.hi):
            raise ValueError("every lower bound must be below its upper bound")
        ident = identity_params(self.lo.dtype).values
        if not (torch.all(self.lo <= ident) and torch.all(ident <= self.hi)):
            raise ValueError("identity parameters must lie inside the bounds")

    @classmethod
    def from_fields(cls, per_field: Optional[Dict[str, Tuple[float, float]]] = None,
                    dtype: torch.dtype = torch.float64) -> "ParamBounds":
        table = dict(DEFAULT_BOUNDS)
        table.update(per_field or {})
        lo = torch.empty(VECTOR_SIZE, dtype=dtype)
        hi = torch.empty(VECTOR_SIZE, dtype=dtype)
        for name, _ in FIELDS:
            lo[SLICES[name]], hi[SLICES[name]] = table[name]
        return cls(lo, hi)

    def to(self, dtype: torch.dtype) -> "ParamBounds":
        return ParamBounds(self.lo.to(dtype), self.hi.to(dtype))

    def contains(self, p: TransformParams, tol: float = 1e-9) -> bool:
        v = p.values.detach()
        lo, hi = self.lo.to(v.dtype), self.hi.to(v.dtype)
        return bool(torch.all(v >= lo - tol) and torch.all(v <= hi + tol))


DEFAULT_PARAM_BOUNDS = ParamBounds.from_fields()


def clamp_params(p: TransformParams, bounds: ParamBounds = DEFAULT_PARAM_BOUNDS) -> TransformParams:
    """Componentwise projection onto the box."""
    v = p.values
    return TransformParams(torch.max(torch.min(v, bounds.hi.to(v.dtype)), bounds.lo.to(v.dtype)))


# =========================================================================
# STAGES
# =========================================================================

def _apply_curve(x: torch.Tensor, log_slopes: torch.Tensor) -> torch.Tensor:
    """Monotone piecewise-linear curve; log_slopes has shape (C or 1, K)."""
    k_count = log_slopes.shape[-1]
    width = 1.0 / k_count
    slopes = torch.exp(log_slopes)
    total = torch.zeros_like(x)
    for k in range(k_count):
        seg = x - k * width
        if k == 0:
            seg = torch.clamp(seg, max=width)
        elif k == k_count - 1:
            seg = torch.clamp(seg, min=0.0)
        else:
            seg = torch.clamp(seg, 0.0, width)
        total = total + seg * slopes[:, k].view(1, -1, 1, 1)
    return total * (k_count / slopes.sum(dim=-1)).view(1, -1, 1, 1)


def _tone_curve(x: torch.Tensor, log_slopes: torch.Tensor) -> torch.Tensor:
    """Curve on luma, channels rescaled by the luma gain."""
    w = torch.as_tensor(LUMA_WEIGHTS, dtype=x.dtype, device=x.device).view(1, 3, 1, 1)
    luma = (x * w).sum(dim=1, keepdim=True)
    slopes = log_slopes.view(1, -1)
    mapped = _apply_curve(luma, slopes)
    # below LUMA_EPS the gain is the slope of the first segment
    s0 = torch.exp(slopes[0, 0]) * slopes.shape[-1] / torch.exp(slopes).sum()
    gain = torch.where(luma > LUMA_EPS, mapped / luma.clamp_min(LUMA_EPS), s0)
    return x * gain


def _gaussian_kernel(sigma: torch.Tensor, radius: int = BLUR_RADIUS) -> torch.Tensor:
    i = torch.arange(-radius, radius + 1, dtype=sigma.dtype, device=sigma.device)
    k = torch.exp(-(i ** 2) / (2.0 * sigma ** 2))
    return k / k.sum()


def gaussian_blur(x: torch.Tensor, sigma: Union[float, torch.Tensor], radius: int = BLUR_RADIUS) -> torch.Tensor:
    """Separable Gaussian blur with edge replication; x is N x C x H x W."""
    sigma = torch.as_tensor(sigma, dtype=x.dtype, device=x.device)
    k = _gaussian_kernel(sigma, radius)
    c = x.shape[1]
    kx = k.view(1, 1, 1, -1).expand(c, 1, 1, -1)
    ky = k.view(1, 1, -1, 1).expand(c, 1, -1, 1)
    y = F.pad(x, (radius, radius, 0, 0), mode="replicate")
    y = F.conv2d(y, kx, groups=c)
    y = F.pad(y, (0, 0, radius, radius), mode="replicate")
    return F.conv2d(y, ky, groups=c)


def _blur_stage(x: torch.Tensor, sigma: torch.Tensor) -> torch.Tensor:
    if float(sigma) < 1.0:
        return (1.0 - sigma) * x + sigma * gaussian_blur(x, SHARPEN_SIGMA)
    return gaussian_blur(x, sigma)


def _soft_clip(x: torch.Tensor, ref: torch.Tensor) -> torch.Tensor:
    delta = x - ref
    room = torch.where(delta >= 0, 1.0 - ref, ref).clamp_min(HEADROOM_EPS)
    return ref + room * torch.tanh(delta / room)


def _geometry(x: torch.Tensor, translate: torch.Tensor, scale: torch.Tensor) -> torch.Tensor:
    n = x.shape[0]
    zero = torch.zeros((), dtype=x.dtype, device=x.device)
    inv = 1.0 / scale
    # translate is a fraction of the image extent; normalised coordinates span 2
    row0 = torch.stack([inv, zero, -2.0 * translate[0]])
    row1 = torch.stack([zero, inv, -2.0 * translate[1]])
    theta = torch.stack([row0, row1]).unsqueeze(0).expand(n, 2, 3)
    grid = F.affine_grid(theta, list(x.shape), align_corners=True)
    return F.grid_sample(x, grid, mode="bilinear", padding_mode="border", align_corners=True)


def apply_transforms_tensor(x: torch.Tensor, p: TransformParams, clamp: bool = True) -> torch.Tensor:
    """Apply T(x, p) to an N x 3 x H x W tensor in [0, 1]."""
    v = p.values.to(x.dtype)
    q = TransformParams(v)
    y = x * torch.pow(torch.as_tensor(2.0, dtype=x.dtype), q.exposure)
    y = _apply_curve(y, q.color_curves)
    y = _tone_curve(y, q.tone_curve)
    y = 0.5 + q.contrast * (y - 0.5)
    y = y + q.sharpen_amount * (y - gaussian_blur(y, SHARPEN_SIGMA))
    y = _blur_stage(y, q.blur_sigma)
    if clamp:
        y = _soft_clip(y, x)
    return _geometry(y, q.translate, q.scale)


def apply_transforms(img: Image, p: TransformParams, bounds: ParamBounds = DEFAULT_PARAM_BOUNDS,
                     clamp: bool = True) -> Union[Image, torch.Tensor]:
    """T(I, p). Returns an Image, or the raw tensor when clamp=False (values may leave [0, 1])."""
    if not bounds.contains(p):
        raise ParamBoundsError(f"transform parameters outside the feasible set: {p}")
    x = to_rgb(img).to_tensor(torch.float64)
    with torch.no_grad():
        y = apply_transforms_tensor(x, p.detach(), clamp=clamp)
    if not clamp:
        return y
    return Image.from_tensor(y)


def apply_to_frames(frames: Sequence[Image], p: TransformParams,
                    bounds: ParamBounds = DEFAULT_PARAM_BOUNDS) -> List[Image]:
    """Apply one parameter set to a sequence of frames."""
    return [apply_transforms(f, p, bounds) for f in frames]
