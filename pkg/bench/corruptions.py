"""
Corruption module.
Fifteen common image corruptions (noise, blur, weather, digital) at five
severities, operating on (3, H, W) tensors in [0, 1]. Every random draw goes
through the generator passed in, so (kind, severity, seed) fixes the output.
Severity tables are read from configs/corruptions.yaml.
"""
from __future__ import annotations

import io
import logging
import math
from functools import lru_cache
from pathlib import Path
from typing import Callable

import numpy as np
import torch
import torch.nn.functional as F
import yaml
from PIL import Image
from torchvision.transforms import InterpolationMode
from torchvision.transforms.v2 import functional as TF

from config import CONFIG_DIR
from core import CorruptionError, ImageTensor
from utils import uniform

logger = logging.getLogger(__name__)

CORRUPTIONS_CONFIG = CONFIG_DIR / "corruptions.yaml"
SEVERITIES = (1, 2, 3, 4, 5)
KINDS = (
    "gaussian-noise", "shot-noise", "impulse-noise",
    "defocus-blur", "glass-blur", "motion-blur", "zoom-blur",
    "snow", "frost", "fog",
    "brightness", "contrast", "elastic", "jpeg", "pixelate",
)

_corruptions: dict[str, Callable[[torch.Tensor, object, torch.Generator], torch.Tensor]] = {}


def _register(name: str):
    def wrap(fn):
        _corruptions[name] = fn
        return fn
    return wrap


@lru_cache(maxsize=None)
def load_severity_tables(path: str | Path = CORRUPTIONS_CONFIG) -> dict[str, tuple]:
    path = Path(path)
    try:
        payload = yaml.safe_load(path.read_text(encoding="utf-8")) or {}
    except (OSError, yaml.YAMLError) as e:
        raise CorruptionError(f"cannot read severity tables {path}: {e}") from e
    missing = sorted(set(KINDS) - set(payload))
    unknown = sorted(set(payload) - set(KINDS))
    if missing or unknown:
        raise CorruptionError(f"{path}: missing kinds {missing}, unknown kinds {unknown}")
    tables = {}
    for kind in KINDS:
        rows = payload[kind]
        if not isinstance(rows, list) or len(rows) != len(SEVERITIES):
            raise CorruptionError(f"{path}: '{kind}' needs {len(SEVERITIES)} severity rows")
        tables[kind] = tuple(tuple(r) if isinstance(r, list) else r for r in rows)
    return tables


def corrupt(
    image: ImageTensor,
    kind: str,
    severity: int,
    rng: torch.Generator,
    tables: dict[str, tuple] | None = None,
) -> ImageTensor:
    if kind not in _corruptions:
        raise CorruptionError(f"unknown corruption '{kind}', expected one of {list(KINDS)}")
    if not isinstance(severity, int) or isinstance(severity, bool) or severity not in SEVERITIES:
        raise CorruptionError(f"severity must be an integer in 1..5, got {severity!r}")
    tables = tables or load_severity_tables()
    param = tables[kind][severity - 1]
    out = _corruptions[kind](image.chw().to(torch.float32), param, rng)
    return ImageTensor.clipped(out.permute(1, 2, 0))


# ==================== HELPERS ====================

def _filter(x: torch.Tensor, kernel: torch.Tensor) -> torch.Tensor:
    """Depthwise 2D filter with reflect padding; `kernel` is (k, k) and sums to one."""
    k = kernel.shape[-1]
    pad = k // 2
    padded = F.pad(x[None], (pad, pad, pad, pad), mode="reflect")
    weight = kernel.to(x.dtype)[None, None].expand(x.shape[0], 1, k, k)
    return F.conv2d(padded, weight, groups=x.shape[0])[0]


def _gaussian_blur(x: torch.Tensor, sigma: float) -> torch.Tensor:
    size = 2 * math.ceil(3 * sigma) + 1
    return TF.gaussian_blur(x, kernel_size=[size, size], sigma=[sigma, sigma])


def _disk_kernel(radius: float) -> torch.Tensor:
    r = math.ceil(radius)
    coords = torch.arange(-r, r + 1, dtype=torch.float32)
    kernel = ((coords[:, None] ** 2 + coords[None] ** 2) <= radius ** 2).float()
    return kernel / kernel.sum()


def _line_kernel(length: int, angle: float) -> torch.Tensor:
    """Normalized (length x length) kernel along a line through the centre at `angle` degrees."""
    kernel = torch.zeros(length, length)
    c = (length - 1) / 2
    t = torch.linspace(-c, c, 4 * length)
    xs = (c + t * math.cos(math.radians(angle))).round().long().clamp(0, length - 1)
    ys = (c + t * math.sin(math.radians(angle))).round().long().clamp(0, length - 1)
    kernel[ys, xs] = 1.0
    return kernel / kernel.sum()


def _fractal_noise(h: int, w: int, rng: torch.Generator, decay: float) -> torch.Tensor:
    """Sum of bilinearly upsampled random grids, amplitude / decay per octave; in [0, 1]."""
    total = torch.zeros(1, 1, h, w)
    amplitude = 1.0
    for octave in range(max(1, int(math.log2(min(h, w))) - 1)):
        cells = 2 ** (octave + 1) + 1
        grid = torch.rand((1, 1, cells, cells), generator=rng)
        total += amplitude * F.interpolate(grid, size=(h, w), mode="bilinear", align_corners=True)
        amplitude /= decay
    total = total[0, 0]
    return (total - total.min()) / (total.max() - total.min()).clamp(min=1e-12)


# ==================== NOISE ====================

@_register("gaussian-noise")
def gaussian_noise(x, sigma, rng):
    return x + sigma * torch.randn(x.shape, generator=rng)


@_register("shot-noise")
def shot_noise(x, rate, rng):
    return torch.poisson(x * rate, generator=rng) / rate


@_register("impulse-noise")
def impulse_noise(x, amount, rng):
    salt = torch.bernoulli(torch.full_like(x, amount / 2), generator=rng)
    pepper = torch.bernoulli(torch.full_like(x, 1 - amount / 2), generator=rng)
    return torch.max(torch.min(x, pepper), salt)


# ==================== BLUR ====================

@_register("defocus-blur")
def defocus_blur(x, radius, rng):
    return _filter(x, _disk_kernel(radius))


@_register("glass-blur")
def glass_blur(x, param, rng):
    sigma, max_delta, iterations = param
    h, w = x.shape[-2:]
    x = _gaussian_blur(x, sigma)
    rows = torch.arange(h)[:, None].expand(h, w)
    cols = torch.arange(w)[None].expand(h, w)
    for _ in range(int(iterations)):
        dy = torch.randint(-int(max_delta), int(max_delta) + 1, (h, w), generator=rng)
        dx = torch.randint(-int(max_delta), int(max_delta) + 1, (h, w), generator=rng)
        x = x[:, (rows + dy).clamp(0, h - 1), (cols + dx).clamp(0, w - 1)]
    return _gaussian_blur(x, sigma)


@_register("motion-blur")
def motion_blur(x, length, rng):
    return _filter(x, _line_kernel(int(length), uniform(rng, -45.0, 45.0)))


@_register("zoom-blur")
def zoom_blur(x, max_zoom, rng):
    factors = torch.arange(1.01, max_zoom + 1e-6, 0.01).tolist()
    out = x.clone()
    for factor in factors:
        out += TF.affine(
            x, angle=0.0, translate=[0.0, 0.0], scale=factor, shear=[0.0, 0.0],
            interpolation=InterpolationMode.BILINEAR,
        )
    return out / (len(factors) + 1)


# ==================== WEATHER ====================

@_register("snow")
def snow(x, param, rng):
    density, streak, whiten = param
    h, w = x.shape[-2:]
    gray = x.mean(dim=0, keepdim=True)
    x = x * (1 - whiten) + whiten * torch.maximum(x, gray * 1.5 + 0.5)
    flakes = torch.bernoulli(torch.full((1, h, w), float(density)), generator=rng)
    streaks = _filter(flakes, _line_kernel(int(streak), uniform(rng, -135.0, -45.0))) * int(streak)
    return x + streaks.clamp(0.0, 1.0)


@_register("frost")
def frost(x, param, rng):
    image_weight, frost_weight = param
    h, w = x.shape[-2:]
    texture = _fractal_noise(h, w, rng, decay=1.5) ** 2
    ice = texture[None] * torch.tensor([0.85, 0.92, 1.0])[:, None, None]
    return image_weight * x + frost_weight * ice


@_register("fog")
def fog(x, param, rng):
    amount, decay = param
    h, w = x.shape[-2:]
    max_val = float(x.max())
    x = x + amount * _fractal_noise(h, w, rng, decay)[None]
    return x * max_val / (max_val + amount)


# ==================== DIGITAL ====================

@_register("brightness")
def brightness(x, offset, rng):
    return x + offset


@_register("contrast")
def contrast(x, factor, rng):
    mean = x.mean()
    return (x - mean) * factor + mean


@_register("elastic")
def elastic(x, displacement, rng):
    h, w = x.shape[-2:]
    field = torch.randn((2, h, w), generator=rng)
    field = _gaussian_blur(field, sigma=max(h, w) / 16)
    field = field / field.abs().amax(dim=(1, 2), keepdim=True).clamp(min=1e-12) * displacement
    ys = torch.linspace(-1.0, 1.0, h)[:, None].expand(h, w) + field[0] * 2 / h
    xs = torch.linspace(-1.0, 1.0, w)[None].expand(h, w) + field[1] * 2 / w
    grid = torch.stack([xs, ys], dim=-1)[None]
    return F.grid_sample(x[None], grid, mode="bilinear", padding_mode="reflection", align_corners=True)[0]


@_register("jpeg")
def jpeg(x, quality, rng):
    array = (x.clamp(0, 1).permute(1, 2, 0) * 255.0).round().to(torch.uint8).numpy()
    buffer = io.BytesIO()
    Image.fromarray(array).save(buffer, format="JPEG", quality=int(quality))
    buffer.seek(0)
    with Image.open(buffer) as decoded:
        out = np.asarray(decoded.convert("RGB"), dtype=np.float32) / 255.0
    return torch.from_numpy(out).permute(2, 0, 1)


@_register("pixelate")
def pixelate(x, block, rng):
    """Average over block x block cells (edge cells padded by replication), then expand back."""
    block = int(block)
    h, w = x.shape[-2:]
    padded = F.pad(x[None], (0, (-w) % block, 0, (-h) % block), mode="replicate")
    pooled = F.avg_pool2d(padded, block)
    return pooled.repeat_interleave(block, dim=-2).repeat_interleave(block, dim=-1)[0, :, :h, :w]
