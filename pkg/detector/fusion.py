"""
Fusion module.
Turns the 21 raw denoiser taps into a 4-level ResNet-shaped pyramid:
per-scale concatenation, a bottleneck to C_l = base * 2^(l-1) channels and
top-down skip connections.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Literal, Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

from core import ShapeError
from detector.diffusion_backbone import RawFeatureGroups

LEVELS = (1, 2, 3, 4)
PYRAMID_STRIDES = {1: 4, 2: 8, 3: 16, 4: 32}


@dataclass(frozen=True)
class FeaturePyramid:
    """Batched pyramid levels (B, C_l, H / 2^(l+1), W / 2^(l+1)), l = 1..4."""

    levels: dict[int, torch.Tensor]

    def __post_init__(self):
        if set(self.levels) != set(LEVELS):
            raise ShapeError(f"pyramid needs levels 1..4, got {sorted(self.levels)}")
        for l in (2, 3, 4):
            fine, coarse = self.levels[l - 1], self.levels[l]
            if coarse.shape[1] != 2 * fine.shape[1]:
                raise ShapeError(f"level {l} has {coarse.shape[1]} channels, expected {2 * fine.shape[1]}")
            if tuple(fine.shape[-2:]) != (2 * coarse.shape[-2], 2 * coarse.shape[-1]):
                raise ShapeError(f"level {l - 1} is not twice the size of level {l}")

    def __getitem__(self, level: int) -> torch.Tensor:
        return self.levels[level]

    def values(self) -> list[torch.Tensor]:
        return [self.levels[l] for l in LEVELS]

    def check_contract(self, height: int, width: int, base_channels: int = 256) -> None:
        for l in LEVELS:
            stride = PYRAMID_STRIDES[l]
            expected = (base_channels * 2 ** (l - 1), height // stride, width // stride)
            if tuple(self.levels[l].shape[1:]) != expected:
                raise ShapeError(f"level {l}: {tuple(self.levels[l].shape[1:])} != {expected}")

    def select(self, indices: Sequence[int]) -> "FeaturePyramid":
        index = torch.as_tensor(list(indices), dtype=torch.long)
        return FeaturePyramid({l: t.index_select(0, index) for l, t in self.levels.items()})


def pyramid_channels(level: int, base_channels: int = 256) -> int:
    return base_channels * 2 ** (level - 1)


def concat_scale(groups: Sequence[torch.Tensor]) -> torch.Tensor:
    """Concatenate same-scale taps along channels, in the order given."""
    if not groups:
        raise ShapeError("concat_scale needs at least one group")
    size = tuple(groups[0].shape[-2:])
    for g in groups:
        if tuple(g.shape[-2:]) != size:
            raise ShapeError(f"spatial mismatch: {tuple(g.shape[-2:])} vs {size}")
    if len(groups) == 1:
        return groups[0]
    return torch.cat(list(groups), dim=-3)


def collect_layer(raw: RawFeatureGroups, layer: int, collection: Literal["full", "res_last"] = "full") -> list[torch.Tensor]:
    if collection == "res_last":
        return [raw.res_groups[(layer, 3)]]
    return raw.layer(layer)


def _gn(channels: int) -> nn.GroupNorm:
    return nn.GroupNorm(math.gcd(32, channels), channels)


class Bottleneck(nn.Module):
    """1x1 reduce to out/4, 3x3, 1x1 expand, each normalized; projected shortcut."""

    def __init__(self, in_channels: int, out_channels: int):
        super().__init__()
        mid = max(out_channels // 4, 1)
        self.conv1 = nn.Conv2d(in_channels, mid, 1, bias=False)
        self.norm1 = _gn(mid)
        self.conv2 = nn.Conv2d(mid, mid, 3, padding=1, bias=False)
        self.norm2 = _gn(mid)
        self.conv3 = nn.Conv2d(mid, out_channels, 1, bias=False)
        self.norm3 = _gn(out_channels)
        self.shortcut = nn.Sequential(nn.Conv2d(in_channels, out_channels, 1, bias=False), _gn(out_channels))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = F.relu(self.norm1(self.conv1(x)))
        h = F.relu(self.norm2(self.conv2(h)))
        h = self.norm3(self.conv3(h))
        return F.relu(h + self.shortcut(x))


class TopDownUpsample(nn.Module):
    """U(.): 2x nearest upsample then a bias-free 1x1 projection halving channels."""

    def __init__(self, in_channels: int):
        super().__init__()
        self.proj = nn.Conv2d(in_channels, in_channels // 2, 1, bias=False)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.proj(F.interpolate(x, scale_factor=2.0, mode="nearest"))


class FeatureFusion(nn.Module):
    """
    Trainable fusion of raw taps into a FeaturePyramid.

    `tap_channels[l]` is the concatenated channel count of layer l. The raw
    taps sit at strides 8..64 (stride-8 latent), so every projected level is
    upsampled 2x to land on pyramid strides 4..32.
    """

    def __init__(self, tap_channels: dict[int, int], base_channels: int = 256, skips: bool = True):
        super().__init__()
        self.base_channels = base_channels
        self.skips = skips
        self.bottlenecks = nn.ModuleDict(
            {str(l): Bottleneck(tap_channels[l], pyramid_channels(l, base_channels)) for l in LEVELS}
        )
        self.upsamplers = nn.ModuleDict(
            {str(l): TopDownUpsample(pyramid_channels(l, base_channels)) for l in (2, 3, 4)}
        )

    @classmethod
    def for_backbone(cls, backbone, collection: str = "full", base_channels: int = 256, skips: bool = True):
        widths = backbone.layer_widths()
        taps = {}
        for l in LEVELS:
            count = 1 if collection == "res_last" else (6 if l <= 3 else 3)
            taps[l] = widths[l - 1] * count
        return cls(taps, base_channels=base_channels, skips=skips)

    def bottleneck_project(self, concatenated: torch.Tensor, level: int) -> torch.Tensor:
        if level not in LEVELS:
            raise ValueError(f"level must be in 1..4, got {level}")
        return self.bottlenecks[str(level)](concatenated)

    def build_pyramid(self, projected: dict[int, torch.Tensor]) -> FeaturePyramid:
        """F*_4 = F^p_4; F*_{l-1} = U(F*_l) + F^p_{l-1} (no U term when skips are off)."""
        if set(projected) != set(LEVELS):
            raise ShapeError(f"expected projected levels 1..4, got {sorted(projected)}")
        fused = {4: projected[4]}
        for l in (4, 3, 2):
            lower = projected[l - 1]
            if not self.skips:
                fused[l - 1] = lower
                continue
            up = self.upsamplers[str(l)](fused[l])
            if up.shape != lower.shape:
                raise ShapeError(f"skip from level {l} has shape {tuple(up.shape)}, level {l - 1} has {tuple(lower.shape)}")
            fused[l - 1] = up + lower
        return FeaturePyramid(fused)

    def forward(self, raw: RawFeatureGroups, collection: str = "full") -> FeaturePyramid:
        projected = {}
        for l in LEVELS:
            concatenated = concat_scale(collect_layer(raw, l, collection))
            projected[l] = F.interpolate(self.bottleneck_project(concatenated, l), scale_factor=2.0, mode="nearest")
        return self.build_pyramid(projected)
