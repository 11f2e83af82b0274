"""
Diffusion backbone module.
Forward-diffusion noising, a frozen miniature text-conditioned UNet, a toy
prompt encoder, and single-step collection of the 12 residual and 9
cross-attention taps from the UNet's upsampling path.
"""
from __future__ import annotations

import logging
import math
import re
import threading
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import Literal, Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F
import yaml
from pydantic import BaseModel, ConfigDict, model_validator

from core import ConfigError, ImageTensor, ShapeError
from storage import load_weights
from utils import content_hash, seeded_rng

logger = logging.getLogger(__name__)

LATENT_STRIDE = 8
RES_KEYS = tuple((layer, block) for layer in (1, 2, 3, 4) for block in (1, 2, 3))
ATT_KEYS = tuple((layer, block) for layer in (1, 2, 3) for block in (1, 2, 3))
PROMPT_TEMPLATE = "a photo of {}"
UNCONDITIONAL_PROMPT = ""


# ==================== NOISE SCHEDULE ====================

@dataclass(frozen=True)
class NoiseSchedule:
    """Per-step betas and their cumulative products; step t is 1-based."""

    betas: torch.Tensor
    alpha_bars: torch.Tensor

    @property
    def num_steps(self) -> int:
        return int(self.betas.shape[0])

    def alpha_bar(self, t: int) -> float:
        if not 1 <= int(t) <= self.num_steps:
            raise ValueError(f"timestep {t} outside the schedule [1, {self.num_steps}]")
        return float(self.alpha_bars[int(t) - 1])


def build_noise_schedule(
    num_steps: int,
    beta_start: float,
    beta_end: float,
    *,
    allow_degenerate: bool = False,
) -> NoiseSchedule:
    """
    Linear beta schedule with alpha_bar_t = prod_{i<=t} (1 - beta_i).
    `allow_degenerate` admits beta = 0 (no noise ever added), for tests only.
    """
    if num_steps < 1:
        raise ValueError(f"num_steps must be >= 1, got {num_steps}")
    low_ok = beta_start >= 0.0 if allow_degenerate else beta_start > 0.0
    if not (low_ok and beta_start <= beta_end < 1.0):
        raise ValueError(f"invalid beta range [{beta_start}, {beta_end}]")
    betas = torch.linspace(beta_start, beta_end, num_steps, dtype=torch.float64)
    alpha_bars = torch.cumprod(1.0 - betas, dim=0)
    if not allow_degenerate and num_steps > 1 and not bool((alpha_bars[1:] < alpha_bars[:-1]).all()):
        raise ValueError("alpha_bar must be strictly decreasing")
    return NoiseSchedule(betas=betas, alpha_bars=alpha_bars)


def forward_diffuse(x0: torch.Tensor, t: int, noise: torch.Tensor, schedule: NoiseSchedule) -> torch.Tensor:
    """Closed-form q(x_t | x_0): sqrt(abar_t) * x0 + sqrt(1 - abar_t) * noise."""
    if x0.shape != noise.shape:
        raise ShapeError(f"x0 {tuple(x0.shape)} and noise {tuple(noise.shape)} differ in shape")
    alpha_bar = schedule.alpha_bar(t)
    return math.sqrt(alpha_bar) * x0 + math.sqrt(1.0 - alpha_bar) * noise


# ==================== ARCHITECTURE FILE ====================

class UNetArchitecture(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    backend: Literal["mini", "stable-diffusion"] = "mini"
    sd_model_id: str = "runwayml/stable-diffusion-v1-5"
    latent_channels: int = 4
    encoder_channels: tuple[int, int, int] = (16, 32, 64)
    layer_channels: tuple[int, int, int, int] = (32, 64, 96, 96)
    blocks_per_layer: int = 3
    attention_layers: tuple[int, ...] = (1, 2, 3)
    attention_heads: int = 2
    time_dim: int = 64
    text_dim: int = 32
    text_length: int = 16
    vocab_buckets: int = 512
    norm_groups: int = 8

    @model_validator(mode="after")
    def _check_topology(self):
        if self.blocks_per_layer != 3 or tuple(self.attention_layers) != (1, 2, 3):
            raise ValueError("the tap topology requires 3 blocks per layer and attention on layers 1-3")
        for width in self.layer_channels:
            if width % self.attention_heads:
                raise ValueError(f"layer width {width} not divisible by {self.attention_heads} heads")
        return self


def load_architecture(path: str | Path) -> UNetArchitecture:
    path = Path(path)
    try:
        payload = yaml.safe_load(path.read_text(encoding="utf-8")) or {}
        return UNetArchitecture.model_validate(payload)
    except (OSError, yaml.YAMLError, ValueError) as e:
        raise ConfigError(f"invalid denoiser architecture file {path}: {e}") from e


# ==================== TOY TEXT ENCODER ====================

@dataclass(frozen=True)
class ConditionEmbedding:
    """Token embeddings (L, d_text), their pooled mean and the prompt they came from."""

    tokens: torch.Tensor
    pooled: torch.Tensor
    source_prompt: str


def stack_conditions(conds: Sequence[ConditionEmbedding]) -> tuple[torch.Tensor, torch.Tensor]:
    return torch.stack([c.tokens for c in conds]), torch.stack([c.pooled for c in conds])


def prompt_for(class_names: Sequence[str]) -> str:
    return PROMPT_TEMPLATE.format(", ".join(class_names)) if class_names else UNCONDITIONAL_PROMPT


class PromptEncoder(nn.Module):
    """
    Hash-embedding text encoder over a fixed prompt template.
    Tokens map to rows of a seeded table through crc32, so embeddings are
    deterministic per prompt.
    """

    def __init__(self, categories: Sequence[str], text_dim: int, text_length: int, buckets: int, seed: int):
        super().__init__()
        self.categories = tuple(categories)
        self.text_length = text_length
        self.buckets = buckets
        table = torch.randn(buckets, text_dim, generator=seeded_rng(seed, "text-encoder")) / math.sqrt(text_dim)
        self.register_buffer("table", table)

    def canonical(self, class_names: Sequence[str]) -> list[str]:
        """Deduplicate and order class names by category id."""
        unknown = sorted(set(class_names) - set(self.categories))
        if unknown:
            raise ValueError(f"unknown class names: {unknown}")
        present = set(class_names)
        return [name for name in self.categories if name in present]

    def _token_ids(self, prompt: str) -> tuple[torch.Tensor, list[str]]:
        words = ["<bos>", *re.findall(r"[a-z0-9]+", prompt.lower()), "<eos>"][: self.text_length]
        words += ["<pad>"] * (self.text_length - len(words))
        return torch.tensor([zlib.crc32(word.encode("utf-8")) % self.buckets for word in words]), words

    def encode_prompt(self, class_names: Sequence[str]) -> ConditionEmbedding:
        prompt = prompt_for(self.canonical(class_names))
        ids, words = self._token_ids(prompt)
        tokens = self.table[ids]
        content = torch.tensor([word != "<pad>" for word in words])
        pooled = tokens[content].mean(dim=0)
        return ConditionEmbedding(tokens=tokens, pooled=pooled, source_prompt=prompt)

    def unconditional(self) -> ConditionEmbedding:
        return self.encode_prompt([])


# ==================== MINI UNET ====================

def _norm(channels: int, groups: int) -> nn.GroupNorm:
    return nn.GroupNorm(math.gcd(groups, channels), channels)


def timestep_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float32) / half)
    args = t.float()[:, None] * freqs[None]
    return torch.cat([torch.cos(args), torch.sin(args)], dim=-1)


class ResBlock(nn.Module):
    def __init__(self, in_channels: int, out_channels: int, time_dim: int, groups: int):
        super().__init__()
        self.norm1 = _norm(in_channels, groups)
        self.conv1 = nn.Conv2d(in_channels, out_channels, 3, padding=1)
        self.time_proj = nn.Linear(time_dim, out_channels)
        self.norm2 = _norm(out_channels, groups)
        self.conv2 = nn.Conv2d(out_channels, out_channels, 3, padding=1)
        self.skip = nn.Conv2d(in_channels, out_channels, 1) if in_channels != out_channels else nn.Identity()

    def forward(self, x: torch.Tensor, temb: torch.Tensor) -> torch.Tensor:
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.time_proj(F.silu(temb))[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return self.skip(x) + h


class CrossAttentionBlock(nn.Module):
    """Spatial transformer: self-attention, cross-attention on text, feed-forward."""

    def __init__(self, channels: int, text_dim: int, heads: int, groups: int):
        super().__init__()
        self.norm = _norm(channels, groups)
        self.proj_in = nn.Conv2d(channels, channels, 1)
        self.ln1 = nn.LayerNorm(channels)
        self.self_attn = nn.MultiheadAttention(channels, heads, batch_first=True)
        self.ln2 = nn.LayerNorm(channels)
        self.cross_attn = nn.MultiheadAttention(channels, heads, kdim=text_dim, vdim=text_dim, batch_first=True)
        self.ln3 = nn.LayerNorm(channels)
        self.ff = nn.Sequential(nn.Linear(channels, 4 * channels), nn.GELU(), nn.Linear(4 * channels, channels))
        self.proj_out = nn.Conv2d(channels, channels, 1)

    def forward(self, x: torch.Tensor, context: torch.Tensor) -> torch.Tensor:
        b, c, h, w = x.shape
        seq = self.proj_in(self.norm(x)).flatten(2).transpose(1, 2)
        q = self.ln1(seq)
        seq = seq + self.self_attn(q, q, q, need_weights=False)[0]
        seq = seq + self.cross_attn(self.ln2(seq), context, context, need_weights=False)[0]
        seq = seq + self.ff(self.ln3(seq))
        return x + self.proj_out(seq.transpose(1, 2).reshape(b, c, h, w))


class DownLayer(nn.Module):
    def __init__(self, in_channels, out_channels, arch: UNetArchitecture, attention: bool, downsample: bool):
        super().__init__()
        self.resnet = ResBlock(in_channels, out_channels, arch.time_dim, arch.norm_groups)
        self.attention = (
            CrossAttentionBlock(out_channels, arch.text_dim, arch.attention_heads, arch.norm_groups) if attention else None
        )
        self.downsample = nn.Conv2d(out_channels, out_channels, 3, stride=2, padding=1) if downsample else None

    def forward(self, h, temb, context):
        h = self.resnet(h, temb)
        if self.attention is not None:
            h = self.attention(h, context)
        skip = h
        if self.downsample is not None:
            h = self.downsample(h)
        return skip, h


class UpLayer(nn.Module):
    """Three residual blocks (first one takes the skip), optional attention after each, optional 2x upsample."""

    def __init__(self, in_channels, skip_channels, out_channels, arch: UNetArchitecture, attention: bool, upsample: bool):
        super().__init__()
        self.resnets = nn.ModuleList(
            ResBlock(in_channels + skip_channels if k == 0 else out_channels, out_channels, arch.time_dim, arch.norm_groups)
            for k in range(arch.blocks_per_layer)
        )
        self.attentions = nn.ModuleList(
            CrossAttentionBlock(out_channels, arch.text_dim, arch.attention_heads, arch.norm_groups)
            for _ in range(arch.blocks_per_layer if attention else 0)
        )
        self.upsample = nn.Conv2d(out_channels, out_channels, 3, padding=1) if upsample else None

    def forward(self, h, skip, temb, context):
        for k, resnet in enumerate(self.resnets):
            h = resnet(torch.cat([h, skip], dim=1) if k == 0 else h, temb)
            if len(self.attentions):
                h = self.attentions[k](h, context)
        if self.upsample is not None:
            h = self.upsample(F.interpolate(h, scale_factor=2.0, mode="nearest"))
        return h


class MiniUNet(nn.Module):
    """Noise predictor with a four-level down path, a middle block and a four-level up path."""

    def __init__(self, arch: UNetArchitecture):
        super().__init__()
        widths = arch.layer_channels
        self.time_dim = arch.time_dim
        self.time_mlp = nn.Sequential(
            nn.Linear(arch.time_dim, arch.time_dim), nn.SiLU(), nn.Linear(arch.time_dim, arch.time_dim)
        )
        self.pooled_proj = nn.Linear(arch.text_dim, arch.time_dim)
        self.conv_in = nn.Conv2d(arch.latent_channels, widths[0], 3, padding=1)

        self.down = nn.ModuleList()
        current = widths[0]
        for i, width in enumerate(widths):
            self.down.append(DownLayer(current, width, arch, attention=(i + 1) in arch.attention_layers, downsample=i < 3))
            current = width

        self.mid_res1 = ResBlock(current, current, arch.time_dim, arch.norm_groups)
        self.mid_attn = CrossAttentionBlock(current, arch.text_dim, arch.attention_heads, arch.norm_groups)
        self.mid_res2 = ResBlock(current, current, arch.time_dim, arch.norm_groups)

        self.up = nn.ModuleDict()
        for layer in (4, 3, 2, 1):
            width = widths[layer - 1]
            self.up[str(layer)] = UpLayer(
                current, width, width, arch, attention=layer in arch.attention_layers, upsample=layer > 1
            )
            current = width

        self.out = nn.Sequential(
            _norm(current, arch.norm_groups), nn.SiLU(), nn.Conv2d(current, arch.latent_channels, 3, padding=1)
        )

    def tap_modules(self) -> tuple[dict[tuple[int, int], nn.Module], dict[tuple[int, int], nn.Module]]:
        res = {(layer, k + 1): self.up[str(layer)].resnets[k] for layer, _ in RES_KEYS[::3] for k in range(3)}
        att = {(layer, k + 1): self.up[str(layer)].attentions[k] for layer, _ in ATT_KEYS[::3] for k in range(3)}
        return res, att

    def forward(self, z_t, t, context, pooled):
        temb = self.time_mlp(timestep_embedding(t, self.time_dim)) + self.pooled_proj(pooled)
        h = self.conv_in(z_t)
        skips = {}
        for i, layer in enumerate(self.down):
            skips[i + 1], h = layer(h, temb, context)
        h = self.mid_res2(self.mid_attn(self.mid_res1(h, temb), context), temb)
        for layer in (4, 3, 2, 1):
            h = self.up[str(layer)](h, skips[layer], temb, context)
        return self.out(h)


class LatentEncoder(nn.Module):
    """Fixed stride-8 convolutional encoder standing in for the latent VAE."""

    def __init__(self, arch: UNetArchitecture):
        super().__init__()
        c1, c2, c3 = arch.encoder_channels
        self.net = nn.Sequential(
            nn.Conv2d(3, c1, 3, stride=2, padding=1), nn.SiLU(),
            nn.Conv2d(c1, c2, 3, stride=2, padding=1), nn.SiLU(),
            nn.Conv2d(c2, c3, 3, stride=2, padding=1), nn.SiLU(),
            nn.Conv2d(c3, arch.latent_channels, 1),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.net(x)


# ==================== FEATURE COLLECTION ====================

@dataclass(frozen=True)
class RawFeatureGroups:
    """
    The 12 residual-block and 9 cross-attention taps, keyed by (layer, block).
    Tensors are batched (B, C, H_l, W_l); layer 1 is the finest.
    """

    res_groups: dict[tuple[int, int], torch.Tensor]
    att_groups: dict[tuple[int, int], torch.Tensor]

    def __post_init__(self):
        if set(self.res_groups) != set(RES_KEYS) or set(self.att_groups) != set(ATT_KEYS):
            raise ShapeError(
                f"expected 12 residual and 9 attention groups, got {len(self.res_groups)} and {len(self.att_groups)}"
            )
        sizes = {}
        for (layer, _), tensor in [*self.res_groups.items(), *self.att_groups.items()]:
            size = (tensor.shape[0], *tensor.shape[-2:])
            if sizes.setdefault(layer, size) != size:
                raise ShapeError(f"groups of layer {layer} disagree on batch/spatial size")
        heights = [sizes[layer][1] for layer in (1, 2, 3, 4)]
        if not all(a > b for a, b in zip(heights, heights[1:])):
            raise ShapeError(f"layer heights must strictly decrease, got {heights}")

    def layer(self, layer: int) -> list[torch.Tensor]:
        """Residual blocks k=1..3, then attention blocks k=1..3."""
        res = [self.res_groups[(layer, k)] for k in (1, 2, 3)]
        att = [self.att_groups[(layer, k)] for k in (1, 2, 3)] if layer <= 3 else []
        return res + att

    def map(self, fn) -> "RawFeatureGroups":
        return RawFeatureGroups(
            {key: fn(t) for key, t in self.res_groups.items()},
            {key: fn(t) for key, t in self.att_groups.items()},
        )

    def select(self, indices: Sequence[int]) -> "RawFeatureGroups":
        index = torch.as_tensor(list(indices), dtype=torch.long)
        return self.map(lambda t: t.index_select(0, index))


class DiffusionBackbone(nn.Module):
    """
    Frozen encoder + denoiser + prompt encoder.
    `denoiser_calls` counts per-image denoiser evaluations; it is guarded by a
    lock and taps are collected into thread-local storage, so concurrent
    forward passes over the shared frozen weights do not interfere.
    """

    def __init__(self, arch: UNetArchitecture, schedule: NoiseSchedule, categories: Sequence[str], seed: int):
        super().__init__()
        self.arch = arch
        self.schedule = schedule
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            self.encoder = LatentEncoder(arch)
            self.unet = MiniUNet(arch)
        self.prompts = PromptEncoder(categories, arch.text_dim, arch.text_length, arch.vocab_buckets, seed)
        self._freeze_and_tap(*self.unet.tap_modules())

    def _freeze_and_tap(self, res_modules: dict, att_modules: dict) -> None:
        self.requires_grad_(False)
        super().train(False)
        self._lock = threading.Lock()
        self._local = threading.local()
        self._denoiser_calls = 0
        for key, module in res_modules.items():
            module.register_forward_hook(self._make_hook("res", key))
        for key, module in att_modules.items():
            module.register_forward_hook(self._make_hook("att", key))

    def _encode(self, x: torch.Tensor) -> torch.Tensor:
        return self.encoder(x)

    def _run_denoiser(self, z_t, timesteps, context, pooled) -> None:
        self.unet(z_t, timesteps, context, pooled)

    def train(self, mode: bool = True):
        # weights stay frozen and in eval mode regardless of the owner's mode
        return super().train(False)

    def _make_hook(self, kind, key):
        def hook(module, inputs, output):
            sink = getattr(self._local, "sink", None)
            if sink is not None:
                sink[kind][key] = output

        return hook

    @property
    def denoiser_calls(self) -> int:
        return self._denoiser_calls

    def reset_counter(self) -> None:
        with self._lock:
            self._denoiser_calls = 0

    def layer_widths(self) -> tuple[int, int, int, int]:
        """Channel width of every tap at layers 1..4."""
        return tuple(self.arch.layer_channels)

    def weights_hash(self) -> str:
        return content_hash(self.state_dict())

    def check_input(self, x: torch.Tensor) -> None:
        if x.ndim != 4 or x.shape[1] != 3:
            raise ShapeError(f"expected a (B, 3, H, W) batch, got {tuple(x.shape)}")
        if x.shape[-1] % 64 or x.shape[-2] % 64:
            raise ShapeError(f"image size {tuple(x.shape[-2:])} must be divisible by 64")

    def draw_noise(self, batch: int, height: int, width: int, stream) -> torch.Tensor:
        """Latent-shaped standard normal noise from one generator or one generator per image."""
        shape = (self.arch.latent_channels, height // LATENT_STRIDE, width // LATENT_STRIDE)
        if isinstance(stream, torch.Generator):
            return torch.randn((batch, *shape), generator=stream)
        streams = list(stream)
        if len(streams) != batch:
            raise ShapeError(f"{len(streams)} noise streams for a batch of {batch}")
        return torch.stack([torch.randn(shape, generator=g) for g in streams])

    def _conditions(self, cond, batch: int) -> tuple[torch.Tensor, torch.Tensor]:
        if isinstance(cond, ConditionEmbedding):
            cond = [cond] * batch
        if len(cond) != batch:
            raise ShapeError(f"{len(cond)} conditions for a batch of {batch}")
        return stack_conditions(cond)

    def _denoise(self, z_t, t, context, pooled) -> tuple[dict, dict]:
        with self._lock:
            self._denoiser_calls += z_t.shape[0]
        self._local.sink = {"res": {}, "att": {}}
        try:
            timesteps = torch.full((z_t.shape[0],), int(t), dtype=torch.long)
            self._run_denoiser(z_t, timesteps, context.to(z_t.dtype), pooled.to(z_t.dtype))
            sink = self._local.sink
        finally:
            self._local.sink = None
        return sink["res"], sink["att"]

    def _prepare(self, x, t, noise_stream):
        if isinstance(x, ImageTensor):
            x = x.chw().unsqueeze(0)
        self.check_input(x)
        if not 1 <= int(t) <= self.schedule.num_steps:
            raise ValueError(f"timestep {t} outside the schedule [1, {self.schedule.num_steps}]")
        z = self._encode(x)
        if isinstance(noise_stream, torch.Tensor):
            noise = noise_stream
        else:
            noise = self.draw_noise(x.shape[0], x.shape[-2], x.shape[-1], noise_stream)
        if noise.shape != z.shape:
            raise ShapeError(f"noise {tuple(noise.shape)} does not match latent {tuple(z.shape)}")
        return x, z, noise

    @torch.no_grad()
    def extract_features(self, x, t: int, cond, noise_stream, *, add_noise: bool = True) -> RawFeatureGroups:
        """
        Encode, noise to step t and run the denoiser exactly once per image.
        `noise_stream` is a generator, one generator per image, or a ready
        latent-shaped noise tensor.
        """
        x, z, noise = self._prepare(x, t, noise_stream)
        context, pooled = self._conditions(cond, x.shape[0])
        z_t = forward_diffuse(z, t, noise, self.schedule) if add_noise else z
        res, att = self._denoise(z_t, t, context, pooled)
        return RawFeatureGroups(res, att)

    @torch.no_grad()
    def extract_features_multistep(
        self, x, timesteps: Sequence[int], cond, noise_stream, *, add_noise: bool = True
    ) -> RawFeatureGroups:
        """Multi-step baseline: taps averaged over several timesteps (one denoiser call each)."""
        x, z, noise = self._prepare(x, timesteps[0], noise_stream)
        context, pooled = self._conditions(cond, x.shape[0])
        res_sum, att_sum = {}, {}
        for t in timesteps:
            z_t = forward_diffuse(z, t, noise, self.schedule) if add_noise else z
            res, att = self._denoise(z_t, t, context, pooled)
            for key, value in res.items():
                res_sum[key] = res_sum.get(key, 0) + value
            for key, value in att.items():
                att_sum[key] = att_sum.get(key, 0) + value
        n = float(len(timesteps))
        return RawFeatureGroups({k: v / n for k, v in res_sum.items()}, {k: v / n for k, v in att_sum.items()})


def multistep_timesteps(t: int, steps: int) -> list[int]:
    """`steps` evenly spaced timesteps ending at t (t, t - t/steps, ...)."""
    return sorted({max(1, round(t * (i + 1) / steps)) for i in range(steps)}, reverse=True)


def build_backbone(config, categories: Sequence[str]) -> nn.Module:
    """Construct the frozen backbone described by an ExperimentConfig."""
    arch = load_architecture(config.diffusion.architecture)
    schedule = build_noise_schedule(config.schedule.num_steps, config.schedule.beta_start, config.schedule.beta_end)
    if arch.backend == "stable-diffusion":
        from detector.sd_backbone import StableDiffusionBackbone

        return StableDiffusionBackbone(arch, schedule, categories)
    backbone = DiffusionBackbone(arch, schedule, categories, seed=config.diffusion.weights_seed)
    if config.diffusion.weights is not None:
        backbone.load_state_dict(load_weights(config.diffusion.weights))
        backbone.requires_grad_(False)
    logger.info("Denoiser ready: backend=%s hash=%s", arch.backend, backbone.weights_hash()[:12])
    return backbone
