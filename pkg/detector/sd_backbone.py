"""
Stable Diffusion backend for the diffusion backbone.
Needs the optional packages in requirements-sd.txt; pretrained weights are
fetched by diffusers on first use.
"""
from __future__ import annotations

import logging
from typing import Sequence

import torch
import torch.nn as nn

from core import ConfigError
from detector.diffusion_backbone import (
    ConditionEmbedding,
    DiffusionBackbone,
    NoiseSchedule,
    UNetArchitecture,
    prompt_for,
)

logger = logging.getLogger(__name__)

# SD latents are scaled by this factor before the UNet sees them
VAE_SCALE = 0.18215


class ClipPromptEncoder(nn.Module):
    """CLIP text encoder behind the same canonical prompt template as the toy encoder."""

    def __init__(self, categories: Sequence[str], tokenizer, text_model):
        super().__init__()
        self.categories = tuple(categories)
        self.tokenizer = tokenizer
        self.text_model = text_model

    def canonical(self, class_names: Sequence[str]) -> list[str]:
        unknown = sorted(set(class_names) - set(self.categories))
        if unknown:
            raise ValueError(f"unknown class names: {unknown}")
        present = set(class_names)
        return [name for name in self.categories if name in present]

    @torch.no_grad()
    def encode_prompt(self, class_names: Sequence[str]) -> ConditionEmbedding:
        prompt = prompt_for(self.canonical(class_names))
        ids = self.tokenizer(
            prompt,
            padding="max_length",
            max_length=self.tokenizer.model_max_length,
            truncation=True,
            return_tensors="pt",
        ).input_ids
        output = self.text_model(ids)
        return ConditionEmbedding(
            tokens=output.last_hidden_state[0], pooled=output.pooler_output[0], source_prompt=prompt
        )

    def unconditional(self) -> ConditionEmbedding:
        return self.encode_prompt([])


class StableDiffusionBackbone(DiffusionBackbone):
    """
    Same tap contract as the mini denoiser, on SD-1.x weights.
    up_blocks[i] is pyramid layer 4 - i; up_blocks[0] carries no attention.
    """

    def __init__(self, arch: UNetArchitecture, schedule: NoiseSchedule, categories: Sequence[str]):
        nn.Module.__init__(self)
        try:
            from diffusers import AutoencoderKL, UNet2DConditionModel
            from transformers import CLIPTextModel, CLIPTokenizer
        except ImportError as e:
            raise ConfigError("the stable-diffusion backend needs `pip install -r requirements-sd.txt`") from e

        logger.info("Loading %s", arch.sd_model_id)
        self.arch = arch
        self.schedule = schedule
        self.vae = AutoencoderKL.from_pretrained(arch.sd_model_id, subfolder="vae")
        self.unet = UNet2DConditionModel.from_pretrained(arch.sd_model_id, subfolder="unet")
        self.prompts = ClipPromptEncoder(
            categories,
            CLIPTokenizer.from_pretrained(arch.sd_model_id, subfolder="tokenizer"),
            CLIPTextModel.from_pretrained(arch.sd_model_id, subfolder="text_encoder"),
        )

        res, att = {}, {}
        for i, block in enumerate(self.unet.up_blocks):
            layer = 4 - i
            for k, resnet in enumerate(block.resnets):
                res[(layer, k + 1)] = resnet
            for k, attention in enumerate(getattr(block, "attentions", None) or []):
                att[(layer, k + 1)] = attention
        self._freeze_and_tap(res, att)

    def layer_widths(self) -> tuple[int, int, int, int]:
        return tuple(self.unet.config.block_out_channels)

    def _encode(self, x: torch.Tensor) -> torch.Tensor:
        return self.vae.encode(2.0 * x - 1.0).latent_dist.mean * VAE_SCALE

    def _run_denoiser(self, z_t, timesteps, context, pooled) -> None:
        self.unet(z_t, timesteps, encoder_hidden_states=context)

    def _make_hook(self, kind, key):
        def hook(module, inputs, output):
            sink = getattr(self._local, "sink", None)
            if sink is not None:
                # Transformer2DModel returns a ModelOutput
                if isinstance(output, tuple):
                    output = output[0]
                sink[kind][key] = output.sample if hasattr(output, "sample") else output

        return hook
