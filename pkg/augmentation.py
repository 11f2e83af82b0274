"""
Augmentation module.
Image-level transforms (colour jitter, horizontal flip, scale) with
box-consistent geometry, and domain-level transforms (Fourier amplitude swap,
histogram matching, moment matching) against a reference image.
"""
from __future__ import annotations

import logging
import math
from typing import Sequence

import numpy as np
import torch
from torchvision import tv_tensors
from torchvision.transforms import InterpolationMode
from torchvision.transforms.v2 import functional as TF

from config import AugmentationPolicy
from core import BoxSet, ImageTensor, ShapeError
from utils import randint, uniform

logger = logging.getLogger(__name__)

MIN_BOX_SIZE = 1.0


# ==================== DOMAIN-LEVEL ====================

def fda_swap(source: ImageTensor, reference: ImageTensor, beta: float) -> ImageTensor:
    """
    Replace the centred low-frequency amplitude square of `source` with the
    reference's, keeping the source phase. The square has half-width
    floor(beta * min(H, W)) around the zero-frequency bin; beta = 0 swaps nothing.
    """
    if source.data.shape != reference.data.shape:
        raise ShapeError(f"FDA needs equal sizes, got {tuple(source.data.shape)} and {tuple(reference.data.shape)}")
    if not 0.0 <= beta <= 0.5:
        raise ValueError(f"beta must lie in [0, 0.5], got {beta}")
    if beta == 0.0:
        return source

    src = source.chw().to(torch.float64)
    ref = reference.chw().to(torch.float64)
    fft_src = torch.fft.fftshift(torch.fft.fft2(src), dim=(-2, -1))
    fft_ref = torch.fft.fftshift(torch.fft.fft2(ref), dim=(-2, -1))
    amplitude, phase = fft_src.abs(), fft_src.angle()

    h, w = src.shape[-2:]
    b = int(math.floor(beta * min(h, w)))
    cy, cx = h // 2, w // 2
    y0, y1 = max(cy - b, 0), min(cy + b + 1, h)
    x0, x1 = max(cx - b, 0), min(cx + b + 1, w)
    amplitude[:, y0:y1, x0:x1] = fft_ref.abs()[:, y0:y1, x0:x1]

    mixed = torch.polar(amplitude, phase)
    out = torch.fft.ifft2(torch.fft.ifftshift(mixed, dim=(-2, -1))).real
    return ImageTensor.from_chw(out.clamp(0.0, 1.0).to(source.data.dtype))


def _match_channel(source: np.ndarray, reference: np.ndarray) -> np.ndarray:
    src_values, src_index, src_counts = np.unique(source.ravel(), return_inverse=True, return_counts=True)
    ref_values, ref_counts = np.unique(reference.ravel(), return_counts=True)
    src_quantiles = np.cumsum(src_counts) / source.size
    ref_quantiles = np.cumsum(ref_counts) / reference.size
    mapped = np.interp(src_quantiles, ref_quantiles, ref_values)
    return mapped[src_index].reshape(source.shape)


def histogram_match(source: ImageTensor, reference: ImageTensor) -> ImageTensor:
    """Per-channel monotone CDF mapping of source intensities onto the reference's."""
    src = source.data.detach().cpu().numpy().astype(np.float64)
    ref = reference.data.detach().cpu().numpy().astype(np.float64)
    matched = np.stack([_match_channel(src[..., c], ref[..., c]) for c in range(3)], axis=-1)
    return ImageTensor(torch.from_numpy(matched).to(source.data.dtype).clamp(0.0, 1.0))


def pixel_distribution_match(source: ImageTensor, reference: ImageTensor, clip: bool = True) -> torch.Tensor | ImageTensor:
    """
    Per-channel affine map matching mean and standard deviation to the
    reference. A constant source channel is filled with the reference mean.
    With clip=False the raw float64 (H, W, 3) tensor is returned.
    """
    src = source.data.to(torch.float64)
    ref = reference.data.to(torch.float64)
    src_mean, src_std = src.mean(dim=(0, 1)), src.std(dim=(0, 1), unbiased=False)
    ref_mean, ref_std = ref.mean(dim=(0, 1)), ref.std(dim=(0, 1), unbiased=False)
    out = torch.empty_like(src)
    for c in range(3):
        if float(src_std[c]) == 0.0:
            out[..., c] = ref_mean[c]
        else:
            out[..., c] = (src[..., c] - src_mean[c]) / src_std[c] * ref_std[c] + ref_mean[c]
    if not clip:
        return out
    return ImageTensor(out.clamp(0.0, 1.0).to(source.data.dtype))


# ==================== IMAGE-LEVEL ====================

def _to_tv(image: ImageTensor, boxes: BoxSet):
    chw = tv_tensors.Image(image.chw())
    bbs = tv_tensors.BoundingBoxes(boxes.boxes.clone(), format="XYXY", canvas_size=(image.height, image.width))
    return chw, bbs


def _drop_vanished(boxes: torch.Tensor, classes: torch.Tensor, height: int, width: int) -> BoxSet:
    """Clip to the canvas and drop each box (with its label) that lost its extent."""
    if boxes.shape[0] == 0:
        return BoxSet.empty()
    boxes = boxes.clone()
    boxes[:, 0::2] = boxes[:, 0::2].clamp(0, width)
    boxes[:, 1::2] = boxes[:, 1::2].clamp(0, height)
    keep = ((boxes[:, 2] - boxes[:, 0]) >= MIN_BOX_SIZE) & ((boxes[:, 3] - boxes[:, 1]) >= MIN_BOX_SIZE)
    return BoxSet(boxes[keep], classes[keep])


def hflip(image: ImageTensor, boxes: BoxSet) -> tuple[ImageTensor, BoxSet]:
    chw, bbs = _to_tv(image, boxes)
    out_boxes = TF.horizontal_flip(bbs)
    return ImageTensor.from_chw(TF.horizontal_flip(chw).as_subclass(torch.Tensor)), BoxSet(
        out_boxes.as_subclass(torch.Tensor), boxes.classes
    )


def rescale(image: ImageTensor, boxes: BoxSet, factor: float, interpolation: str = "bilinear") -> tuple[ImageTensor, BoxSet]:
    """Zoom about the image centre by `factor`, keeping the canvas size."""
    chw, bbs = _to_tv(image, boxes)
    mode = InterpolationMode.NEAREST if interpolation == "nearest" else InterpolationMode.BILINEAR
    kwargs = dict(angle=0.0, translate=[0.0, 0.0], scale=factor, shear=[0.0, 0.0])
    out = TF.affine(chw, interpolation=mode, **kwargs).as_subclass(torch.Tensor)
    out_boxes = TF.affine(bbs, **kwargs).as_subclass(torch.Tensor)
    return ImageTensor.clipped(out.permute(1, 2, 0)), _drop_vanished(out_boxes, boxes.classes, image.height, image.width)


def color_jitter(image: ImageTensor, policy: AugmentationPolicy, rng: torch.Generator) -> ImageTensor:
    chw = image.chw()
    chw = TF.adjust_brightness(chw, uniform(rng, 1.0 - policy.brightness, 1.0 + policy.brightness))
    chw = TF.adjust_contrast(chw, uniform(rng, 1.0 - policy.contrast, 1.0 + policy.contrast))
    chw = TF.adjust_saturation(chw, uniform(rng, 1.0 - policy.saturation, 1.0 + policy.saturation))
    return ImageTensor.clipped(chw.permute(1, 2, 0))


def image_level_aug(
    image: ImageTensor, boxes: BoxSet, policy: AugmentationPolicy, rng: torch.Generator
) -> tuple[ImageTensor, BoxSet]:
    """Colour jitter, horizontal flip and scale, each applied with its policy probability."""
    if uniform(rng) < policy.color_prob:
        image = color_jitter(image, policy, rng)
    if uniform(rng) < policy.flip_prob:
        image, boxes = hflip(image, boxes)
    if uniform(rng) < policy.scale_prob:
        low, high = policy.scale_range
        factor = math.exp(uniform(rng, math.log(low), math.log(high)))
        image, boxes = rescale(image, boxes, factor, policy.interpolation)
    return image, boxes


def domain_level_aug(
    image: ImageTensor, reference: ImageTensor, policy: AugmentationPolicy, rng: torch.Generator
) -> ImageTensor:
    if uniform(rng) < policy.fda_prob:
        image = fda_swap(image, reference, policy.fda_beta)
    if uniform(rng) < policy.histogram_prob:
        image = histogram_match(image, reference)
    if uniform(rng) < policy.pixel_dist_prob:
        image = pixel_distribution_match(image, reference)
    return image


def augment_batch(
    images: Sequence[ImageTensor],
    boxes: Sequence[BoxSet],
    policy: AugmentationPolicy,
    rng: torch.Generator,
    references: Sequence[ImageTensor] | None = None,
    domain_aug: bool = True,
) -> tuple[list[ImageTensor], list[BoxSet]]:
    """
    Image-level then domain-level augmentation. Domain references come from
    `references` when given (DA: the target pool), otherwise from the other
    images of the same batch (DG).
    """
    out_images, out_boxes = [], []
    for i, (image, box_set) in enumerate(zip(images, boxes)):
        image, box_set = image_level_aug(image, box_set, policy, rng)
        if domain_aug:
            if references:
                reference = references[randint(rng, 0, len(references))]
            elif len(images) > 1:
                j = randint(rng, 0, len(images) - 1)
                reference = images[j + 1 if j >= i else j]
            else:
                reference = None
            if reference is not None and reference.data.shape != image.data.shape:
                logger.debug(
                    "Skipping domain augmentation of image %d: reference is %s, image is %s",
                    i, tuple(reference.data.shape), tuple(image.data.shape),
                )
            elif reference is not None:
                image = domain_level_aug(image, reference, policy, rng)
        out_images.append(image)
        out_boxes.append(box_set)
    return out_images, out_boxes
