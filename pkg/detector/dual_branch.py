"""
Dual-branch diffusion detector.
The ordinary branch sees the full image under the unconditional prompt; the
object-centered auxiliary branch sees the box-masked image under a class
prompt and reuses the ordinary branch's proposals. Consistency losses tie the
two together during training; inference runs the ordinary branch only.
"""
from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass, fields
from typing import Callable, Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F
from tqdm import tqdm

from core import AuxSkip, BoxSet, Detections, ImageTensor, LossComputationError, ShapeError, TrainingDivergedError
from detector.diffusion_backbone import ConditionEmbedding, multistep_timesteps
from detector.fusion import FeatureFusion, FeaturePyramid
from detector.heads import BranchOutputs, DetectionHeads, detection_loss as _detection_loss, postprocess_detections
from utils import image_noise_rng, seeded_rng

logger = logging.getLogger(__name__)

__all__ = [
    "BranchOutputs",
    "LossBreakdown",
    "DiffusionDetector",
    "DualBranchTrainer",
    "mask_image",
    "mask_batch",
    "detection_loss",
    "feature_consistency",
    "box_consistency",
    "class_consistency",
    "total_loss",
]


# ==================== MASKING ====================

def box_mask(boxes: BoxSet, height: int, width: int) -> torch.Tensor:
    """(H, W) bool mask of pixels whose centre lies inside at least one box."""
    ys = torch.arange(height, dtype=torch.float32) + 0.5
    xs = torch.arange(width, dtype=torch.float32) + 0.5
    mask = torch.zeros(height, width, dtype=torch.bool)
    for x1, y1, x2, y2 in boxes.boxes.tolist():
        inside_y = (ys >= y1) & (ys <= y2)
        inside_x = (xs >= x1) & (xs <= x2)
        mask |= inside_y[:, None] & inside_x[None, :]
    return mask


def mask_image(image: ImageTensor, boxes: BoxSet) -> ImageTensor:
    """x_mask = x * m: pixels outside every box become exactly 0 in all channels."""
    mask = box_mask(boxes, image.height, image.width)
    return ImageTensor(torch.where(mask[..., None], image.data, torch.zeros_like(image.data)))


def mask_batch(x: torch.Tensor, targets: Sequence[BoxSet]) -> torch.Tensor:
    masks = torch.stack([box_mask(t, x.shape[-2], x.shape[-1]) for t in targets])
    return torch.where(masks[:, None], x, torch.zeros_like(x))


# ==================== LOSSES ====================

def detection_loss(branch: BranchOutputs, targets: Sequence[BoxSet], config, rng: torch.Generator) -> torch.Tensor:
    return _detection_loss(branch, targets, config, rng)


def feature_consistency(f_ord: FeaturePyramid, f_aux: FeaturePyramid) -> torch.Tensor:
    """MSE per pyramid level, then the unweighted mean over levels."""
    per_level = []
    for a, b in zip(f_ord.values(), f_aux.values()):
        if a.shape != b.shape:
            raise ShapeError(f"pyramid level shapes differ: {tuple(a.shape)} vs {tuple(b.shape)}")
        per_level.append(F.mse_loss(a, b))
    return torch.stack(per_level).mean()


def box_consistency(b_ord: torch.Tensor, b_aux: torch.Tensor) -> torch.Tensor:
    """Mean absolute difference of row-aligned ROI box outputs."""
    if b_ord.shape != b_aux.shape:
        raise ShapeError(f"ROI box outputs are not row-aligned: {tuple(b_ord.shape)} vs {tuple(b_aux.shape)}")
    if b_ord.numel() == 0:
        return b_ord.sum() + b_aux.sum()
    return F.l1_loss(b_ord, b_aux)


def class_consistency(c_ord: torch.Tensor, c_aux: torch.Tensor, tau: float, tau_squared: bool = True) -> torch.Tensor:
    """KL(P_ord || P_aux) on tau-softened logits, averaged over proposals and scaled by tau^2."""
    if tau <= 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    if c_ord.shape != c_aux.shape:
        raise ShapeError(f"ROI logits are not row-aligned: {tuple(c_ord.shape)} vs {tuple(c_aux.shape)}")
    if c_ord.shape[0] == 0:
        return c_ord.sum() + c_aux.sum()
    log_p_ord = F.log_softmax(c_ord / tau, dim=-1)
    log_q_aux = F.log_softmax(c_aux / tau, dim=-1)
    kl = F.kl_div(log_q_aux, log_p_ord, log_target=True, reduction="batchmean")
    return kl * (tau * tau) if tau_squared else kl


@dataclass(frozen=True)
class LossBreakdown:
    """Components of the training objective; values are tensors during a step and floats in logs."""

    ord: float
    aux: float
    feature: float
    box: float
    cat: float
    cons: float
    total: float

    def as_floats(self) -> "LossBreakdown":
        return LossBreakdown(**{k: float(torch.as_tensor(v).detach()) for k, v in ((f.name, getattr(self, f.name)) for f in fields(self))})

    def __str__(self) -> str:
        return " ".join(f"{k}={float(torch.as_tensor(v).detach()):.4f}" for k, v in ((f.name, getattr(self, f.name)) for f in fields(self)))


def total_loss(ord, aux, feature, box, cat, gamma: float, lam: float) -> LossBreakdown:
    """cons = feature + gamma * (box + cat); total = ord + aux + lam * cons."""
    for name, value in (("ord", ord), ("aux", aux), ("feature", feature), ("box", box), ("cat", cat)):
        if math.isnan(float(torch.as_tensor(value).detach())):
            raise LossComputationError(f"loss component '{name}' is NaN")
    cons = feature + gamma * (box + cat)
    total = ord + aux + lam * cons
    return LossBreakdown(ord=ord, aux=aux, feature=feature, box=box, cat=cat, cons=cons, total=total)


# ==================== DETECTOR ====================

class DiffusionDetector(nn.Module):
    """Frozen diffusion backbone + trainable fusion and heads shared by both branches."""

    def __init__(self, backbone, categories: Sequence[str], config):
        super().__init__()
        self.categories = tuple(categories)
        self.config = config
        self.backbone = backbone
        base = config.detector.pyramid_base_channels
        self.fusion = FeatureFusion.for_backbone(
            backbone,
            collection=config.ablation.feature_collection,
            base_channels=base,
            skips=config.ablation.fusion_skips,
        )
        self.heads = DetectionHeads(len(self.categories), config.detector, base_channels=base)
        self.unconditional = backbone.prompts.unconditional()

    @property
    def num_classes(self) -> int:
        return len(self.categories)

    def trainable_parameters(self) -> list[nn.Parameter]:
        return [p for p in self.parameters() if p.requires_grad]

    def trainable_state_dict(self) -> dict[str, torch.Tensor]:
        return {f"fusion.{k}": v for k, v in self.fusion.state_dict().items()} | {
            f"heads.{k}": v for k, v in self.heads.state_dict().items()
        }

    def load_trainable_state_dict(self, state: dict[str, torch.Tensor]) -> None:
        self.fusion.load_state_dict({k[7:]: v for k, v in state.items() if k.startswith("fusion.")})
        self.heads.load_state_dict({k[6:]: v for k, v in state.items() if k.startswith("heads.")})

    def class_condition(self, boxes: BoxSet) -> ConditionEmbedding:
        names = [self.categories[c] for c in sorted(set(boxes.classes.tolist()))]
        return self.backbone.prompts.encode_prompt(names)

    def features(self, x: torch.Tensor, cond, noise) -> FeaturePyramid:
        diffusion = self.config.diffusion
        if diffusion.multistep_baseline > 1:
            steps = multistep_timesteps(diffusion.timestep, diffusion.multistep_baseline)
            raw = self.backbone.extract_features_multistep(x, steps, cond, noise, add_noise=diffusion.add_noise)
        else:
            raw = self.backbone.extract_features(x, diffusion.timestep, cond, noise, add_noise=diffusion.add_noise)
        return self.fusion(raw, self.config.ablation.feature_collection)

    def ordinary_forward(
        self,
        x: torch.Tensor,
        noise,
        targets: Sequence[BoxSet] | None = None,
        rng: torch.Generator | None = None,
    ) -> BranchOutputs:
        pyramid = self.features(x, self.unconditional, noise)
        return self.heads(pyramid, tuple(x.shape[-2:]), targets=targets, rng=rng)

    def auxiliary_forward(
        self, x: torch.Tensor, targets: Sequence[BoxSet], noise, proposals: list[torch.Tensor]
    ) -> BranchOutputs:
        """Masked images under class prompts; proposals come from the paired ordinary branch."""
        if any(len(t) == 0 for t in targets):
            raise AuxSkip("auxiliary branch needs at least one box per image")
        conds = [self.class_condition(t) for t in targets]
        pyramid = self.features(mask_batch(x, targets), conds, noise)
        return self.heads(pyramid, tuple(x.shape[-2:]), proposals=proposals)

    @torch.no_grad()
    def predict(self, x: torch.Tensor, image_ids: Sequence[int], seed: int) -> list[Detections]:
        """Ordinary-branch inference with per-image seeded noise."""
        was_training = self.training
        self.eval()
        try:
            noise = [image_noise_rng(seed, image_id) for image_id in image_ids]
            outputs = self.ordinary_forward(x, noise)
            return postprocess_detections(outputs, self.config.detector)
        finally:
            self.train(was_training)


def predict(detector: DiffusionDetector, images: Sequence[ImageTensor], image_ids: Sequence[int], seed: int) -> list[Detections]:
    x = torch.stack([image.chw() for image in images])
    return detector.predict(x, image_ids, seed)


# ==================== TRAINER ====================

class DualBranchTrainer:
    """
    Owns the detector's trainable parameters and the SGD optimizer.
    Each step draws one latent noise tensor for the batch and shares it
    between the branches.
    """

    def __init__(self, detector: DiffusionDetector, config):
        self.detector = detector
        self.config = config
        training = config.training
        self.optimizer = torch.optim.SGD(
            detector.trainable_parameters(),
            lr=training.lr,
            momentum=training.momentum,
            weight_decay=training.weight_decay,
        )
        self.noise_rng = seeded_rng(config.seed, "train-noise")
        self.sample_rng = seeded_rng(config.seed, "roi-sampling")
        self.step_count = 0

    def compute_losses(self, x: torch.Tensor, targets: Sequence[BoxSet]) -> LossBreakdown:
        cfg = self.config
        detector = self.detector
        noise = detector.backbone.draw_noise(x.shape[0], x.shape[-2], x.shape[-1], self.noise_rng)
        ordinary = detector.ordinary_forward(x, noise, targets, self.sample_rng)
        l_ord = detection_loss(ordinary, targets, cfg.detector, self.sample_rng)
        zero = l_ord.new_zeros(())
        l_aux = feature = box = cat = zero

        if cfg.ablation.aux_branch:
            keep = [i for i, t in enumerate(targets) if len(t) > 0]
            if len(keep) < len(targets):
                logger.info("Aux branch skipped for %d sample(s) without boxes", len(targets) - len(keep))
            if keep:
                index = torch.as_tensor(keep, dtype=torch.long)
                paired = ordinary.select(keep)
                kept_targets = [targets[i] for i in keep]
                try:
                    auxiliary = detector.auxiliary_forward(x[index], kept_targets, noise[index], paired.proposals)
                except AuxSkip:
                    auxiliary = None
                if auxiliary is not None:
                    l_aux = detection_loss(auxiliary, kept_targets, cfg.detector, self.sample_rng)
                    if cfg.ablation.consistency:
                        feature = feature_consistency(paired.pyramid, auxiliary.pyramid)
                        box = box_consistency(paired.roi_boxes, auxiliary.roi_boxes)
                        cat = class_consistency(paired.roi_logits, auxiliary.roi_logits, cfg.loss.tau, cfg.loss.tau_squared)

        lam = cfg.loss.lam if cfg.ablation.consistency else 0.0
        return total_loss(l_ord, l_aux, feature, box, cat, cfg.loss.gamma, lam)

    def train_step(self, x: torch.Tensor, targets: Sequence[BoxSet]) -> LossBreakdown:
        self.detector.train()
        breakdown = self.compute_losses(x, targets)
        total = float(breakdown.total.detach())
        if not math.isfinite(total) or total > self.config.loss.loss_cap:
            raise TrainingDivergedError(
                f"loss {total} exceeded cap {self.config.loss.loss_cap} at step {self.step_count}",
                diagnostics={"step": self.step_count, **asdict(breakdown.as_floats())},
            )
        self.optimizer.zero_grad(set_to_none=True)
        breakdown.total.backward()
        nn.utils.clip_grad_norm_(self.detector.trainable_parameters(), self.config.training.grad_clip)
        self.optimizer.step()
        self.step_count += 1
        return breakdown.as_floats()

    def fit(self, next_batch: Callable[[], tuple[torch.Tensor, list[BoxSet]]], steps: int) -> list[LossBreakdown]:
        history = []
        every = self.config.training.log_every
        started = time.perf_counter()
        for step in tqdm(range(steps), desc="train-diff", disable=None):
            x, targets = next_batch()
            breakdown = self.train_step(x, targets)
            history.append(breakdown)
            if (step + 1) % every == 0 or step == 0:
                logger.info("step %d/%d %s", step + 1, steps, breakdown)
        logger.info("Trained %d steps in %.1fs", steps, time.perf_counter() - started)
        return history


def build_detector(config, categories: Sequence[str]) -> DiffusionDetector:
    from detector.diffusion_backbone import build_backbone

    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(config.seed)
        backbone = build_backbone(config, categories)
        return DiffusionDetector(backbone, categories, config)
