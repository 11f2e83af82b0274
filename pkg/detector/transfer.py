"""
Transfer module.
A frozen diffusion detector guides a conventional ResNet detector through
feature-level and object-level alignment, either source-only (DG) or with
pseudo-labels on unlabeled target images (DA).
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
from torchvision.models.resnet import BasicBlock, ResNet
from torchvision.ops import batched_nms
from tqdm import tqdm

from core import BoxSet, Detections, ShapeError, TrainingDivergedError, TransferModeError
from detector.dual_branch import DiffusionDetector, box_consistency, class_consistency
from detector.fusion import LEVELS, FeaturePyramid, pyramid_channels
from detector.heads import BranchOutputs, DetectionHeads, detection_loss, postprocess_detections
from utils import content_hash, seeded_rng

logger = logging.getLogger(__name__)

STUDENT_WIDTHS = (64, 128, 256, 512)


# ==================== TEACHER ====================

@dataclass
class TeacherBundle:
    """The guiding diffusion detector, frozen for the whole transfer run."""

    detector: DiffusionDetector
    threshold: float = 0.8
    nms_iou: float = 0.5

    def __post_init__(self):
        self.detector.requires_grad_(False)
        self.detector.eval()

    def parameter_hash(self) -> str:
        return content_hash(self.detector.state_dict())

    @torch.no_grad()
    def forward(self, x: torch.Tensor, noise, proposals: list[torch.Tensor] | None = None) -> BranchOutputs:
        pyramid = self.detector.features(x, self.detector.unconditional, noise)
        return self.detector.heads(pyramid, tuple(x.shape[-2:]), proposals=proposals)


def select_pseudo_labels(detections: Detections, threshold: float, nms_iou: float) -> BoxSet:
    """Detections with score >= threshold, after per-class NMS."""
    keep = detections.scores >= threshold
    boxes, classes, scores = detections.boxes[keep], detections.classes[keep], detections.scores[keep]
    if boxes.shape[0] == 0:
        return BoxSet.empty()
    order = batched_nms(boxes, scores, classes, nms_iou)
    return BoxSet(boxes[order], classes[order])


@torch.no_grad()
def generate_pseudo_labels(teacher: TeacherBundle, target_x: torch.Tensor, noise) -> tuple[list[BoxSet], BranchOutputs]:
    """Teacher detections on unlabeled target images turned into training targets."""
    outputs = teacher.forward(target_x, noise)
    detections = postprocess_detections(outputs, teacher.detector.config.detector)
    return [select_pseudo_labels(d, teacher.threshold, teacher.nms_iou) for d in detections], outputs


# ==================== STUDENT ====================

def _group_norm(channels: int) -> nn.GroupNorm:
    return nn.GroupNorm(math.gcd(32, channels), channels)


class StudentBackbone(nn.Module):
    """ResNet with one BasicBlock per stage; returns stages 1..4 (strides 4..32)."""

    def __init__(self):
        super().__init__()
        self.body = ResNet(BasicBlock, [1, 1, 1, 1], norm_layer=_group_norm)
        del self.body.fc
        del self.body.avgpool

    def forward(self, x: torch.Tensor) -> list[torch.Tensor]:
        b = self.body
        h = b.maxpool(b.relu(b.bn1(b.conv1(x))))
        outs = []
        for stage in (b.layer1, b.layer2, b.layer3, b.layer4):
            h = stage(h)
            outs.append(h)
        return outs


class AlignmentAdapters(nn.Module):
    """Per-level 1x1 projections from student widths to teacher pyramid widths."""

    def __init__(self, base_channels: int = 256):
        super().__init__()
        self.proj = nn.ModuleList(
            nn.Conv2d(STUDENT_WIDTHS[l - 1], pyramid_channels(l, base_channels), 1) for l in LEVELS
        )

    def forward(self, levels: Sequence[torch.Tensor]) -> FeaturePyramid:
        return FeaturePyramid({l: proj(x) for l, proj, x in zip(LEVELS, self.proj, levels)})


class StudentDetector(nn.Module):
    """ResNet backbone, adapters onto the teacher's pyramid widths, then the teacher's head architecture."""

    def __init__(self, num_classes: int, config):
        super().__init__()
        self.config = config
        base = config.detector.pyramid_base_channels
        self.backbone = StudentBackbone()
        self.adapters = AlignmentAdapters(base)
        self.heads = DetectionHeads(num_classes, config.detector, base_channels=base)

    def pyramid(self, x: torch.Tensor) -> FeaturePyramid:
        return self.adapters(self.backbone(x))

    def ordinary_forward(self, x, targets=None, rng=None, proposals=None) -> BranchOutputs:
        return self.heads(self.pyramid(x), tuple(x.shape[-2:]), targets=targets, rng=rng, proposals=proposals)

    @torch.no_grad()
    def predict(self, x: torch.Tensor, image_ids: Sequence[int] = (), seed: int = 0) -> list[Detections]:
        was_training = self.training
        self.eval()
        try:
            return postprocess_detections(self.ordinary_forward(x), self.config.detector)
        finally:
            self.train(was_training)


def build_student(config, num_classes: int) -> StudentDetector:
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(config.seed)
        return StudentDetector(num_classes, config)


# ==================== ALIGNMENT ====================

def feature_align(
    student_levels: FeaturePyramid | Sequence[torch.Tensor],
    teacher_pyramid: FeaturePyramid,
    adapters: AlignmentAdapters | None = None,
) -> torch.Tensor:
    """MSE between adapted student levels and teacher levels, averaged over levels."""
    if adapters is not None:
        student_levels = adapters(student_levels)
    per_level = []
    for s, t in zip(student_levels.values(), teacher_pyramid.values()):
        if s.shape != t.shape:
            raise ShapeError(f"adapted student level {tuple(s.shape)} does not match teacher {tuple(t.shape)}")
        per_level.append(F.mse_loss(s, t.detach()))
    return torch.stack(per_level).mean()


def object_align_dg(student: BranchOutputs, teacher: BranchOutputs, tau: float = 1.0, tau_squared: bool = True) -> torch.Tensor:
    """Box L1 plus softened-KL distillation on ROI outputs over shared proposals."""
    return box_consistency(student.roi_boxes, teacher.roi_boxes.detach()) + class_consistency(
        teacher.roi_logits.detach(), student.roi_logits, tau, tau_squared
    )


@dataclass(frozen=True)
class TransferBreakdown:
    det: float
    fea: float
    obj: float
    total: float

    def as_floats(self) -> "TransferBreakdown":
        # total is re-summed in float so the reported parts add up exactly
        det, fea, obj = (float(torch.as_tensor(v).detach()) for v in (self.det, self.fea, self.obj))
        return TransferBreakdown(det=det, fea=fea, obj=obj, total=det + fea + obj)

    def __str__(self) -> str:
        return " ".join(f"{k}={float(torch.as_tensor(v).detach()):.4f}" for k, v in ((f.name, getattr(self, f.name)) for f in fields(self)))


class TransferTrainer:
    """One owner for the student and adapter parameters; the teacher stays frozen."""

    def __init__(self, teacher: TeacherBundle, student: StudentDetector, config):
        self.teacher = teacher
        self.student = student
        self.config = config
        self.mode = config.transfer.mode
        training = config.training
        self.optimizer = torch.optim.SGD(
            [p for p in student.parameters() if p.requires_grad],
            lr=training.lr,
            momentum=training.momentum,
            weight_decay=training.weight_decay,
        )
        self.noise_rng = seeded_rng(config.seed, "teacher-noise")
        self.sample_rng = seeded_rng(config.seed, "student-sampling")
        self.step_count = 0

    def _teacher_noise(self, x: torch.Tensor) -> torch.Tensor:
        return self.teacher.detector.backbone.draw_noise(x.shape[0], x.shape[-2], x.shape[-1], self.noise_rng)

    def compute_losses(
        self, source_x: torch.Tensor, source_targets: Sequence[BoxSet], target_x: torch.Tensor | None = None
    ) -> TransferBreakdown:
        cfg = self.config
        if self.mode == "dg" and target_x is not None:
            raise TransferModeError("DG transfer must not receive target-domain images")
        if self.mode == "da" and target_x is None:
            raise TransferModeError("DA transfer needs an unlabeled target batch")

        student_out = self.student.ordinary_forward(source_x, source_targets, self.sample_rng)
        det = detection_loss(student_out, source_targets, cfg.detector, self.sample_rng)
        zero = det.new_zeros(())
        fea = obj = zero

        if self.mode == "dg":
            if cfg.transfer.feature_align or cfg.transfer.object_align:
                teacher_out = self.teacher.forward(source_x, self._teacher_noise(source_x), proposals=student_out.proposals)
                if cfg.transfer.feature_align:
                    fea = feature_align(student_out.pyramid, teacher_out.pyramid)
                if cfg.transfer.object_align:
                    obj = object_align_dg(student_out, teacher_out, cfg.loss.tau, cfg.loss.tau_squared)
        else:
            pseudo, teacher_out = generate_pseudo_labels(self.teacher, target_x, self._teacher_noise(target_x))
            if not any(len(p) for p in pseudo):
                logger.info("Teacher produced no pseudo-labels for this target batch")
            target_out = self.student.ordinary_forward(target_x, pseudo, self.sample_rng)
            if cfg.transfer.feature_align:
                fea = feature_align(target_out.pyramid, teacher_out.pyramid)
            if cfg.transfer.object_align:
                obj = detection_loss(target_out, pseudo, cfg.detector, self.sample_rng)

        return TransferBreakdown(det=det, fea=fea, obj=obj, total=det + fea + obj)

    def transfer_step(
        self, source_x: torch.Tensor, source_targets: Sequence[BoxSet], target_x: torch.Tensor | None = None
    ) -> TransferBreakdown:
        self.student.train()
        breakdown = self.compute_losses(source_x, source_targets, target_x)
        total = float(breakdown.total.detach())
        if not math.isfinite(total) or total > self.config.loss.loss_cap:
            raise TrainingDivergedError(
                f"transfer loss {total} exceeded cap {self.config.loss.loss_cap} at step {self.step_count}",
                diagnostics={"step": self.step_count, **asdict(breakdown.as_floats())},
            )
        self.optimizer.zero_grad(set_to_none=True)
        breakdown.total.backward()
        nn.utils.clip_grad_norm_(self.student.parameters(), self.config.training.grad_clip)
        self.optimizer.step()
        self.step_count += 1
        return breakdown.as_floats()

    def fit(self, next_batch: Callable[[], tuple], steps: int) -> list[TransferBreakdown]:
        """`next_batch` returns (source_x, source_targets, target_x or None)."""
        history = []
        every = self.config.training.log_every
        started = time.perf_counter()
        for step in tqdm(range(steps), desc=f"transfer-{self.mode}", disable=None):
            breakdown = self.transfer_step(*next_batch())
            history.append(breakdown)
            if (step + 1) % every == 0 or step == 0:
                logger.info("step %d/%d %s", step + 1, steps, breakdown)
        logger.info("Transfer finished: %d steps in %.1fs", steps, time.perf_counter() - started)
        return history
