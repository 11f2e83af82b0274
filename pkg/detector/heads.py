"""
Two-stage detection heads.
FPN-lite neck, anchors, region-proposal head, ROI head, the matchers and
samplers behind their losses, and inference post-processing. Shared by the
diffusion detector and the transfer student.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F
from torchvision.ops import MultiScaleRoIAlign, batched_nms, box_iou, clip_boxes_to_image, remove_small_boxes

from core import BoxSet, Detections, ShapeError
from detector.fusion import LEVELS, PYRAMID_STRIDES, FeaturePyramid, pyramid_channels

RPN_BOX_WEIGHTS = (1.0, 1.0, 1.0, 1.0)
ROI_BOX_WEIGHTS = (10.0, 10.0, 5.0, 5.0)
SMOOTH_L1_BETA = 1.0 / 9.0
BBOX_CLIP = math.log(1000.0 / 16)
BACKGROUND = -1
IGNORE = -2


# ==================== BOX CODING ====================

def encode_boxes(reference: torch.Tensor, target: torch.Tensor, weights=ROI_BOX_WEIGHTS) -> torch.Tensor:
    """Regression targets (dx, dy, dw, dh) taking `reference` boxes onto `target` boxes."""
    wx, wy, ww, wh = weights
    rw = reference[:, 2] - reference[:, 0]
    rh = reference[:, 3] - reference[:, 1]
    rx = reference[:, 0] + 0.5 * rw
    ry = reference[:, 1] + 0.5 * rh
    tw = target[:, 2] - target[:, 0]
    th = target[:, 3] - target[:, 1]
    tx = target[:, 0] + 0.5 * tw
    ty = target[:, 1] + 0.5 * th
    return torch.stack(
        [wx * (tx - rx) / rw, wy * (ty - ry) / rh, ww * torch.log(tw / rw), wh * torch.log(th / rh)], dim=1
    )


def decode_boxes(reference: torch.Tensor, deltas: torch.Tensor, weights=ROI_BOX_WEIGHTS) -> torch.Tensor:
    wx, wy, ww, wh = weights
    rw = reference[:, 2] - reference[:, 0]
    rh = reference[:, 3] - reference[:, 1]
    rx = reference[:, 0] + 0.5 * rw
    ry = reference[:, 1] + 0.5 * rh
    dx, dy = deltas[:, 0] / wx, deltas[:, 1] / wy
    dw = (deltas[:, 2] / ww).clamp(max=BBOX_CLIP)
    dh = (deltas[:, 3] / wh).clamp(max=BBOX_CLIP)
    cx, cy = dx * rw + rx, dy * rh + ry
    w, h = torch.exp(dw) * rw, torch.exp(dh) * rh
    return torch.stack([cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h], dim=1)


# ==================== MATCHING AND SAMPLING ====================

def match_proposals(
    proposals: torch.Tensor,
    gt_boxes: torch.Tensor,
    iou_threshold: float = 0.5,
    bg_threshold: float | None = None,
    allow_low_quality: bool = False,
) -> torch.Tensor:
    """
    Index of the matched ground truth for every proposal.
    BACKGROUND below `bg_threshold` (defaults to `iou_threshold`), IGNORE in
    between. With `allow_low_quality`, each ground truth also claims the
    proposals tied for its best IoU.
    """
    bg_threshold = iou_threshold if bg_threshold is None else bg_threshold
    if gt_boxes.numel() == 0:
        return torch.full((proposals.shape[0],), BACKGROUND, dtype=torch.int64)
    iou = box_iou(gt_boxes, proposals)  # (G, P)
    best_iou, matched = iou.max(dim=0)
    result = matched.clone()
    result[best_iou < iou_threshold] = IGNORE
    result[best_iou < bg_threshold] = BACKGROUND
    if allow_low_quality:
        best_per_gt = iou.max(dim=1, keepdim=True).values
        _, proposal_idx = torch.nonzero((iou == best_per_gt) & (best_per_gt > 0), as_tuple=True)
        result[proposal_idx] = matched[proposal_idx]
    return result


def sample_balanced(
    labels: torch.Tensor, batch_size: int, positive_fraction: float, rng: torch.Generator
) -> tuple[torch.Tensor, torch.Tensor]:
    """Random positive and negative indices; labels are 1 (pos), 0 (neg), -1 (ignored)."""
    positive = torch.nonzero(labels == 1).flatten()
    negative = torch.nonzero(labels == 0).flatten()
    num_pos = min(positive.numel(), int(batch_size * positive_fraction))
    num_neg = min(negative.numel(), batch_size - num_pos)
    pos = positive[torch.randperm(positive.numel(), generator=rng)[:num_pos]]
    neg = negative[torch.randperm(negative.numel(), generator=rng)[:num_neg]]
    return pos, neg


# ==================== NECK / ANCHORS ====================

class FPNNeck(nn.Module):
    """Lateral 1x1 to a common width, top-down sum, 3x3 smoothing."""

    def __init__(self, in_channels: Sequence[int], out_channels: int):
        super().__init__()
        self.lateral = nn.ModuleList(nn.Conv2d(c, out_channels, 1) for c in in_channels)
        self.smooth = nn.ModuleList(nn.Conv2d(out_channels, out_channels, 3, padding=1) for _ in in_channels)

    def forward(self, pyramid: FeaturePyramid) -> dict[str, torch.Tensor]:
        laterals = [conv(x) for conv, x in zip(self.lateral, pyramid.values())]
        for i in range(len(laterals) - 1, 0, -1):
            laterals[i - 1] = laterals[i - 1] + F.interpolate(laterals[i], size=laterals[i - 1].shape[-2:], mode="nearest")
        return {f"p{l}": conv(x) for l, conv, x in zip(LEVELS, self.smooth, laterals)}


def level_anchors(height: int, width: int, stride: int, size: float, ratios: Sequence[float]) -> torch.Tensor:
    """Anchors for one level in (y, x, ratio) order, centred on cells."""
    ratios_t = torch.as_tensor(ratios, dtype=torch.float32)
    hs = size * torch.sqrt(ratios_t)
    ws = size / torch.sqrt(ratios_t)
    base = torch.stack([-ws, -hs, ws, hs], dim=1) / 2
    ys = (torch.arange(height, dtype=torch.float32) + 0.5) * stride
    xs = (torch.arange(width, dtype=torch.float32) + 0.5) * stride
    cy, cx = torch.meshgrid(ys, xs, indexing="ij")
    centers = torch.stack([cx, cy, cx, cy], dim=-1).reshape(-1, 1, 4)
    return (centers + base[None]).reshape(-1, 4)


class AnchorGenerator:
    def __init__(self, sizes: Sequence[float], ratios: Sequence[float]):
        self.sizes = tuple(sizes)
        self.ratios = tuple(ratios)

    @property
    def num_anchors(self) -> int:
        return len(self.ratios)

    def __call__(self, feature_sizes: Sequence[tuple[int, int]]) -> tuple[torch.Tensor, list[int]]:
        anchors = [
            level_anchors(h, w, PYRAMID_STRIDES[l], self.sizes[l - 1], self.ratios)
            for l, (h, w) in zip(LEVELS, feature_sizes)
        ]
        return torch.cat(anchors), [a.shape[0] for a in anchors]


# ==================== RPN ====================

class RPNHead(nn.Module):
    def __init__(self, channels: int, num_anchors: int):
        super().__init__()
        self.conv = nn.Conv2d(channels, channels, 3, padding=1)
        self.objectness = nn.Conv2d(channels, num_anchors, 1)
        self.deltas = nn.Conv2d(channels, 4 * num_anchors, 1)
        for layer in (self.conv, self.objectness, self.deltas):
            nn.init.normal_(layer.weight, std=0.01)
            nn.init.zeros_(layer.bias)

    def forward(self, features: Sequence[torch.Tensor]) -> tuple[torch.Tensor, torch.Tensor]:
        """Objectness (B, N) and deltas (B, N, 4) in (level, y, x, anchor) order."""
        logits, deltas = [], []
        for x in features:
            h = F.relu(self.conv(x))
            b, _, hh, ww = h.shape
            logits.append(self.objectness(h).permute(0, 2, 3, 1).reshape(b, -1))
            deltas.append(self.deltas(h).view(b, -1, 4, hh, ww).permute(0, 3, 4, 1, 2).reshape(b, -1, 4))
        return torch.cat(logits, dim=1), torch.cat(deltas, dim=1)


def assign_anchor_targets(
    anchors: torch.Tensor, gt_boxes: torch.Tensor, fg_iou: float = 0.7, bg_iou: float = 0.3
) -> tuple[torch.Tensor, torch.Tensor]:
    """Per-anchor labels (1 pos, 0 neg, -1 ignored) and matched gt boxes."""
    matched = match_proposals(anchors, gt_boxes, fg_iou, bg_iou, allow_low_quality=True)
    labels = torch.zeros(anchors.shape[0], dtype=torch.float32)
    labels[matched >= 0] = 1.0
    labels[matched == IGNORE] = -1.0
    if gt_boxes.numel() == 0:
        return labels, torch.zeros_like(anchors)
    return labels, gt_boxes[matched.clamp(min=0)]


def rpn_loss(
    objectness: torch.Tensor,
    deltas: torch.Tensor,
    anchors: torch.Tensor,
    targets: Sequence[BoxSet],
    batch_size: int,
    rng: torch.Generator,
    positive_fraction: float = 0.5,
) -> torch.Tensor:
    """BCE on sampled anchors plus smooth-L1 on the positive ones, normalized by the sample count."""
    sampled_logits, sampled_labels, pos_deltas, pos_targets = [], [], [], []
    for i, target in enumerate(targets):
        labels, matched_gt = assign_anchor_targets(anchors, target.boxes)
        pos, neg = sample_balanced(labels, batch_size, positive_fraction, rng)
        keep = torch.cat([pos, neg])
        sampled_logits.append(objectness[i, keep])
        sampled_labels.append(labels[keep])
        pos_deltas.append(deltas[i, pos])
        pos_targets.append(encode_boxes(anchors[pos], matched_gt[pos], RPN_BOX_WEIGHTS))
    logits = torch.cat(sampled_logits)
    if logits.numel() == 0:
        return objectness.sum() * 0.0
    cls = F.binary_cross_entropy_with_logits(logits, torch.cat(sampled_labels).to(logits.dtype))
    box = F.smooth_l1_loss(
        torch.cat(pos_deltas), torch.cat(pos_targets).to(deltas.dtype), beta=SMOOTH_L1_BETA, reduction="sum"
    )
    return cls + box / logits.numel()


@torch.no_grad()
def propose(
    objectness: torch.Tensor,
    deltas: torch.Tensor,
    anchors: torch.Tensor,
    level_sizes: Sequence[int],
    image_size: tuple[int, int],
    pre_nms_top_n: int,
    post_nms_top_n: int,
    nms_iou: float,
) -> list[torch.Tensor]:
    """Top-scoring decoded anchors per level, clipped, then NMS within each level."""
    proposals = []
    for i in range(objectness.shape[0]):
        boxes, scores, levels = [], [], []
        for level, (logits, level_deltas, level_anchors_) in enumerate(
            zip(objectness[i].split(level_sizes), deltas[i].split(level_sizes), anchors.split(level_sizes))
        ):
            k = min(pre_nms_top_n, logits.numel())
            top = logits.topk(k).indices
            decoded = clip_boxes_to_image(decode_boxes(level_anchors_[top], level_deltas[top], RPN_BOX_WEIGHTS), image_size)
            boxes.append(decoded)
            scores.append(logits[top])
            levels.append(torch.full((k,), level, dtype=torch.int64))
        boxes, scores, levels = torch.cat(boxes), torch.cat(scores), torch.cat(levels)
        keep = remove_small_boxes(boxes, 1e-3)
        boxes, scores, levels = boxes[keep], scores[keep], levels[keep]
        keep = batched_nms(boxes, scores, levels, nms_iou)[:post_nms_top_n]
        proposals.append(boxes[keep])
    return proposals


# ==================== ROI HEAD ====================

class ROIHead(nn.Module):
    """RoIAlign 7x7 over the neck levels, two FC layers, K+1 logits and class-agnostic deltas."""

    def __init__(self, channels: int, num_classes: int, hidden: int = 256):
        super().__init__()
        self.pool = MultiScaleRoIAlign([f"p{l}" for l in LEVELS], output_size=7, sampling_ratio=2)
        self.fc1 = nn.Linear(channels * 49, hidden)
        self.fc2 = nn.Linear(hidden, hidden)
        self.cls_score = nn.Linear(hidden, num_classes + 1)
        self.bbox_pred = nn.Linear(hidden, 4)
        nn.init.normal_(self.cls_score.weight, std=0.01)
        nn.init.normal_(self.bbox_pred.weight, std=0.001)
        nn.init.zeros_(self.cls_score.bias)
        nn.init.zeros_(self.bbox_pred.bias)

    def forward(self, features: dict[str, torch.Tensor], proposals: list[torch.Tensor], image_size: tuple[int, int]):
        batch = next(iter(features.values())).shape[0]
        pooled = self.pool(features, proposals, [image_size] * batch)
        h = F.relu(self.fc1(pooled.flatten(1)))
        h = F.relu(self.fc2(h))
        return self.cls_score(h), self.bbox_pred(h)


def roi_targets(
    proposals: Sequence[torch.Tensor], targets: Sequence[BoxSet], fg_iou: float = 0.5
) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Class labels (0 = background, c + 1 otherwise), regression targets and a positive mask."""
    labels, box_targets = [], []
    for boxes, target in zip(proposals, targets):
        matched = match_proposals(boxes, target.boxes, fg_iou)
        lab = torch.zeros(boxes.shape[0], dtype=torch.int64)
        pos = matched >= 0
        lab[pos] = target.classes[matched[pos]] + 1
        reg = torch.zeros_like(boxes)
        if bool(pos.any()):
            reg[pos] = encode_boxes(boxes[pos], target.boxes[matched[pos]], ROI_BOX_WEIGHTS)
        labels.append(lab)
        box_targets.append(reg)
    labels = torch.cat(labels) if labels else torch.zeros(0, dtype=torch.int64)
    box_targets = torch.cat(box_targets) if box_targets else torch.zeros(0, 4)
    return labels, box_targets, labels > 0


def roi_loss(
    roi_logits: torch.Tensor, roi_deltas: torch.Tensor, proposals: Sequence[torch.Tensor], targets: Sequence[BoxSet], fg_iou: float = 0.5
) -> torch.Tensor:
    """Cross-entropy over K+1 classes plus smooth-L1 on foreground rows, both per proposal."""
    if roi_logits.shape[0] == 0:
        return roi_logits.sum() * 0.0
    labels, box_targets, pos = roi_targets(proposals, targets, fg_iou)
    cls = F.cross_entropy(roi_logits, labels)
    box = F.smooth_l1_loss(roi_deltas[pos], box_targets[pos].to(roi_deltas.dtype), beta=SMOOTH_L1_BETA, reduction="sum")
    return cls + box / labels.numel()


@torch.no_grad()
def sample_rois(
    proposals: Sequence[torch.Tensor],
    targets: Sequence[BoxSet],
    batch_size: int,
    positive_fraction: float,
    fg_iou: float,
    rng: torch.Generator,
) -> list[torch.Tensor]:
    """Training ROIs: proposals plus the ground-truth boxes, subsampled per image."""
    sampled = []
    for boxes, target in zip(proposals, targets):
        candidates = torch.cat([boxes, target.boxes.to(boxes.dtype)])
        matched = match_proposals(candidates, target.boxes, fg_iou)
        labels = torch.where(matched >= 0, 1, torch.where(matched == BACKGROUND, 0, -1))
        pos, neg = sample_balanced(labels, batch_size, positive_fraction, rng)
        sampled.append(candidates[torch.cat([pos, neg])])
    return sampled


# ==================== HEAD STACK ====================

@dataclass(frozen=True)
class BranchOutputs:
    """
    Everything one branch produces for a batch.
    `proposals[i]` are the ROIs of image i; roi rows are those ROIs
    concatenated in image order.
    """

    pyramid: FeaturePyramid
    proposals: list[torch.Tensor]
    roi_boxes: torch.Tensor
    roi_logits: torch.Tensor
    rpn_objectness: torch.Tensor
    rpn_deltas: torch.Tensor
    anchors: torch.Tensor
    image_size: tuple[int, int]

    def __post_init__(self):
        rows = sum(int(p.shape[0]) for p in self.proposals)
        if self.roi_boxes.shape[0] != rows or self.roi_logits.shape[0] != rows:
            raise ShapeError(f"{rows} proposals but {self.roi_boxes.shape[0]} ROI rows")

    @property
    def batch_size(self) -> int:
        return len(self.proposals)

    def row_index(self, indices: Sequence[int]) -> torch.Tensor:
        counts = [int(p.shape[0]) for p in self.proposals]
        starts = [sum(counts[:i]) for i in range(len(counts))]
        rows = [torch.arange(starts[i], starts[i] + counts[i]) for i in indices]
        return torch.cat(rows) if rows else torch.zeros(0, dtype=torch.int64)

    def select(self, indices: Sequence[int]) -> "BranchOutputs":
        """Outputs restricted to the given images (ROI rows follow)."""
        indices = list(indices)
        rows = self.row_index(indices)
        batch = torch.as_tensor(indices, dtype=torch.long)
        return BranchOutputs(
            pyramid=self.pyramid.select(indices),
            proposals=[self.proposals[i] for i in indices],
            roi_boxes=self.roi_boxes[rows],
            roi_logits=self.roi_logits[rows],
            rpn_objectness=self.rpn_objectness.index_select(0, batch),
            rpn_deltas=self.rpn_deltas.index_select(0, batch),
            anchors=self.anchors,
            image_size=self.image_size,
        )


class DetectionHeads(nn.Module):
    """Neck + RPN + ROI head over a pyramid whose level l has base * 2^(l-1) channels."""

    def __init__(self, num_classes: int, config, base_channels: int = 256):
        super().__init__()
        self.config = config
        self.num_classes = num_classes
        self.anchor_generator = AnchorGenerator(config.anchor_sizes, config.anchor_ratios)
        self.neck = FPNNeck([pyramid_channels(l, base_channels) for l in LEVELS], config.neck_channels)
        self.rpn = RPNHead(config.neck_channels, self.anchor_generator.num_anchors)
        self.roi_head = ROIHead(config.neck_channels, num_classes)

    def forward(
        self,
        pyramid: FeaturePyramid,
        image_size: tuple[int, int],
        targets: Sequence[BoxSet] | None = None,
        rng: torch.Generator | None = None,
        proposals: list[torch.Tensor] | None = None,
    ) -> BranchOutputs:
        """
        Proposals are generated (and, given targets, sampled with `rng`)
        unless supplied; supplied proposals are used as-is.
        """
        cfg = self.config
        features = self.neck(pyramid)
        maps = list(features.values())
        objectness, deltas = self.rpn(maps)
        anchors, level_sizes = self.anchor_generator([tuple(m.shape[-2:]) for m in maps])
        if proposals is None:
            proposals = propose(
                objectness.detach(), deltas.detach(), anchors, level_sizes, image_size,
                cfg.rpn_pre_nms_top_n, cfg.rpn_post_nms_top_n, cfg.rpn_nms_iou,
            )
            if targets is not None:
                if rng is None:
                    raise ValueError("sampling training ROIs needs an explicit generator")
                proposals = sample_rois(
                    proposals, targets, cfg.roi_batch_size, cfg.roi_positive_fraction, cfg.roi_fg_iou, rng
                )
        roi_logits, roi_boxes = self.roi_head(features, proposals, image_size)
        return BranchOutputs(
            pyramid=pyramid,
            proposals=list(proposals),
            roi_boxes=roi_boxes,
            roi_logits=roi_logits,
            rpn_objectness=objectness,
            rpn_deltas=deltas,
            anchors=anchors,
            image_size=image_size,
        )


def detection_loss(outputs: BranchOutputs, targets: Sequence[BoxSet], config, rng: torch.Generator) -> torch.Tensor:
    """Faster R-CNN loss: proposal objectness + regression, ROI classification + regression."""
    if len(targets) != outputs.batch_size:
        raise ShapeError(f"{len(targets)} targets for a batch of {outputs.batch_size}")
    first = rpn_loss(outputs.rpn_objectness, outputs.rpn_deltas, outputs.anchors, targets, config.rpn_batch_size, rng)
    second = roi_loss(outputs.roi_logits, outputs.roi_boxes, outputs.proposals, targets, config.roi_fg_iou)
    return first + second


@torch.no_grad()
def postprocess_detections(outputs: BranchOutputs, config) -> list[Detections]:
    """Softmax, decode against the proposals, per-class NMS, top-k by score."""
    probs = F.softmax(outputs.roi_logits.float(), dim=-1)
    results = []
    for i in range(outputs.batch_size):
        rows = outputs.row_index([i])
        proposals = outputs.proposals[i]
        if proposals.shape[0] == 0:
            results.append(Detections.empty())
            continue
        boxes = clip_boxes_to_image(decode_boxes(proposals, outputs.roi_boxes[rows].float()), outputs.image_size)
        scores = probs[rows, 1:]
        num_classes = scores.shape[1]
        all_boxes = boxes[:, None, :].expand(-1, num_classes, -1).reshape(-1, 4)
        all_scores = scores.reshape(-1)
        all_classes = torch.arange(num_classes).repeat(boxes.shape[0])
        keep = (all_scores > config.score_threshold) & ((all_boxes[:, 2] - all_boxes[:, 0]) > 1e-3) & (
            (all_boxes[:, 3] - all_boxes[:, 1]) > 1e-3
        )
        all_boxes, all_scores, all_classes = all_boxes[keep], all_scores[keep], all_classes[keep]
        keep = batched_nms(all_boxes, all_scores, all_classes, config.nms_iou)[: config.max_detections]
        results.append(Detections.sorted(all_boxes[keep], all_classes[keep], all_scores[keep].clamp(0.0, 1.0)))
    return results
