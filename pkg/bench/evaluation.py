"""
Evaluation module.
COCO-style AP with greedy per-class matching and 101-point interpolation,
mAP over classes, AP50:95, the corruption sweep and mPC.
"""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np
import torch

from bench.corruptions import KINDS, SEVERITIES, corrupt, load_severity_tables
from bench.datasets import DetectionDataset
from core import Detections, EvaluationError, ImageTensor
from utils import randint, seeded_rng

logger = logging.getLogger(__name__)

COCO_IOU_THRESHOLDS = tuple(np.round(np.linspace(0.5, 0.95, 10), 2).tolist())
RECALL_POINTS = np.linspace(0.0, 1.0, 101)

CorruptionTable = dict[str, dict[int, float]]
PredictFn = Callable[[list[ImageTensor], list[int]], list[Detections]]


@dataclass
class EvalReport:
    categories: tuple[str, ...]
    per_class_ap50: dict[str, float | None]
    per_class_ap50_95: dict[str, float | None]
    map50: float
    ap50_95: float
    num_images: int
    corruption_table: CorruptionTable | None = None
    mpc: float | None = None
    clean_ap50_95: float | None = None
    meta: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        payload = asdict(self)
        if self.corruption_table is not None:
            payload["corruption_table"] = {
                kind: {str(s): v for s, v in row.items()} for kind, row in self.corruption_table.items()
            }
        return payload

    def format_table(self) -> str:
        def fmt(value: float | None) -> str:
            return f"{value:.4f}" if value is not None else "-"

        lines = [f"{'class':<16}{'AP50':>8}{'AP50:95':>10}"]
        for name in self.categories:
            ap50, ap = self.per_class_ap50[name], self.per_class_ap50_95[name]
            lines.append(f"{name:<16}{fmt(ap50):>8}{fmt(ap):>10}")
        lines.append(f"{'mAP':<16}{self.map50:>8.4f}{self.ap50_95:>10.4f}")
        if self.mpc is not None:
            lines.append("")
            lines.append(f"{'corruption':<16}" + "".join(f"{f's{s}':>8}" for s in SEVERITIES))
            for kind, row in self.corruption_table.items():
                lines.append(f"{kind:<16}" + "".join(f"{row[s]:>8.4f}" for s in SEVERITIES))
            if self.clean_ap50_95 is not None:
                lines.append(f"clean AP50:95 {self.clean_ap50_95:.4f}")
            lines.append(f"mPC {self.mpc:.4f}")
        return "\n".join(lines)


# ==================== MATCHING ====================

def _iou(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    inter = _intersection(a, b)
    return inter / np.maximum(area_a[:, None] + area_b[None] - inter, np.finfo(np.float64).tiny)


def _intersection(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    lt = np.maximum(a[:, None, :2], b[None, :, :2])
    rb = np.minimum(a[:, None, 2:], b[None, :, 2:])
    wh = np.clip(rb - lt, 0.0, None)
    return wh[..., 0] * wh[..., 1]


def match_image(
    det_boxes: np.ndarray, gt_boxes: np.ndarray, ignore_boxes: np.ndarray, threshold: float
) -> tuple[np.ndarray, np.ndarray]:
    """
    Greedy matching of score-sorted detections of one class in one image.
    Each detection takes the unmatched ground truth with the highest IoU >= threshold;
    an unmatched detection covered by an ignore region (intersection over its
    own area >= threshold) is ignored. Returns (is_tp, is_ignored).
    """
    n = det_boxes.shape[0]
    tp = np.zeros(n, dtype=bool)
    ignored = np.zeros(n, dtype=bool)
    if n == 0:
        return tp, ignored
    ious = _iou(det_boxes, gt_boxes) if gt_boxes.shape[0] else np.zeros((n, 0))
    if ignore_boxes.shape[0]:
        det_area = (det_boxes[:, 2] - det_boxes[:, 0]) * (det_boxes[:, 3] - det_boxes[:, 1])
        ioa = _intersection(det_boxes, ignore_boxes) / np.maximum(det_area, np.finfo(np.float64).tiny)[:, None]
    else:
        ioa = np.zeros((n, 0))
    taken = np.zeros(gt_boxes.shape[0], dtype=bool)
    for d in range(n):
        candidates = np.where(~taken & (ious[d] >= threshold))[0]
        if candidates.size:
            g = candidates[np.argmax(ious[d, candidates])]
            taken[g] = True
            tp[d] = True
        elif ioa.shape[1] and bool((ioa[d] >= threshold).any()):
            ignored[d] = True
    return tp, ignored


def interpolated_ap(scores: np.ndarray, tp: np.ndarray, num_gt: int) -> float:
    """101-point interpolated AP from pooled detections (ignored ones already removed)."""
    if num_gt == 0:
        raise EvaluationError("AP is undefined for a class without ground truth")
    if scores.size == 0:
        return 0.0
    order = np.argsort(-scores, kind="mergesort")
    tp = tp[order].astype(np.float64)
    tp_sum = np.cumsum(tp)
    fp_sum = np.cumsum(1.0 - tp)
    recall = tp_sum / num_gt
    precision = tp_sum / (tp_sum + fp_sum + np.spacing(1))
    precision = np.maximum.accumulate(precision[::-1])[::-1]
    idx = np.searchsorted(recall, RECALL_POINTS, side="left")
    q = np.where(idx < precision.size, precision[np.minimum(idx, precision.size - 1)], 0.0)
    return float(q.mean())


# ==================== AP ====================

def evaluate_ap(
    detections: Mapping[int, Detections],
    dataset: DetectionDataset,
    iou_thresholds: Sequence[float] = COCO_IOU_THRESHOLDS,
) -> EvalReport:
    """
    AP per class and IoU threshold. Images absent from `detections` count as
    having none; classes without ground truth are left out of the means.
    """
    k = len(dataset.categories)
    known = {r.image_id for r in dataset}
    unknown = sorted(set(detections) - known)
    if unknown:
        raise EvaluationError(f"detections for unknown image ids {unknown[:10]}")
    if 0.5 not in [round(float(t), 6) for t in iou_thresholds]:
        raise EvaluationError("iou_thresholds must include 0.5")

    records = []
    for record in dataset:
        dets = detections.get(record.image_id, Detections.empty())
        if len(dets) and (int(dets.classes.max()) >= k or int(dets.classes.min()) < 0):
            raise EvaluationError(f"image {record.image_id}: detection class outside [0, {k})")
        records.append((record, dets))

    ap = np.full((len(iou_thresholds), k), np.nan)
    for c in range(k):
        per_image = []
        num_gt = 0
        for record, dets in records:
            mask = (dets.classes == c).numpy()
            gt = record.boxes.boxes[record.boxes.classes == c].double().numpy()
            ign = record.ignore.boxes[record.ignore.classes == c].double().numpy()
            per_image.append((dets.boxes.double().numpy()[mask], dets.scores.double().numpy()[mask], gt, ign))
            num_gt += gt.shape[0]
        if num_gt == 0:
            continue
        for t, threshold in enumerate(iou_thresholds):
            scores, hits = [], []
            for boxes, det_scores, gt, ign in per_image:
                order = np.argsort(-det_scores, kind="mergesort")
                tp, ignored = match_image(boxes[order], gt, ign, float(threshold))
                keep = ~ignored
                scores.append(det_scores[order][keep])
                hits.append(tp[keep])
            ap[t, c] = interpolated_ap(np.concatenate(scores), np.concatenate(hits), num_gt)

    t50 = [round(float(t), 6) for t in iou_thresholds].index(0.5)
    per_class_ap50, per_class_ap = {}, {}
    for c, name in enumerate(dataset.categories):
        has_gt = not math.isnan(ap[t50, c])
        per_class_ap50[name] = float(ap[t50, c]) if has_gt else None
        per_class_ap[name] = float(ap[:, c].mean()) if has_gt else None
    valid = ~np.isnan(ap[t50])
    if not valid.any():
        logger.warning("Dataset '%s' has no ground truth; reporting mAP 0", dataset.domain_tag)
    return EvalReport(
        categories=dataset.categories,
        per_class_ap50=per_class_ap50,
        per_class_ap50_95=per_class_ap,
        map50=float(ap[t50, valid].mean()) if valid.any() else 0.0,
        ap50_95=float(ap[:, valid].mean()) if valid.any() else 0.0,
        num_images=len(dataset),
        meta={"domain": dataset.domain_tag},
    )


# ==================== CORRUPTIONS ====================

def evaluate_mpc(table: Mapping[str, Mapping[int, float]]) -> float:
    """Mean over the five severities of each corruption, then the unweighted mean over the 15 kinds."""
    missing = [(kind, s) for kind in KINDS for s in SEVERITIES if table.get(kind, {}).get(s) is None]
    if missing:
        raise EvaluationError(f"corruption table incomplete, missing cells {missing[:10]}")
    extra = sorted(set(table) - set(KINDS))
    if extra:
        raise EvaluationError(f"unknown corruption kinds in table: {extra}")
    per_kind = [float(np.mean([table[kind][s] for s in SEVERITIES])) for kind in KINDS]
    return float(np.mean(per_kind))


def run_corruption_benchmark(
    predict_fn: PredictFn,
    dataset: DetectionDataset,
    rng: torch.Generator,
    batch_size: int = 4,
) -> CorruptionTable:
    """
    The 15 x 5 sweep: corrupt every image, predict, and score AP50:95.
    Each cell draws from its own stream derived from one seed taken from `rng`,
    so a cell does not depend on the order of the sweep.
    """
    tables = load_severity_tables()
    base_seed = randint(rng, 0, 2**31 - 1)
    table: CorruptionTable = {}
    for kind in KINDS:
        table[kind] = {}
        for severity in SEVERITIES:
            cell_rng = seeded_rng(base_seed, f"corrupt:{kind}:{severity}")
            detections: dict[int, Detections] = {}
            records = dataset.records
            for start in range(0, len(records), batch_size):
                chunk = records[start:start + batch_size]
                images = [corrupt(r.load_image(), kind, severity, cell_rng, tables) for r in chunk]
                ids = [r.image_id for r in chunk]
                detections.update(zip(ids, predict_fn(images, ids)))
            table[kind][severity] = evaluate_ap(detections, dataset).ap50_95
            logger.info("corruption %s s%d: AP50:95 %.4f", kind, severity, table[kind][severity])
    return table
