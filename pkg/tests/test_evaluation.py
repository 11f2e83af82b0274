import itertools

import numpy as np
import pytest
import torch

from bench.corruptions import KINDS, SEVERITIES
from bench.datasets import DetectionDataset
from bench.evaluation import RECALL_POINTS, evaluate_ap, evaluate_mpc, run_corruption_benchmark
from core import BoxSet, Detections, DetectionRecord, EvaluationError
from utils import seeded_rng

from conftest import boxes, gray_image


def dataset_of(*box_sets: BoxSet, ignore: dict[int, BoxSet] | None = None, categories=("a", "b")) -> DetectionDataset:
    ignore = ignore or {}
    records = [
        DetectionRecord(i, b, ignore=ignore.get(i, BoxSet.empty()), image=gray_image()) for i, b in enumerate(box_sets)
    ]
    return DetectionDataset(records, categories)


def dets(rows, classes, scores) -> Detections:
    return Detections.sorted(
        torch.tensor(rows, dtype=torch.float32).reshape(-1, 4), torch.tensor(classes, dtype=torch.int64),
        torch.tensor(scores, dtype=torch.float32),
    )


# ==================== AP ====================

def test_perfect_detections_score_one():
    gt = boxes([[0, 0, 10, 10], [20, 20, 40, 40]], [0, 1])
    report = evaluate_ap({0: Detections(gt.boxes, gt.classes, torch.ones(2))}, dataset_of(gt))
    assert report.map50 == pytest.approx(1.0)
    assert report.ap50_95 == pytest.approx(1.0)


def test_no_detections_score_zero():
    report = evaluate_ap({}, dataset_of(boxes([[0, 0, 10, 10]])))
    assert report.map50 == 0.0
    assert report.per_class_ap50["a"] == 0.0


def test_false_positive_above_true_positive_halves_ap():
    dataset = dataset_of(boxes([[0, 0, 10, 10]]))
    report = evaluate_ap({0: dets([[50, 50, 60, 60], [0, 0, 10, 10]], [0, 0], [0.95, 0.9])}, dataset)
    assert report.per_class_ap50["a"] == pytest.approx(0.5)


def test_detection_inside_ignore_region_is_not_a_false_positive():
    dataset = dataset_of(boxes([[0, 0, 10, 10]]), ignore={0: boxes([[40, 40, 70, 70]])})
    report = evaluate_ap({0: dets([[50, 50, 60, 60], [0, 0, 10, 10]], [0, 0], [0.95, 0.9])}, dataset)
    assert report.per_class_ap50["a"] == pytest.approx(1.0)


def test_classes_without_ground_truth_are_left_out():
    report = evaluate_ap({}, dataset_of(boxes([[0, 0, 10, 10]], [0])))
    assert report.per_class_ap50["b"] is None
    assert report.per_class_ap50_95["b"] is None


def test_unknown_image_id_rejected():
    with pytest.raises(EvaluationError, match="unknown image"):
        evaluate_ap({5: Detections.empty()}, dataset_of(boxes([[0, 0, 10, 10]])))


def test_detection_class_out_of_range_rejected():
    with pytest.raises(EvaluationError, match="class"):
        evaluate_ap({0: dets([[0, 0, 10, 10]], [2], [0.5])}, dataset_of(boxes([[0, 0, 10, 10]])))


def brute_iou(a, b) -> float:
    ix = max(0.0, min(a[2], b[2]) - max(a[0], b[0]))
    iy = max(0.0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = ix * iy
    return inter / ((a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter)


def brute_ioa(box, region) -> float:
    ix = max(0.0, min(box[2], region[2]) - max(box[0], region[0]))
    iy = max(0.0, min(box[3], region[3]) - max(box[1], region[1]))
    return ix * iy / ((box[2] - box[0]) * (box[3] - box[1]))


def brute_assignment(gt, ranked) -> list[int | None]:
    """
    Enumerate every one-to-one assignment of score-ranked predictions to ground
    truth at IoU >= 0.5 and keep the one that serves higher-ranked predictions
    first with the best IoU, ties going to the lower ground-truth index.
    """
    options = [[None] + [g for g, gt_box in enumerate(gt) if brute_iou(box, gt_box) >= 0.5] for _, box in ranked]
    best, best_key = None, None
    for assignment in itertools.product(*options):
        used = [g for g in assignment if g is not None]
        if len(used) != len(set(used)):
            continue
        key = [(0.0, 0) if g is None else (brute_iou(box, gt[g]), -g) for g, (_, box) in zip(assignment, ranked)]
        if best_key is None or key > best_key:
            best, best_key = list(assignment), key
    return best


def brute_ap50(images) -> float:
    """images: list of (gt rows, ignore rows, [(score, box)]) for a single class."""
    pooled = []
    num_gt = sum(len(gt) for gt, _, _ in images)
    for gt, ignore, predictions in images:
        ranked = sorted(predictions, key=lambda p: -p[0])
        for (score, box), g in zip(ranked, brute_assignment(gt, ranked)):
            if g is None and any(brute_ioa(box, region) >= 0.5 for region in ignore):
                continue
            pooled.append((score, g is not None))
    pooled.sort(key=lambda p: -p[0])
    tp = fp = 0
    curve = []
    for _, hit in pooled:
        tp, fp = tp + hit, fp + (not hit)
        curve.append((tp / num_gt, tp / (tp + fp)))
    total = 0.0
    for r in RECALL_POINTS:
        reachable = [p for rec, p in curve if rec >= r]
        total += max(reachable) if reachable else 0.0
    return total / len(RECALL_POINTS)


def random_box(gen: torch.Generator) -> list[float]:
    x, y = (float(v) for v in torch.randint(0, 40, (2,), generator=gen))
    w, h = (float(v) for v in torch.randint(4, 24, (2,), generator=gen))
    return [x, y, x + w, y + h]


def inside(region: list[float], gen: torch.Generator) -> list[float]:
    """A small box whose corner lies in `region`; it may spill over the edge."""
    x = region[0] + float(torch.randint(0, int(region[2] - region[0]), (), generator=gen))
    y = region[1] + float(torch.randint(0, int(region[3] - region[1]), (), generator=gen))
    w, h = (float(v) for v in torch.randint(2, 8, (2,), generator=gen))
    return [x, y, x + w, y + h]


def test_matches_brute_force_ap():
    gen = seeded_rng(0, "ap-instances")
    for _ in range(200):
        images, records, detections = [], [], {}
        for image_id in range(int(torch.randint(1, 4, (), generator=gen))):
            gt = [random_box(gen) for _ in range(int(torch.randint(1, 4, (), generator=gen)))]
            ignore = [random_box(gen) for _ in range(int(torch.randint(0, 3, (), generator=gen)))]
            predictions = []
            for _ in range(int(torch.randint(0, 6, (), generator=gen))):
                roll = float(torch.rand((), generator=gen))
                if roll < 0.5:
                    base = gt[int(torch.randint(0, len(gt), (), generator=gen))]
                    shift = float(torch.randint(-3, 4, (), generator=gen))
                    box = [base[0] + shift, base[1], base[2] + shift, base[3]]
                elif roll < 0.75 and ignore:
                    box = inside(ignore[int(torch.randint(0, len(ignore), (), generator=gen))], gen)
                else:
                    box = random_box(gen)
                predictions.append((float(torch.rand((), generator=gen)), box))
            images.append((gt, ignore, predictions))
            records.append(DetectionRecord(image_id, boxes(gt), ignore=boxes(ignore), image=gray_image()))
            if predictions:
                detections[image_id] = dets([p[1] for p in predictions], [0] * len(predictions),
                                            [p[0] for p in predictions])
        report = evaluate_ap(detections, DetectionDataset(records, ("a",)), iou_thresholds=(0.5,))
        assert report.map50 == pytest.approx(brute_ap50(images), abs=1e-9)


def shifted(box: list[float], dx: float) -> list[float]:
    return [box[0] + dx, box[1], box[2] + dx, box[3]]


def test_lower_scored_duplicate_never_raises_ap():
    gen = seeded_rng(1, "duplicates")
    for _ in range(50):
        # disjoint ground truth: a duplicate can only re-hit the box its original took
        gt = [shifted(random_box(gen), 70 * i) for i in range(int(torch.randint(1, 4, (), generator=gen)))]
        rows = [shifted(random_box(gen), 70 * int(torch.randint(0, 3, (), generator=gen))) for _ in range(3)] + [gt[0]]
        scores = torch.rand(len(rows), generator=gen).tolist()
        dataset = DetectionDataset([DetectionRecord(0, boxes(gt), image=gray_image())], ("a",))
        base = evaluate_ap({0: dets(rows, [0] * len(rows), scores)}, dataset).ap50_95
        pick = int(torch.randint(0, len(rows), (), generator=gen))
        more = evaluate_ap(
            {0: dets(rows + [rows[pick]], [0] * (len(rows) + 1), scores + [scores[pick] * 0.5])}, dataset
        ).ap50_95
        assert more <= base + 1e-12


# ==================== mPC ====================

def full_table(value: float) -> dict[str, dict[int, float]]:
    return {kind: {s: value for s in SEVERITIES} for kind in KINDS}


def test_mpc_of_constant_table():
    assert evaluate_mpc(full_table(0.3)) == pytest.approx(0.3)


def test_mpc_one_collapsed_kind():
    table = full_table(0.3)
    table["frost"] = {s: 0.0 for s in SEVERITIES}
    assert evaluate_mpc(table) == pytest.approx(0.28)


def test_mpc_ignores_kind_order():
    gen = seeded_rng(0, "mpc")
    values = torch.rand(len(KINDS), len(SEVERITIES), generator=gen).tolist()
    table = {kind: dict(zip(SEVERITIES, row)) for kind, row in zip(KINDS, values)}
    shuffled = {kind: table[kind] for kind in reversed(KINDS)}
    assert evaluate_mpc(shuffled) == pytest.approx(evaluate_mpc(table))
    assert evaluate_mpc(table) == pytest.approx(float(np.mean(values)))


def test_mpc_missing_cell():
    table = full_table(0.3)
    del table["jpeg"][4]
    with pytest.raises(EvaluationError, match="jpeg"):
        evaluate_mpc(table)


def test_mpc_unknown_kind():
    table = full_table(0.3)
    table["hail"] = {s: 0.1 for s in SEVERITIES}
    with pytest.raises(EvaluationError, match="hail"):
        evaluate_mpc(table)


# ==================== CORRUPTION SWEEP ====================

def test_corruption_sweep_fills_every_cell_deterministically():
    dataset = dataset_of(boxes([[4, 4, 30, 30]], [0]), boxes([[10, 12, 50, 40]], [1]))
    by_id = {r.image_id: r.boxes for r in dataset}

    def run():
        seen = []

        def oracle(images, ids):
            seen.extend(float(image.data.sum()) for image in images)
            return [Detections(by_id[i].boxes, by_id[i].classes, torch.ones(len(by_id[i]))) for i in ids]

        return run_corruption_benchmark(oracle, dataset, seeded_rng(0, "corrupt"), batch_size=1), seen

    table, seen = run()
    assert sum(len(row) for row in table.values()) == 75
    assert all(v == pytest.approx(1.0) for row in table.values() for v in row.values())
    assert len(seen) == 75 * len(dataset)
    assert run()[1] == seen
