import json

import numpy as np
import pytest
import torch
from PIL import Image

from bench.datasets import (
    DataAccessGuard,
    DetectionDataset,
    batch_sampler,
    load_coco_style,
    pad_batch,
    read_image,
    save_coco_style,
)
from core import DataAccessError, DatasetError, DetectionRecord, ImageTensor
from utils import seeded_rng

from conftest import boxes, gray_image


def write_png(path, height: int = 64, width: int = 64, value: int = 128):
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.full((height, width, 3), value, dtype=np.uint8)).save(path)


@pytest.fixture
def coco_dir(tmp_path):
    images = tmp_path / "images"
    write_png(images / "a.png")
    write_png(images / "b.png", value=200)
    payload = {
        "images": [
            {"id": 7, "file_name": "a.png", "height": 64, "width": 64},
            {"id": 3, "file_name": "b.png", "height": 64, "width": 64},
        ],
        "annotations": [
            {"id": 1, "image_id": 7, "category_id": 20, "bbox": [4, 6, 10, 12], "iscrowd": 0},
            {"id": 2, "image_id": 7, "category_id": 10, "bbox": [30, 30, 20, 20], "iscrowd": 0},
            {"id": 3, "image_id": 3, "category_id": 20, "bbox": [0, 0, 16, 16], "iscrowd": 1},
        ],
        "categories": [{"id": 20, "name": "person"}, {"id": 10, "name": "car"}],
    }
    annotations = tmp_path / "annotations.json"
    annotations.write_text(json.dumps(payload), encoding="utf-8")
    return annotations, images, payload


def rewrite(annotations, payload):
    annotations.write_text(json.dumps(payload), encoding="utf-8")
    return annotations


def test_coco_boxes_are_converted_and_remapped(coco_dir):
    annotations, images, _ = coco_dir
    dataset = load_coco_style(annotations, images)
    assert dataset.categories == ("car", "person")
    assert [r.image_id for r in dataset] == [3, 7]
    record = dataset.records[1]
    assert record.boxes.boxes.tolist() == [[4.0, 6.0, 14.0, 18.0], [30.0, 30.0, 50.0, 50.0]]
    assert record.boxes.classes.tolist() == [1, 0]
    assert dataset.num_annotations == 2


def test_crowd_boxes_become_ignore_regions(coco_dir):
    annotations, images, _ = coco_dir
    record = load_coco_style(annotations, images).records[0]
    assert len(record.boxes) == 0
    assert record.ignore.boxes.tolist() == [[0.0, 0.0, 16.0, 16.0]]


def test_images_load_lazily_as_unit_range(coco_dir):
    annotations, images, _ = coco_dir
    image = load_coco_style(annotations, images).records[1].load_image()
    assert (image.height, image.width) == (64, 64)
    assert torch.allclose(image.data, torch.full((64, 64, 3), 128 / 255))


def test_empty_annotation_list_gives_empty_box_sets(coco_dir):
    annotations, images, payload = coco_dir
    dataset = load_coco_style(rewrite(annotations, {**payload, "annotations": []}), images)
    assert len(dataset) == 2
    assert dataset.num_annotations == 0


def test_zero_width_box_rejected(coco_dir):
    annotations, images, payload = coco_dir
    payload["annotations"][0]["bbox"] = [10, 10, 0, 5]
    with pytest.raises(DatasetError, match="malformed"):
        load_coco_style(rewrite(annotations, payload), images)


@pytest.mark.parametrize("bbox", [[100, 100, 10, 10], [-20, 5, 10, 10], [5, 64, 4, 4]])
def test_box_outside_image_names_its_annotation(coco_dir, bbox):
    annotations, images, payload = coco_dir
    payload["annotations"][1]["bbox"] = bbox
    with pytest.raises(DatasetError, match="annotation 2 "):
        load_coco_style(rewrite(annotations, payload), images)


def test_box_partly_outside_image_is_clipped(coco_dir):
    annotations, images, payload = coco_dir
    payload["annotations"][1]["bbox"] = [50, 50, 30, 30]
    record = load_coco_style(rewrite(annotations, payload), images).records[1]
    assert record.boxes.boxes.tolist()[1] == [50.0, 50.0, 64.0, 64.0]


def test_missing_image_lists_its_id(coco_dir):
    annotations, images, _ = coco_dir
    (images / "b.png").unlink()
    with pytest.raises(DatasetError, match=r"\[3\]"):
        load_coco_style(annotations, images)


def test_missing_top_level_key(coco_dir):
    annotations, images, payload = coco_dir
    del payload["categories"]
    with pytest.raises(DatasetError, match="categories"):
        load_coco_style(rewrite(annotations, payload), images)


def test_annotation_for_unknown_image(coco_dir):
    annotations, images, payload = coco_dir
    payload["annotations"][0]["image_id"] = 99
    with pytest.raises(DatasetError, match="99"):
        load_coco_style(rewrite(annotations, payload), images)


def test_guard_blocks_reads_under_forbidden_root(coco_dir):
    annotations, images, _ = coco_dir
    with DataAccessGuard([images]):
        with pytest.raises(DataAccessError):
            read_image(images / "a.png")
        with pytest.raises(DataAccessError):
            load_coco_style(annotations, images)
    read_image(images / "a.png")


def test_read_image_pads_to_multiple_of_64(tmp_path):
    write_png(tmp_path / "odd.png", height=50, width=70)
    image = read_image(tmp_path / "odd.png")
    assert (image.height, image.width) == (64, 128)
    assert float(image.data[50:].abs().sum()) == 0.0


def test_pad_batch_aligns_sizes():
    batch = pad_batch([gray_image(64, 64), gray_image(64, 128)])
    assert batch.shape == (2, 3, 64, 128)
    assert float(batch[0, :, :, 64:].abs().sum()) == 0.0


def in_memory_dataset(count: int) -> DetectionDataset:
    records = [DetectionRecord(i, boxes([[1, 1, 5, 5]]), image=gray_image(64, 64, i / count)) for i in range(count)]
    return DetectionDataset(records, ("square",))


def test_sampler_covers_epoch_before_repeating():
    sample = batch_sampler(in_memory_dataset(5), 5, seeded_rng(0, "order"))
    values = {round(float(image.data[0, 0, 0]) * 5) for image in sample()[0]}
    assert values == {0, 1, 2, 3, 4}


def test_sampler_rejects_empty_dataset():
    with pytest.raises(DatasetError):
        batch_sampler(DetectionDataset([], ("square",)), 2, seeded_rng(0, "order"))


def test_duplicate_image_ids_rejected():
    record = DetectionRecord(1, boxes([[1, 1, 5, 5]]), image=gray_image())
    with pytest.raises(DatasetError, match="duplicate"):
        DetectionDataset([record, record], ("square",))


def test_save_then_load_is_inverse(tmp_path):
    records = [
        DetectionRecord(
            1, boxes([[2, 3, 20, 30], [40, 40, 60, 50]], [0, 1]), ignore=boxes([[0, 0, 8, 8]], [1]),
            image=ImageTensor(torch.round(torch.rand(64, 64, 3) * 255) / 255),
        ),
        DetectionRecord(2, boxes([], []), image=gray_image()),
    ]
    original = DetectionDataset(records, ("a", "b"), "src")
    path = save_coco_style(original, tmp_path / "ann.json", tmp_path / "img")
    loaded = load_coco_style(path, tmp_path / "img", "src")
    assert loaded.categories == original.categories
    for before, after in zip(original, loaded):
        assert before.image_id == after.image_id
        assert torch.equal(before.boxes.boxes, after.boxes.boxes)
        assert torch.equal(before.boxes.classes, after.boxes.classes)
        assert torch.equal(before.ignore.boxes, after.ignore.boxes)
        assert torch.allclose(before.load_image().data, after.load_image().data, atol=1e-6)
