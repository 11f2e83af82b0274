import csv
import json

import pytest
import torch

from bench.evaluation import EvalReport
from core import CheckpointError, Detections
from storage import (
    Checkpoint,
    RunManifest,
    hash_paths,
    load_checkpoint,
    load_weights,
    read_detections_jsonl,
    save_checkpoint,
    save_weights,
    write_corruption_csv,
    write_detections_jsonl,
    write_manifest,
    write_report,
    write_rows_csv,
)


def checkpoint(kind="diffusion", backbone_hash="abc123") -> Checkpoint:
    state = {"heads.weight": torch.arange(6.0).reshape(2, 3), "heads.bias": torch.zeros(2)}
    return Checkpoint(kind, state, backbone_hash, ("a", "b"), {"seed": 3}, {"steps": 10})


def test_checkpoint_round_trip(tmp_path):
    original = checkpoint()
    loaded = load_checkpoint(save_checkpoint(tmp_path / "ckpt.pt", original), kind="diffusion",
                             expected_backbone_hash="abc123")
    assert loaded.state_hash == original.state_hash
    assert loaded.categories == ("a", "b")
    assert loaded.config == {"seed": 3}
    assert loaded.extra == {"steps": 10}


def test_missing_checkpoint(tmp_path):
    with pytest.raises(CheckpointError, match="not found"):
        load_checkpoint(tmp_path / "nothing.pt")


def test_tampered_checkpoint_fails_hash_check(tmp_path):
    path = save_checkpoint(tmp_path / "ckpt.pt", checkpoint())
    payload = torch.load(path, weights_only=True)
    payload["state"]["heads.bias"] += 1.0
    torch.save(payload, path)
    with pytest.raises(CheckpointError, match="hash"):
        load_checkpoint(path)


def test_garbage_file_is_checkpoint_error(tmp_path):
    path = tmp_path / "junk.pt"
    path.write_bytes(b"not a checkpoint")
    with pytest.raises(CheckpointError):
        load_checkpoint(path)


def test_wrong_checkpoint_kind(tmp_path):
    path = save_checkpoint(tmp_path / "ckpt.pt", checkpoint(kind="student"))
    with pytest.raises(CheckpointError, match="expected diffusion"):
        load_checkpoint(path, kind="diffusion")


def test_backbone_hash_mismatch(tmp_path):
    path = save_checkpoint(tmp_path / "ckpt.pt", checkpoint())
    with pytest.raises(CheckpointError, match="denoiser"):
        load_checkpoint(path, expected_backbone_hash="ffff")


def test_weights_file_checks_its_header(tmp_path):
    state = {"w": torch.randn(3, 3)}
    path = save_weights(state, tmp_path / "w.pt")
    assert torch.equal(load_weights(path)["w"], state["w"])
    payload = torch.load(path, weights_only=True)
    payload["state"]["w"] = torch.zeros(3, 3)
    torch.save(payload, path)
    with pytest.raises(CheckpointError, match="hash header"):
        load_weights(path)


def test_detections_jsonl_round_trip(tmp_path):
    detections = {
        4: Detections(torch.tensor([[0.0, 0.0, 5.0, 5.0], [1.0, 2.0, 3.0, 4.0]]), torch.tensor([1, 0]),
                      torch.tensor([0.9, 0.25])),
        1: Detections(torch.tensor([[2.0, 2.0, 8.0, 9.0]]), torch.tensor([2]), torch.tensor([0.5])),
    }
    path = write_detections_jsonl(detections, tmp_path / "dets.jsonl")
    lines = path.read_text(encoding="utf-8").splitlines()
    assert len(lines) == 3
    assert json.loads(lines[0])["image_id"] == 1
    loaded = read_detections_jsonl(path)
    for image_id, d in detections.items():
        assert torch.equal(loaded[image_id].boxes, d.boxes)
        assert torch.equal(loaded[image_id].classes, d.classes)
        assert torch.allclose(loaded[image_id].scores, d.scores)


def test_report_writes_table_and_json(tmp_path):
    report = EvalReport(("a", "b"), {"a": 0.5, "b": None}, {"a": 0.25, "b": None}, 0.5, 0.25, 2)
    table, payload = write_report(report, tmp_path, "clean")
    assert "0.5000" in table.read_text(encoding="utf-8")
    assert json.loads(payload.read_text(encoding="utf-8"))["per_class_ap50"] == {"a": 0.5, "b": None}


def test_corruption_csv_layout(tmp_path):
    path = write_corruption_csv({"fog": {1: 0.5, 2: 0.25}, "snow": {1: 0.125, 2: 0.0}}, tmp_path / "c.csv")
    rows = list(csv.reader(path.open(encoding="utf-8")))
    assert rows[0] == ["corruption", "severity_1", "severity_2"]
    assert rows[1] == ["fog", "0.500000", "0.250000"]


def test_rows_csv_uses_first_row_keys(tmp_path):
    path = write_rows_csv([{"setting": "dg", "map50": 0.4}, {"setting": "da", "map50": 0.5}], tmp_path / "r.csv")
    rows = list(csv.DictReader(path.open(encoding="utf-8")))
    assert [r["setting"] for r in rows] == ["dg", "da"]


def test_manifest_records_file_hashes(tmp_path):
    (tmp_path / "out").mkdir()
    (tmp_path / "out" / "a.txt").write_text("a", encoding="utf-8")
    hashes = hash_paths([tmp_path / "out", tmp_path / "absent.txt"])
    assert list(hashes) == [str(tmp_path / "out" / "a.txt")]
    manifest = RunManifest(command="evaluate", argv=["evaluate"], outputs=hashes)
    loaded = json.loads(write_manifest(manifest, tmp_path / "manifest.json").read_text(encoding="utf-8"))
    assert loaded["status"] == "ok"
    assert loaded["outputs"] == hashes
