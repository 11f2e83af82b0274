import json

import pytest
import torch

from core import DatasetError
from detector.transfer import TransferTrainer
from handlers import CommandRouter, Dispatcher
from middleware import RunManifestMiddleware
from main import main
from storage import load_checkpoint

from conftest import TINY_SYNTHETIC


def manifests(run_dir):
    return list(run_dir.rglob("manifest.json"))


def read_manifest(run_dir) -> dict:
    (path,) = manifests(run_dir)
    return json.loads(path.read_text(encoding="utf-8"))


def last_error(capsys) -> dict:
    return json.loads(capsys.readouterr().err.strip().splitlines()[-1])


@pytest.mark.parametrize("argv", [[], ["no-such-command"], ["evaluate"]])
def test_usage_errors_exit_2(argv, capsys):
    assert main(argv) == 2


def test_invalid_config_value_exits_3(tiny_config_file, tmp_path, capsys):
    run_dir = tmp_path / "run"
    code = main(["train-diff", "--config", str(tiny_config_file), "--set", "loss.tau=0", "--run-dir", str(run_dir)])
    assert code == 3
    assert last_error(capsys)["error"] == "config"
    manifest = read_manifest(run_dir)
    assert manifest["status"] == "error"
    assert manifest["error"]["category"] == "config"


def test_da_without_target_exits_8(tiny_config_file, tmp_path, capsys):
    run_dir = tmp_path / "run"
    assert main(["transfer", "--config", str(tiny_config_file), "--mode", "da", "--run-dir", str(run_dir)]) == 8
    assert last_error(capsys)["error"] == "mode"
    assert len(manifests(run_dir)) == 1


def test_dg_with_configured_target_exits_4(tiny_config_file, tmp_path, capsys):
    run_dir = tmp_path / "run"
    target = f"data.target={{annotations: {tmp_path / 'a.json'}, images: {tmp_path / 'img'}}}"
    code = main(["transfer", "--config", str(tiny_config_file), "--mode", "dg", "--set", target, "--run-dir", str(run_dir)])
    assert code == 4
    assert last_error(capsys)["error"] == "data-access"


def test_unreadable_checkpoint_exits_5(tmp_path, capsys):
    bad = tmp_path / "bad.pt"
    bad.write_bytes(b"garbage")
    run_dir = tmp_path / "run"
    assert main(["evaluate", "--checkpoint", str(bad), "--run-dir", str(run_dir)]) == 5
    assert last_error(capsys)["error"] == "checkpoint"
    assert read_manifest(run_dir)["status"] == "error"


def test_train_evaluate_transfer_pipeline(tiny_config_file, tmp_path):
    train_dir = tmp_path / "train"
    assert main(["train-diff", "--config", str(tiny_config_file), "--run-dir", str(train_dir)]) == 0
    checkpoint = train_dir / "detector.pt"
    assert load_checkpoint(checkpoint, kind="diffusion").kind == "diffusion"
    manifest = read_manifest(train_dir)
    assert manifest["status"] == "ok"
    assert manifest["config"]["loss"]["gamma"] == 1.0
    assert manifest["config"]["loss"]["lambda"] == 1.0
    assert manifest["metrics"]["steps"] == 2
    assert str(checkpoint) in manifest["outputs"]

    eval_dir = tmp_path / "eval"
    code = main(["evaluate", "--checkpoint", str(checkpoint), "--dataset", "fog", "--max-images", "2",
                 "--run-dir", str(eval_dir)])
    assert code == 0
    report = json.loads((eval_dir / "report.json").read_text(encoding="utf-8"))
    assert set(report["per_class_ap50"]) == set(TINY_SYNTHETIC["classes"])
    assert 0.0 <= report["map50"] <= 1.0
    assert (eval_dir / "detections.jsonl").is_file()
    assert read_manifest(eval_dir)["metrics"]["timing"]["denoiser_calls_per_image"] == pytest.approx(1.0)

    transfer_dir = tmp_path / "transfer"
    code = main(["transfer", "--config", str(tiny_config_file), "--mode", "dg", "--teacher", str(checkpoint),
                 "--run-dir", str(transfer_dir)])
    assert code == 0
    assert load_checkpoint(transfer_dir / "student.pt", kind="student").extra["mode"] == "dg"
    assert read_manifest(transfer_dir)["metrics"]["teacher_unchanged"] is True


def test_make_synthetic_writes_every_domain(tiny_synthetic_file, tmp_path):
    run_dir = tmp_path / "run"
    assert main(["make-synthetic", "--spec", str(tiny_synthetic_file), "--run-dir", str(run_dir)]) == 0
    for split in ("train", "test"):
        for name in ("source", *TINY_SYNTHETIC["targets"]):
            payload = json.loads((run_dir / "synthetic" / split / name / "annotations.json").read_text(encoding="utf-8"))
            expected = TINY_SYNTHETIC["num_train" if split == "train" else "num_test"]
            assert len(payload["images"]) == expected
            assert len(list((run_dir / "synthetic" / split / name / "images").glob("*.png"))) == expected
    assert len(manifests(run_dir)) == 1


def test_augment_preview_writes_pairs(tiny_config_file, tmp_path):
    run_dir = tmp_path / "run"
    code = main(["augment-preview", "--config", str(tiny_config_file), "--count", "2", "--run-dir", str(run_dir)])
    assert code == 0
    assert sorted(p.name for p in (run_dir / "preview").glob("*.png")) == ["000.png", "001.png"]


def test_dispatcher_rejects_duplicate_commands():
    first, second = CommandRouter("a"), CommandRouter("b")
    for router in (first, second):
        router.command("same")(lambda args, data: None)
    dp = Dispatcher()
    dp.include_router(first)
    with pytest.raises(ValueError, match="same"):
        dp.include_router(second)


def test_teacher_changed_during_transfer_exits_6(tiny_config_file, tmp_path, monkeypatch, capsys):
    train_dir = tmp_path / "train"
    assert main(["train-diff", "--config", str(tiny_config_file), "--run-dir", str(train_dir)]) == 0

    fit = TransferTrainer.fit

    def tampering_fit(self, next_batch, steps):
        history = fit(self, next_batch, steps)
        with torch.no_grad():
            next(self.teacher.detector.heads.parameters()).add_(1.0)
        return history

    monkeypatch.setattr(TransferTrainer, "fit", tampering_fit)
    run_dir = tmp_path / "transfer"
    code = main(["transfer", "--config", str(tiny_config_file), "--mode", "dg",
                 "--teacher", str(train_dir / "detector.pt"), "--run-dir", str(run_dir)])
    assert code == 6
    assert last_error(capsys)["error"] == "training"
    manifest = read_manifest(run_dir)
    assert manifest["status"] == "error"
    assert manifest["error"]["category"] == "training"
    assert manifest["metrics"]["teacher_unchanged"] is False
    assert not (run_dir / "student.pt").exists()


def test_manifest_written_when_handler_raises(tmp_path):
    router = CommandRouter("failing")

    @router.command("explode")
    def explode(args, data):
        data["context"].metrics["reached"] = True
        raise DatasetError("annotation 7 is broken")

    dp = Dispatcher()
    dp.include_router(router)
    dp.middleware(RunManifestMiddleware())
    run_dir = tmp_path / "run"
    with pytest.raises(DatasetError):
        dp.dispatch(["explode", "--run-dir", str(run_dir)])

    manifest = read_manifest(run_dir)
    assert manifest["status"] == "error"
    assert manifest["error"] == {"category": "data", "message": "annotation 7 is broken"}
    assert manifest["metrics"] == {"reached": True}
    assert manifest["command"] == "explode"
