"""Directional desk-scale experiments on the synthetic shapes benchmark, driven through the CLI."""
import json
from statistics import mean

import pytest

from config import ExperimentConfig
from main import main

from conftest import write_yaml

TARGETS = ("fog", "dark", "noise")
MARGIN = 0.02

pytestmark = pytest.mark.slow


@pytest.fixture
def experiment_file(tmp_path):
    config = ExperimentConfig().with_overrides({
        "detector.pyramid_base_channels": 64,
        "detector.neck_channels": 64,
        "training.steps": 300,
        "transfer.steps": 300,
    })
    return write_yaml(tmp_path / "experiment.yaml", config.snapshot())


def run(*argv: str) -> None:
    assert main(list(argv)) == 0, argv


def map50(checkpoint, dataset: str, run_dir) -> float:
    run("evaluate", "--checkpoint", str(checkpoint), "--dataset", dataset, "--run-dir", str(run_dir))
    return json.loads((run_dir / "report.json").read_text(encoding="utf-8"))["map50"]


def train(config, run_dir, seed: int, *flags: str):
    run("train-diff", "--config", str(config), "--seed", str(seed), "--run-dir", str(run_dir), *flags)
    return run_dir / "detector.pt"


def test_consistency_training_generalizes_better(experiment_file, tmp_path):
    full_target, base_target, full_source, base_source = [], [], [], []
    for seed in (0, 1, 2):
        for name, flags, target, source in (
            ("full", (), full_target, full_source),
            ("base", ("--no-aux", "--no-consistency"), base_target, base_source),
        ):
            root = tmp_path / f"{name}-{seed}"
            checkpoint = train(experiment_file, root / "train", seed, *flags)
            source.append(map50(checkpoint, "source", root / "eval-source"))
            target.append(sum(map50(checkpoint, t, root / f"eval-{t}") for t in TARGETS) / len(TARGETS))

    assert mean(full_target) >= mean(base_target) + MARGIN
    assert mean(full_source) >= mean(base_source) - MARGIN


def test_adaptation_beats_generalization_on_target(experiment_file, tmp_path):
    teacher = train(experiment_file, tmp_path / "teacher", 0)
    scores = {}
    for mode, extra in (("dg", ()), ("da", ("--target-domain", "fog"))):
        run_dir = tmp_path / mode
        run("transfer", "--config", str(experiment_file), "--mode", mode, "--teacher", str(teacher),
            "--run-dir", str(run_dir), *extra)
        scores[mode] = map50(run_dir / "student.pt", "fog", tmp_path / f"eval-{mode}")
    assert scores["da"] >= scores["dg"] + MARGIN
