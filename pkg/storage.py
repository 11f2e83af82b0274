"""
Storage module for run artifacts.
Handles checkpoints, hashed weight files, detection interchange files,
evaluation reports and run manifests.
"""
from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Iterable, Literal, Mapping

import torch
from pydantic import BaseModel, Field

from core import CheckpointError, DatasetError, Detections
from utils import content_hash, file_sha256

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT = 1


# ==================== CHECKPOINTS ====================

@dataclass
class Checkpoint:
    kind: Literal["diffusion", "student"]
    state: dict[str, torch.Tensor]
    backbone_hash: str
    categories: tuple[str, ...]
    config: dict[str, Any]
    extra: dict[str, Any] = field(default_factory=dict)

    @property
    def state_hash(self) -> str:
        return content_hash(self.state)


def save_checkpoint(path: str | Path, checkpoint: Checkpoint) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(
        {
            "format": CHECKPOINT_FORMAT,
            "kind": checkpoint.kind,
            "state": {k: v.detach().cpu() for k, v in checkpoint.state.items()},
            "state_hash": checkpoint.state_hash,
            "backbone_hash": checkpoint.backbone_hash,
            "categories": list(checkpoint.categories),
            "config": checkpoint.config,
            "extra": checkpoint.extra,
        },
        path,
    )
    logger.info("Saved %s checkpoint %s (%d tensors)", checkpoint.kind, path, len(checkpoint.state))
    return path


def load_checkpoint(
    path: str | Path,
    kind: Literal["diffusion", "student"] | None = None,
    expected_backbone_hash: str | None = None,
) -> Checkpoint:
    """
    Read a checkpoint written by save_checkpoint.
    The stored tensors must still hash to the recorded value; with
    `expected_backbone_hash` the frozen denoiser it was trained on must match too.
    """
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"checkpoint not found: {path}")
    try:
        payload = torch.load(path, map_location="cpu", weights_only=True)
    except Exception as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e}") from e
    if not isinstance(payload, dict) or payload.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path} is not a checkpoint of format {CHECKPOINT_FORMAT}")
    checkpoint = Checkpoint(
        kind=payload["kind"],
        state=payload["state"],
        backbone_hash=payload["backbone_hash"],
        categories=tuple(payload["categories"]),
        config=payload["config"],
        extra=payload.get("extra", {}),
    )
    if checkpoint.state_hash != payload["state_hash"]:
        raise CheckpointError(f"{path}: parameter hash mismatch, file is corrupted")
    if kind is not None and checkpoint.kind != kind:
        raise CheckpointError(f"{path} holds a {checkpoint.kind} checkpoint, expected {kind}")
    if expected_backbone_hash is not None and checkpoint.backbone_hash != expected_backbone_hash:
        raise CheckpointError(
            f"{path} was trained on denoiser {checkpoint.backbone_hash[:12]}, "
            f"but the loaded denoiser is {expected_backbone_hash[:12]}"
        )
    return checkpoint


def save_weights(state: Mapping[str, torch.Tensor], path: str | Path) -> Path:
    """Denoiser weights file: tensors plus their content hash as header."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    state = {k: v.detach().cpu() for k, v in state.items()}
    torch.save({"hash": content_hash(state), "state": state}, path)
    return path


def load_weights(path: str | Path) -> dict[str, torch.Tensor]:
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"weights file not found: {path}")
    try:
        payload = torch.load(path, map_location="cpu", weights_only=True)
        state, expected = payload["state"], payload["hash"]
    except Exception as e:
        raise CheckpointError(f"cannot read weights {path}: {e}") from e
    if content_hash(state) != expected:
        raise CheckpointError(f"{path}: weights do not match their hash header")
    return state


# ==================== DETECTIONS ====================

def write_detections_jsonl(detections: Mapping[int, Detections], path: str | Path) -> Path:
    """One JSON line per detection: image id, xyxy box, class, score."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        for image_id in sorted(detections):
            d = detections[image_id]
            for box, cls, score in zip(d.boxes.tolist(), d.classes.tolist(), d.scores.tolist()):
                f.write(json.dumps({"image_id": image_id, "box": box, "class": cls, "score": score}) + "\n")
    return path


def read_detections_jsonl(path: str | Path) -> dict[int, Detections]:
    grouped: dict[int, list[dict]] = {}
    try:
        with open(path, encoding="utf-8") as f:
            for line_no, line in enumerate(f, 1):
                if line.strip():
                    row = json.loads(line)
                    grouped.setdefault(int(row["image_id"]), []).append(row)
    except (OSError, json.JSONDecodeError, KeyError) as e:
        raise DatasetError(f"cannot read detections {path}: {e}") from e
    return {
        image_id: Detections.sorted(
            torch.tensor([r["box"] for r in rows], dtype=torch.float32),
            torch.tensor([r["class"] for r in rows]),
            torch.tensor([r["score"] for r in rows], dtype=torch.float32),
        )
        for image_id, rows in grouped.items()
    }


# ==================== REPORTS ====================

def write_report(report, directory: str | Path, stem: str = "report") -> list[Path]:
    """EvalReport as a human-readable table and as JSON."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    table = directory / f"{stem}.txt"
    table.write_text(report.format_table() + "\n", encoding="utf-8")
    payload = directory / f"{stem}.json"
    payload.write_text(json.dumps(report.to_json(), indent=2), encoding="utf-8")
    return [table, payload]


def write_corruption_csv(table: Mapping[str, Mapping[int, float]], path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    severities = sorted({s for row in table.values() for s in row})
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(["corruption", *[f"severity_{s}" for s in severities]])
        for kind, row in table.items():
            writer.writerow([kind, *[f"{row[s]:.6f}" for s in severities]])
    return path


def write_rows_csv(rows: Iterable[Mapping[str, Any]], path: str | Path) -> Path:
    rows = list(rows)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.DictWriter(f, fieldnames=list(rows[0]) if rows else [])
        writer.writeheader()
        writer.writerows(rows)
    return path


# ==================== MANIFEST ====================

class RunManifest(BaseModel):
    command: str
    argv: list[str]
    seed: int | None = None
    config: dict[str, Any] | None = None
    inputs: dict[str, str] = Field(default_factory=dict)
    outputs: dict[str, str] = Field(default_factory=dict)
    metrics: dict[str, Any] = Field(default_factory=dict)
    status: Literal["ok", "error"] = "ok"
    error: dict[str, str] | None = None
    created_at: str = Field(default_factory=lambda: datetime.now(timezone.utc).isoformat())


def hash_paths(paths: Iterable[str | Path]) -> dict[str, str]:
    """sha256 of every existing file, walking directories."""
    hashes = {}
    for path in paths:
        path = Path(path)
        files = sorted(p for p in path.rglob("*") if p.is_file()) if path.is_dir() else [path]
        for f in files:
            if f.is_file():
                hashes[str(f)] = file_sha256(f)
    return hashes


def write_manifest(manifest: RunManifest, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(manifest.model_dump_json(indent=2), encoding="utf-8")
    return path
