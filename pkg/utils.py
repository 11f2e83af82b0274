"""
Utility functions module.
Contains deterministic random streams and content hashing.
"""
from __future__ import annotations

import hashlib
from pathlib import Path
from typing import Iterable, Mapping

import torch


def seeded_rng(seed: int, stream_label: str) -> torch.Generator:
    """
    Return a CPU generator for the (seed, label) stream.
    The derived seed goes through sha256, so it does not depend on Python's
    salted `hash` and is stable across runs and platforms.
    """
    digest = hashlib.sha256(f"{int(seed)}:{stream_label}".encode("utf-8")).digest()
    generator = torch.Generator(device="cpu")
    generator.manual_seed(int.from_bytes(digest[:8], "little") & 0x7FFF_FFFF_FFFF_FFFF)
    return generator


def image_noise_rng(seed: int, image_id: int) -> torch.Generator:
    """Per-image inference noise stream (global seed xor image id)."""
    return seeded_rng(int(seed) ^ int(image_id), "inference-noise")


def uniform(rng: torch.Generator, low: float = 0.0, high: float = 1.0) -> float:
    return low + (high - low) * float(torch.rand((), generator=rng))


def randint(rng: torch.Generator, low: int, high: int) -> int:
    """Integer in [low, high)."""
    return int(torch.randint(low, high, (), generator=rng))


def content_hash(tensors: Mapping[str, torch.Tensor] | Iterable[tuple[str, torch.Tensor]]) -> str:
    """sha256 over sorted names, dtypes, shapes and raw bytes of the tensors."""
    items = tensors.items() if isinstance(tensors, Mapping) else tensors
    h = hashlib.sha256()
    for name, tensor in sorted(items, key=lambda item: item[0]):
        t = tensor.detach().cpu().contiguous()
        h.update(name.encode("utf-8"))
        h.update(str(t.dtype).encode("utf-8"))
        h.update(str(tuple(t.shape)).encode("utf-8"))
        h.update(t.reshape(-1).view(torch.uint8).numpy().tobytes() if t.numel() else b"")
    return h.hexdigest()


def file_sha256(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()
