"""Shadow-model distillation: harvest the target's soft labels on public data
once, then train a differentiable substitute on the cached responses.

The harvest is the only place the target is queried; training consumes the
cache and never touches the oracle again.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

import numpy as np
import torch

from .datahub import ImageBatch, image_hashes
from .modelzoo import (
    ModelHandle,
    TrainConfig,
    TrainingDivergedError,
    _make_optimizer,
    soft_cross_entropy,
)
from .util import derive_seed, stable_hash

CACHE_FORMAT_VERSION = 1


class DistillError(Exception):
    pass


@dataclass
class DistillSet:
    """Public images paired with the target's cached soft labels."""

    images: np.ndarray  # (N, C, H, W) float32 in [0,1]
    targets: np.ndarray  # (N, num_classes) float32 rows on the simplex
    target_fingerprint: str
    hashes: list[str]

    def __len__(self) -> int:
        return int(self.images.shape[0])


def target_fingerprint(target: ModelHandle, manifest_checksum: str) -> str:
    """Cache key binding the harvested labels to (weights, split)."""
    return stable_hash({"weights": target.state_fingerprint(), "manifest": manifest_checksum})


def _cache_paths(cache_dir: Path) -> tuple[Path, Path]:
    return cache_dir / "header.json", cache_dir / "records.npz"


def _load_cache(cache_dir: Path) -> tuple[str, dict[str, np.ndarray]]:
    header_path, records_path = _cache_paths(cache_dir)
    if not header_path.exists() or not records_path.exists():
        return "", {}
    header = json.loads(header_path.read_text())
    if header.get("format_version") != CACHE_FORMAT_VERSION:
        return "", {}
    with np.load(records_path, allow_pickle=False) as z:
        hashes = [str(h) for h in z["hashes"]]
        probs = z["probs"]
    return header["fingerprint"], dict(zip(hashes, probs))


def _write_cache(cache_dir: Path, fingerprint: str, records: dict[str, np.ndarray]) -> None:
    cache_dir.mkdir(parents=True, exist_ok=True)
    header_path, records_path = _cache_paths(cache_dir)
    header_path.write_text(
        json.dumps(
            {
                "format_version": CACHE_FORMAT_VERSION,
                "fingerprint": fingerprint,
                "count": len(records),
            },
            indent=2,
        )
    )
    hashes = list(records)
    probs = np.stack([records[h] for h in hashes]) if records else np.zeros((0, 0), np.float32)
    with open(records_path, "wb") as f:
        np.savez(f, hashes=np.asarray(hashes), probs=probs.astype(np.float32))


def harvest_soft_labels(
    target: ModelHandle,
    data: Iterable[ImageBatch],
    fingerprint: str,
    cache_dir: str | Path | None = None,
) -> DistillSet:
    """Query the target exactly once per public image, reusing any valid cache.

    A cache whose fingerprint does not match is discarded wholesale. If the
    oracle fails mid-harvest, the partial cache is flushed before the error
    propagates, so a retry only queries the remainder.
    """
    cached: dict[str, np.ndarray] = {}
    if cache_dir is not None:
        cache_dir = Path(cache_dir)
        cached_fp, cached = _load_cache(cache_dir)
        if cached_fp != fingerprint:
            cached = {}

    images: list[np.ndarray] = []
    hashes: list[str] = []
    targets: list[np.ndarray | None] = []
    pending_idx: list[int] = []
    pending_px: list[np.ndarray] = []
    for batch in data:
        h_batch = image_hashes(batch.pixels)
        for i, h in enumerate(h_batch):
            images.append(batch.pixels[i])
            hashes.append(h)
            if h in cached:
                targets.append(cached[h])
            else:
                targets.append(None)
                pending_idx.append(len(images) - 1)
                pending_px.append(batch.pixels[i])

    try:
        for start in range(0, len(pending_idx), 256):
            chunk_idx = pending_idx[start : start + 256]
            chunk_px = np.stack(pending_px[start : start + 256])
            probs = target.query(chunk_px)
            for j, idx in enumerate(chunk_idx):
                targets[idx] = probs[j]
                cached[hashes[idx]] = probs[j]
    except Exception:
        if cache_dir is not None:
            _write_cache(cache_dir, fingerprint, cached)
        raise

    if cache_dir is not None:
        _write_cache(cache_dir, fingerprint, cached)
    return DistillSet(
        images=np.stack(images),
        targets=np.stack(targets).astype(np.float32),  # type: ignore[arg-type]
        target_fingerprint=fingerprint,
        hashes=hashes,
    )


def top1_agreement(shadow: ModelHandle, dset: DistillSet) -> float:
    """Fraction of images where the shadow's argmax matches the cached target's."""
    preds = shadow.query(dset.images).argmax(1)
    return float((preds == dset.targets.argmax(1)).mean())


def train_shadow(
    shadow: ModelHandle,
    dset: DistillSet,
    hyper: TrainConfig,
    holdout: DistillSet | None = None,
    temperature: float = 1.0,
    batch_size: int = 128,
) -> tuple[ModelHandle, list[dict]]:
    """Distill the cached soft labels into the shadow with soft-target CE.

    Returns the trained handle and a per-epoch log carrying loss and top-1
    agreement with the target (on `holdout` when given, else the train cache).
    A non-decreasing loss between epochs is logged as a warning flag, not an
    error.
    """
    if not shadow.differentiable:
        raise DistillError("shadow must be differentiable")
    if shadow.num_classes != dset.targets.shape[1]:
        raise DistillError(
            f"shadow outputs {shadow.num_classes} classes, cache has {dset.targets.shape[1]}"
        )
    trained = shadow.clone()
    module = trained.torch_module()
    if hyper.epochs == 0:
        return trained, []
    opt = _make_optimizer(module, hyper)
    x_all = torch.from_numpy(dset.images)
    t_all = torch.from_numpy(dset.targets)
    if temperature != 1.0:
        t_all = torch.softmax(torch.log(t_all.clamp(min=1e-30)) / temperature, dim=1)
    log: list[dict] = []
    prev_loss = float("inf")
    for epoch in range(hyper.epochs):
        module.train()
        rng = np.random.default_rng(derive_seed(hyper.seed, "shadow-epoch", epoch))
        order = rng.permutation(len(dset))
        loss_sum = 0.0
        for i, start in enumerate(range(0, len(order), batch_size)):
            idx = order[start : start + batch_size]
            opt.zero_grad()
            logits = module(x_all[idx])
            if temperature != 1.0:
                logits = logits / temperature
            loss = soft_cross_entropy(logits, t_all[idx])
            if not torch.isfinite(loss):
                raise TrainingDivergedError(f"non-finite distill loss at epoch {epoch}", i)
            loss.backward()
            opt.step()
            loss_sum += loss.item() * len(idx)
        module.eval()
        epoch_loss = loss_sum / len(dset)
        entry = {
            "epoch": epoch,
            "loss": epoch_loss,
            "agreement": top1_agreement(trained, holdout if holdout is not None else dset),
        }
        if epoch_loss > prev_loss:
            entry["loss_increased"] = True
        prev_loss = epoch_loss
        log.append(entry)
    return trained, log
