"""Assemble the inversion model's training set: every clean public sample with
its cached soft label, plus one finalized adversarial example per successful
attack, carrying the label the crafting oracle assigns to the perturbed image.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .blackbox import AdversarialRecord, AttackTrace, is_wrong_pseudo_label, pseudo_label
from .distill import DistillSet
from .modelzoo import ModelHandle
from .util import derive_seed


class AugmentError(Exception):
    pass


@dataclass
class AttackSample:
    """One inversion-training record: image, soft-label supervision, provenance."""

    image: np.ndarray  # (C, H, W) float32 in [0,1]
    supervision: np.ndarray  # (num_classes,) on the simplex
    provenance: str  # "clean" | "adversarial"
    source_hash: str  # hash of the clean ancestor


@dataclass
class AugmentPolicy:
    """adv_ratio = fraction of successful traces injected (1.0 = one per success)."""

    adv_ratio: float = 1.0
    shuffle_seed: int = 0


def finalize_traces(
    oracle: ModelHandle,
    clean_images: np.ndarray,
    clean_hashes: Sequence[str],
    traces: Sequence[AttackTrace],
) -> list[AdversarialRecord]:
    """Quantize successful perturbations to the PNG pixel grid and re-label.

    The stored adversarial image is uint8, so the cached supervision is the
    oracle's answer on exactly the image that will be read back; disjointness
    is re-verified after quantization and the rare violators are demoted to
    failures.
    """
    if len(traces) != len(clean_images):
        raise AugmentError("one trace per clean image expected")
    records: list[AdversarialRecord] = []
    success_idx = [i for i, t in enumerate(traces) if t.success]
    quantized: list[np.ndarray] = []
    for i in success_idx:
        adv = np.clip(clean_images[i] + traces[i].delta, 0.0, 1.0)
        quantized.append(np.rint(adv * 255.0).astype(np.uint8))
    soft = (
        oracle.query(np.stack(quantized).astype(np.float32) / 255.0)
        if quantized
        else np.zeros((0, 0))
    )
    by_index = dict(zip(success_idx, range(len(success_idx))))
    for i, trace in enumerate(traces):
        ok = trace.success
        adv_u8 = None
        label = None
        if trace.success:
            j = by_index[i]
            label = soft[j]
            cand = pseudo_label(label, trace.k)
            ok = is_wrong_pseudo_label(trace.original_pseudo, cand)
            adv_u8 = quantized[j] if ok else None
            label = label if ok else None
        records.append(
            AdversarialRecord(
                ancestor_hash=clean_hashes[i],
                success=bool(ok),
                delta_l2=trace.delta_l2,
                queries_used=trace.queries_used,
                adv_image=adv_u8,
                soft_label=label,
                original_pseudo=tuple(sorted(trace.original_pseudo.classes)),
            )
        )
    return records


def build_training_set(
    clean: DistillSet,
    records: Sequence[AdversarialRecord],
    policy: AugmentPolicy | None = None,
) -> list[AttackSample]:
    """Every clean sample exactly once, plus adversarial samples per policy.

    Augmentation is additive: the clean multiset is never altered. Failed
    attacks contribute nothing.
    """
    policy = policy or AugmentPolicy()
    clean_by_hash = {h: i for i, h in enumerate(clean.hashes)}
    samples = [
        AttackSample(
            image=clean.images[i],
            supervision=clean.targets[i],
            provenance="clean",
            source_hash=h,
        )
        for i, h in enumerate(clean.hashes)
    ]
    successes = [r for r in records if r.success]
    for rec in successes:
        if rec.ancestor_hash not in clean_by_hash:
            raise AugmentError(f"trace references unknown ancestor {rec.ancestor_hash[:12]}")
    n_take = int(round(len(successes) * policy.adv_ratio))
    if policy.adv_ratio < 1.0:
        rng = np.random.default_rng(derive_seed(policy.shuffle_seed, "adv-subset"))
        successes = [successes[i] for i in sorted(rng.permutation(len(successes))[:n_take])]
    for rec in successes:
        samples.append(
            AttackSample(
                image=rec.adv_image.astype(np.float32) / 255.0,
                supervision=np.asarray(rec.soft_label, dtype=np.float32),
                provenance="adversarial",
                source_hash=rec.ancestor_hash,
            )
        )
    rng = np.random.default_rng(derive_seed(policy.shuffle_seed, "mix"))
    return [samples[i] for i in rng.permutation(len(samples))]


def disjointness_audit(samples: Sequence[AttackSample], k: int) -> float:
    """Fraction of adversarial samples whose supervision pseudo-label is
    disjoint from their clean ancestor's (1.0 required)."""
    clean_sup = {s.source_hash: s.supervision for s in samples if s.provenance == "clean"}
    adv = [s for s in samples if s.provenance == "adversarial"]
    if not adv:
        return 1.0
    good = 0
    for s in adv:
        ancestor = clean_sup.get(s.source_hash)
        if ancestor is None:
            continue
        if is_wrong_pseudo_label(pseudo_label(ancestor, k), pseudo_label(s.supervision, k)):
            good += 1
    return good / len(adv)


def training_set_manifest(samples: Sequence[AttackSample]) -> dict:
    """Counts per provenance plus the adversarial -> ancestor mapping."""
    counts: dict[str, int] = {}
    for s in samples:
        counts[s.provenance] = counts.get(s.provenance, 0) + 1
    ancestry = [
        s.source_hash for s in samples if s.provenance == "adversarial"
    ]
    return {"counts": counts, "adversarial_ancestors": ancestry}
