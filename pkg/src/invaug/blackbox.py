"""Black-box adversarial example generation against a query-only oracle.

Out-of-distribution attack data has no ground-truth labels, so attacks are
guided by k-pseudo-labels: the unordered set of the k most probable classes.
A perturbation succeeds once the perturbed point's pseudo-label is disjoint
from the clean point's. The search is a greedy random-basis walk (SimBA
style): each round samples a fresh orthonormal direction and keeps the +eps
or -eps step if it does not increase the mean probability over the current
pseudo-label's classes.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .datahub import ImageBatch
from .modelzoo import ModelHandle
from .util import derive_seed


class BlackboxError(Exception):
    pass


# ---------------------------------------------------------------------------
# Pseudo-labels


@dataclass(frozen=True)
class PseudoLabel:
    """Unordered set of the k most probable classes of a confidence vector."""

    classes: frozenset[int]
    k: int

    def __post_init__(self) -> None:
        if len(self.classes) != self.k:
            raise ValueError(f"pseudo-label has {len(self.classes)} classes, expected k={self.k}")


def _topk_indices(c: np.ndarray, k: int) -> np.ndarray:
    # ties broken by ascending class index so the function is pure
    return np.lexsort((np.arange(len(c)), -c))[:k]


def pseudo_label(c: np.ndarray | Sequence[float], k: int) -> PseudoLabel:
    """The k-pseudo-label of a confidence vector, ties broken by lowest index."""
    c = np.asarray(c, dtype=np.float64)
    if c.ndim != 1:
        raise ValueError(f"expected a single confidence vector, got shape {c.shape}")
    if not 1 <= k <= len(c):
        raise ValueError(f"k must be in [1, {len(c)}], got {k}")
    idx = _topk_indices(c, k)
    return PseudoLabel(frozenset(int(i) for i in idx), k)


def is_wrong_pseudo_label(original: PseudoLabel, candidate: PseudoLabel) -> bool:
    """True iff the candidate shares no class with the original pseudo-label."""
    if original.k != candidate.k:
        raise ValueError(f"mismatched k: {original.k} vs {candidate.k}")
    return original.classes.isdisjoint(candidate.classes)


# ---------------------------------------------------------------------------
# Direction spaces

PIXEL_BASIS = "pixel-basis"
FREQUENCY_BASIS = "frequency-basis"

_freq_cache: dict[tuple, np.ndarray] = {}


def _frequency_direction(shape: tuple[int, int, int], d: int) -> np.ndarray:
    """Orthonormal 2D DCT basis image for flat index d (one channel active)."""
    key = (shape, d)
    if key not in _freq_cache:
        from scipy.fft import idctn

        c, u, v = np.unravel_index(d, shape)
        coeff = np.zeros(shape[1:], dtype=np.float64)
        coeff[u, v] = 1.0
        q = np.zeros(shape, dtype=np.float32)
        q[c] = idctn(coeff, norm="ortho").astype(np.float32)
        _freq_cache[key] = q
    return _freq_cache[key]


def _apply_steps(
    z: np.ndarray, dirs: np.ndarray, alpha: float, direction_space: str
) -> np.ndarray:
    """clip(z + alpha * q_d) for each row's own direction index."""
    cand = z.copy()
    if direction_space == PIXEL_BASIS:
        flat = cand.reshape(len(cand), -1)
        flat[np.arange(len(cand)), dirs] += alpha
    elif direction_space == FREQUENCY_BASIS:
        shape = z.shape[1:]
        for row, d in enumerate(dirs):
            cand[row] += alpha * _frequency_direction(shape, int(d))
    else:
        raise BlackboxError(f"unknown direction space {direction_space!r}")
    return np.clip(cand, 0.0, 1.0)


# ---------------------------------------------------------------------------
# Attack traces


@dataclass
class AttackTrace:
    """Everything one attack produced, sufficient to audit every invariant."""

    delta: np.ndarray  # post-clip; clean + delta is always a valid image
    queries_used: int
    accepted_steps: int
    success: bool
    final_confidences: np.ndarray
    pr_k_history: list[float]
    accepted_directions: list[int]
    rounds_executed: int
    original_pseudo: PseudoLabel
    final_pseudo: PseudoLabel
    epsilon: float
    k: int

    @property
    def delta_l2(self) -> float:
        return float(np.linalg.norm(self.delta.ravel()))


@dataclass
class SimbaParams:
    epsilon: float = 0.2
    k: int = 3
    max_rounds: int = 200
    direction_space: str = PIXEL_BASIS


def _validate_params(num_classes: int, epsilon: float, k: int, max_rounds: int) -> None:
    if epsilon <= 0:
        raise ValueError(f"epsilon must be > 0, got {epsilon}")
    if max_rounds < 1:
        raise ValueError(f"max_rounds must be >= 1, got {max_rounds}")
    if not 1 <= k <= num_classes:
        raise ValueError(f"k must be in [1, {num_classes}], got {k}")
    if 2 * k > num_classes:
        raise ValueError(
            f"no disjoint wrong pseudo-label exists for k={k} with {num_classes} classes "
            "(2k > C); refuse to start"
        )


def _run_simba(
    oracle: ModelHandle,
    xs: np.ndarray,
    epsilon: float,
    k: int,
    max_rounds: int,
    direction_space: str,
    seeds: Sequence[int],
) -> list[AttackTrace]:
    """Lockstep greedy walk for a batch of independent per-image attacks.

    Each image follows exactly the sequential algorithm under its own RNG
    stream; batching only groups the oracle queries of one round together.
    """
    n = len(xs)
    if n == 0:
        return []
    num_classes = oracle.num_classes
    _validate_params(num_classes, epsilon, k, max_rounds)
    if xs.min() < -1e-6 or xs.max() > 1 + 1e-6:
        raise ValueError("attack inputs must lie in [0,1]")
    n_dirs = int(np.prod(xs.shape[1:]))

    probs0 = oracle.query(xs)
    originals = [pseudo_label(probs0[i], k) for i in range(n)]
    orig_sets = [pl.classes for pl in originals]
    pr = np.array(
        [probs0[i].astype(np.float64)[_topk_indices(probs0[i], k)].mean() for i in range(n)]
    )
    z = xs.astype(np.float32).copy()
    queries = np.ones(n, dtype=np.int64)
    rounds = np.zeros(n, dtype=np.int64)
    accepted = np.zeros(n, dtype=np.int64)
    pr_hist: list[list[float]] = [[float(pr[i])] for i in range(n)]
    acc_dirs: list[list[int]] = [[] for _ in range(n)]
    final_probs = probs0.copy()
    final_pse = list(originals)
    success = np.zeros(n, dtype=bool)
    done = np.zeros(n, dtype=bool)
    perms = np.stack(
        [
            np.random.default_rng(derive_seed(int(s), "dirs")).permutation(n_dirs)
            for s in seeds
        ]
    )

    def commit(i: int, cand_row: np.ndarray, p_row: np.ndarray, d: int) -> None:
        z[i] = cand_row
        p64 = p_row.astype(np.float64)
        pse = pseudo_label(p64, k)
        pr[i] = p64[_topk_indices(p64, k)].mean()
        accepted[i] += 1
        pr_hist[i].append(float(pr[i]))
        acc_dirs[i].append(int(d))
        final_probs[i] = p_row
        final_pse[i] = pse
        if orig_sets[i].isdisjoint(pse.classes):
            success[i] = True
            done[i] = True

    for r in range(min(max_rounds, n_dirs)):
        idx_a = np.nonzero(~done)[0]
        if len(idx_a) == 0:
            break
        rounds[idx_a] += 1
        dirs_a = perms[idx_a, r]

        cand_p = _apply_steps(z[idx_a], dirs_a, +epsilon, direction_space)
        p_plus = oracle.query(cand_p)
        queries[idx_a] += 1
        pr_plus = np.array(
            [
                p_plus[j].astype(np.float64)[_topk_indices(p_plus[j], k)].mean()
                for j in range(len(idx_a))
            ]
        )
        acc_plus = pr_plus <= pr[idx_a]
        for j in np.nonzero(acc_plus)[0]:
            commit(int(idx_a[j]), cand_p[j], p_plus[j], int(dirs_a[j]))

        idx_b = idx_a[~acc_plus]
        if len(idx_b) == 0:
            continue
        dirs_b = dirs_a[~acc_plus]
        cand_m = _apply_steps(z[idx_b], dirs_b, -epsilon, direction_space)
        p_minus = oracle.query(cand_m)
        queries[idx_b] += 1
        pr_minus = np.array(
            [
                p_minus[j].astype(np.float64)[_topk_indices(p_minus[j], k)].mean()
                for j in range(len(idx_b))
            ]
        )
        acc_minus = pr_minus <= pr[idx_b]
        for j in np.nonzero(acc_minus)[0]:
            commit(int(idx_b[j]), cand_m[j], p_minus[j], int(dirs_b[j]))

    return [
        AttackTrace(
            delta=z[i] - xs[i],
            queries_used=int(queries[i]),
            accepted_steps=int(accepted[i]),
            success=bool(success[i]),
            final_confidences=final_probs[i],
            pr_k_history=pr_hist[i],
            accepted_directions=acc_dirs[i],
            rounds_executed=int(rounds[i]),
            original_pseudo=originals[i],
            final_pseudo=final_pse[i],
            epsilon=epsilon,
            k=k,
        )
        for i in range(n)
    ]


def simba_pseudo(
    oracle: ModelHandle,
    x: ImageBatch | np.ndarray,
    epsilon: float,
    k: int,
    max_rounds: int,
    direction_space: str = PIXEL_BASIS,
    seed: int = 0,
) -> AttackTrace:
    """Attack a single image; returns the trace (budget exhaustion is not an error)."""
    pixels = x.pixels if isinstance(x, ImageBatch) else np.asarray(x, dtype=np.float32)
    if pixels.ndim == 3:
        pixels = pixels[None]
    if pixels.shape[0] != 1:
        raise ValueError("simba_pseudo attacks one image; use simba_batch for many")
    return _run_simba(oracle, pixels, epsilon, k, max_rounds, direction_space, [seed])[0]


def simba_batch(
    oracle: ModelHandle,
    xs: ImageBatch | np.ndarray,
    params: SimbaParams,
    seed: int = 0,
) -> list[AttackTrace]:
    """Independent per-image attacks; image i uses the RNG stream (seed, i).

    Budget sweeps with the same seed are prefix-deterministic per image, so
    success at a smaller budget is preserved verbatim at a larger one.
    """
    pixels = xs.pixels if isinstance(xs, ImageBatch) else np.asarray(xs, dtype=np.float32)
    if pixels.shape[0] == 0:
        return []
    seeds = [derive_seed(seed, "image", i) for i in range(len(pixels))]
    return _run_simba(
        oracle, pixels, params.epsilon, params.k, params.max_rounds,
        params.direction_space, seeds,
    )


def batch_summary(traces: Sequence[AttackTrace]) -> dict:
    """Aggregate report: ASR, mean ||delta||_2 over successes, mean queries."""
    n = len(traces)
    successes = [t for t in traces if t.success]
    return {
        "count": n,
        "successes": len(successes),
        "asr": len(successes) / n if n else 0.0,
        "mean_l2": float(np.mean([t.delta_l2 for t in successes])) if successes else None,
        "mean_queries": float(np.mean([t.queries_used for t in traces])) if n else 0.0,
        "mean_rounds": float(np.mean([t.rounds_executed for t in traces])) if n else 0.0,
    }


# ---------------------------------------------------------------------------
# On-disk adversarial cache: one PNG per adversarial example + a CSV index

CACHE_INDEX = "index.csv"


@dataclass
class AdversarialRecord:
    """One finalized cache row; adv_image present only for successes."""

    ancestor_hash: str
    success: bool
    delta_l2: float
    queries_used: int
    adv_image: np.ndarray | None = None  # uint8 (C, H, W)
    soft_label: np.ndarray | None = None
    png_name: str = ""
    original_pseudo: tuple[int, ...] = field(default_factory=tuple)


def _to_pil(img_u8: np.ndarray):
    from PIL import Image

    if img_u8.shape[0] == 1:
        return Image.fromarray(img_u8[0], mode="L")
    return Image.fromarray(img_u8.transpose(1, 2, 0), mode="RGB")


def _from_pil(img) -> np.ndarray:
    arr = np.asarray(img, dtype=np.uint8)
    if arr.ndim == 2:
        return arr[None]
    return arr.transpose(2, 0, 1)


def write_adversarial_cache(cache_dir: str | Path, records: Sequence[AdversarialRecord]) -> None:
    cache_dir = Path(cache_dir)
    cache_dir.mkdir(parents=True, exist_ok=True)
    rows = []
    for i, rec in enumerate(records):
        png_name = ""
        if rec.success:
            assert rec.adv_image is not None and rec.soft_label is not None
            png_name = f"adv_{i:05d}_{rec.ancestor_hash[:12]}.png"
            _to_pil(rec.adv_image).save(cache_dir / png_name)
        rec.png_name = png_name
        soft = (
            ",".join(f"{p:.9f}" for p in rec.soft_label) if rec.soft_label is not None else ""
        )
        rows.append(
            {
                "image_hash": rec.ancestor_hash,
                "png": png_name,
                "success": int(rec.success),
                "delta_l2": f"{rec.delta_l2:.9f}",
                "queries_used": rec.queries_used,
                "original_pseudo": ";".join(str(c) for c in rec.original_pseudo),
                "adv_soft_label": soft,
            }
        )
    with open(cache_dir / CACHE_INDEX, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=list(rows[0].keys()) if rows else ["image_hash"])
        writer.writeheader()
        writer.writerows(rows)


def read_adversarial_cache(cache_dir: str | Path) -> list[AdversarialRecord]:
    from PIL import Image

    cache_dir = Path(cache_dir)
    records = []
    with open(cache_dir / CACHE_INDEX, newline="") as f:
        for row in csv.DictReader(f):
            success = bool(int(row["success"]))
            adv = None
            soft = None
            if success:
                adv = _from_pil(Image.open(cache_dir / row["png"]))
                soft = np.asarray([float(p) for p in row["adv_soft_label"].split(",")], np.float32)
            records.append(
                AdversarialRecord(
                    ancestor_hash=row["image_hash"],
                    success=success,
                    delta_l2=float(row["delta_l2"]),
                    queries_used=int(row["queries_used"]),
                    adv_image=adv,
                    soft_label=soft,
                    png_name=row["png"],
                    original_pseudo=tuple(
                        int(c) for c in row["original_pseudo"].split(";") if c
                    ),
                )
            )
    return records
