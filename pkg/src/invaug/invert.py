"""Inversion model training under the regularized objective
total = reconstruction + lambda * semantic.

The semantic term scores the reconstruction with the frozen shadow model and
backpropagates through it into the decoder; the black-box target only ever
contributes cached soft labels.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from .augment import AttackSample
from .modelzoo import (
    ModelHandle,
    TrainConfig,
    TrainingDivergedError,
    _make_optimizer,
    PROB_FLOOR,
)
from .util import derive_seed

RECON_METRICS = ("mse", "psnr", "ssim")
_PSNR_MSE_FLOOR = 1e-12


class InvertError(Exception):
    pass


@dataclass
class InversionLossConfig:
    lam: float = 0.0  # weight of the semantic term; 0 = reconstruction-only baseline
    recon_metric: str = "mse"
    semantic_backend: ModelHandle | None = None  # the differentiable shadow

    def __post_init__(self) -> None:
        if self.lam < 0:
            raise ValueError("lambda must be >= 0")
        if self.recon_metric not in RECON_METRICS:
            raise ValueError(f"recon_metric must be one of {RECON_METRICS}")
        if self.lam > 0 and self.semantic_backend is None:
            raise ValueError("lambda > 0 needs a semantic backend (shadow model)")


def _as_tensor(x) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x
    return torch.from_numpy(np.asarray(x, dtype=np.float32))


# ---------------------------------------------------------------------------
# Loss terms


def _gaussian_window(size: int = 11, sigma: float = 1.5) -> torch.Tensor:
    coords = torch.arange(size, dtype=torch.float64) - (size - 1) / 2
    g = torch.exp(-(coords**2) / (2 * sigma**2))
    return (g / g.sum()).to(torch.float32)


def _ssim_per_image(x: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    """Mean SSIM per image; gaussian 11x11 window, valid region only.

    Matches the standard formulation (data range 1, K1=0.01, K2=0.03,
    gaussian-weighted moments): interior-only averaging sidesteps boundary
    padding conventions.
    """
    n, c, h, w = x.shape
    win = _gaussian_window()
    size = win.numel()
    if h < size or w < size:
        raise InvertError(f"images too small for {size}x{size} SSIM window")
    kernel = (win[:, None] * win[None, :]).expand(c, 1, size, size)

    def filt(t: torch.Tensor) -> torch.Tensor:
        return torch.nn.functional.conv2d(t, kernel, groups=c)

    c1, c2 = 0.01**2, 0.03**2
    mu_x, mu_y = filt(x), filt(y)
    sxx = filt(x * x) - mu_x * mu_x
    syy = filt(y * y) - mu_y * mu_y
    sxy = filt(x * y) - mu_x * mu_y
    s = ((2 * mu_x * mu_y + c1) * (2 * sxy + c2)) / (
        (mu_x**2 + mu_y**2 + c1) * (sxx + syy + c2)
    )
    return s.reshape(n, -1).mean(dim=1)


def _psnr_per_image(x: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    mse = ((x - y) ** 2).reshape(len(x), -1).mean(dim=1)
    return 10.0 * torch.log10(1.0 / mse.clamp(min=_PSNR_MSE_FLOOR))


def reconstruction_loss(x, xhat, metric: str = "mse") -> torch.Tensor:
    """Pixel-space training loss; PSNR/SSIM are negated so lower is better.

    mse reduces to the mean over all pixels of the batch. Differentiable when
    given tensors.
    """
    xt, yt = _as_tensor(x), _as_tensor(xhat)
    if xt.shape != yt.shape:
        raise InvertError(f"shape mismatch: {tuple(xt.shape)} vs {tuple(yt.shape)}")
    if metric == "mse":
        return ((xt - yt) ** 2).mean()
    if metric == "psnr":
        return -_psnr_per_image(xt, yt).mean()
    if metric == "ssim":
        return -_ssim_per_image(xt, yt).mean()
    raise InvertError(f"unknown reconstruction metric {metric!r}")


def ssim_quality(x, xhat) -> float:
    """Plain SSIM score in [-1, 1] (1 = identical); reporting convenience."""
    return float(_ssim_per_image(_as_tensor(x), _as_tensor(xhat)).mean())


def _freeze(handle: ModelHandle) -> torch.nn.Module:
    module = handle.torch_module()
    module.eval()
    for p in module.parameters():
        p.requires_grad_(False)
    return module


def semantic_loss(xhat, supervision, shadow: ModelHandle) -> torch.Tensor:
    """Soft-target cross-entropy of shadow(xhat) against the cached label.

    -sum_i t_i log max(p_i, floor), averaged over the batch; gradients flow
    into xhat, the shadow's weights stay frozen.
    """
    if not shadow.differentiable:
        raise InvertError("semantic loss needs a differentiable shadow model")
    module = _freeze(shadow)
    xt = _as_tensor(xhat)
    st = _as_tensor(supervision)
    if st.ndim != 2 or len(st) != len(xt):
        raise InvertError("supervision must be (N, num_classes) matching the batch")
    logits = module(xt)
    logp = torch.clamp(torch.log_softmax(logits, dim=1), min=math.log(PROB_FLOOR))
    return -(st * logp).sum(dim=1).mean()


# ---------------------------------------------------------------------------
# Training and inference


def reconstruct(inv: ModelHandle, supervision: np.ndarray) -> np.ndarray:
    """Decode confidence vectors back to images in [0,1]."""
    sup = np.asarray(supervision, dtype=np.float32)
    if sup.ndim == 1:
        sup = sup[None]
    if sup.shape[1] != inv.num_classes:
        raise InvertError(
            f"supervision width {sup.shape[1]} does not match decoder input {inv.num_classes}"
        )
    module = inv.torch_module()
    module.eval()
    with torch.no_grad():
        out = module(torch.from_numpy(sup)).numpy()
    return out


def train_inversion(
    inv: ModelHandle,
    samples: Sequence[AttackSample],
    losscfg: InversionLossConfig,
    hyper: TrainConfig,
    batch_size: int = 128,
    sink: Callable[[dict], None] | None = None,
    grid_dir: str | Path | None = None,
    grid_every: int = 0,
) -> tuple[ModelHandle, list[dict]]:
    """Train the decoder on (supervision -> image) pairs.

    Per-epoch log records the reconstruction and semantic components
    separately; with lambda = 0 the semantic path is skipped entirely, which
    makes the run bit-identical to a reconstruction-only baseline.
    """
    if not inv.differentiable:
        raise InvertError("inversion model must be differentiable")
    if not samples:
        raise InvertError("empty training set")
    trained = inv.clone()
    module = trained.torch_module()
    if hyper.epochs == 0:
        return trained, []
    images = torch.from_numpy(np.stack([s.image for s in samples]))
    sups = torch.from_numpy(np.stack([s.supervision for s in samples]).astype(np.float32))
    use_semantic = losscfg.lam > 0
    shadow_module = _freeze(losscfg.semantic_backend) if use_semantic else None

    opt = _make_optimizer(module, hyper)
    log: list[dict] = []
    for epoch in range(hyper.epochs):
        module.train()
        order = np.random.default_rng(derive_seed(hyper.seed, "inv-epoch", epoch)).permutation(
            len(samples)
        )
        sum_r, sum_s, seen = 0.0, 0.0, 0
        for bi, start in enumerate(range(0, len(order), batch_size)):
            idx = order[start : start + batch_size]
            sup_b = sups[idx]
            img_b = images[idx]
            opt.zero_grad()
            xhat = module(sup_b)
            loss_r = reconstruction_loss(img_b, xhat, losscfg.recon_metric)
            loss = loss_r
            loss_s = None
            if use_semantic:
                logits = shadow_module(xhat)
                logp = torch.clamp(torch.log_softmax(logits, dim=1), min=math.log(PROB_FLOOR))
                loss_s = -(sup_b * logp).sum(dim=1).mean()
                loss = loss_r + losscfg.lam * loss_s
            if not torch.isfinite(loss):
                raise TrainingDivergedError(
                    f"non-finite inversion loss at epoch {epoch}, batch {bi}", batch_index=bi
                )
            loss.backward()
            opt.step()
            sum_r += loss_r.item() * len(idx)
            if loss_s is not None:
                sum_s += loss_s.item() * len(idx)
            seen += len(idx)
        module.eval()
        entry = {
            "epoch": epoch,
            "loss_r": sum_r / seen,
            "loss_s": (sum_s / seen) if use_semantic else None,
            "total": (sum_r + losscfg.lam * sum_s) / seen if use_semantic else sum_r / seen,
        }
        log.append(entry)
        if sink is not None:
            sink(entry)
        if grid_dir is not None and grid_every > 0 and (epoch + 1) % grid_every == 0:
            grid = reconstruct(trained, sups[:64].numpy())
            save_image_grid(grid, Path(grid_dir) / f"recon_epoch{epoch:03d}.png")
    return trained, log


def save_image_grid(images: np.ndarray, path: str | Path, ncol: int = 8) -> None:
    """Tile a batch of [0,1] images into one PNG."""
    from PIL import Image

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    imgs = np.clip(np.asarray(images), 0, 1)
    n, c, h, w = imgs.shape
    ncol = min(ncol, n)
    nrow = (n + ncol - 1) // ncol
    canvas = np.zeros((c, nrow * h, ncol * w), dtype=np.float32)
    for i in range(n):
        r, col = divmod(i, ncol)
        canvas[:, r * h : (r + 1) * h, col * w : (col + 1) * w] = imgs[i]
    arr = (canvas * 255).astype(np.uint8)
    if c == 1:
        Image.fromarray(arr[0], mode="L").save(path)
    else:
        Image.fromarray(arr.transpose(1, 2, 0), mode="RGB").save(path)
