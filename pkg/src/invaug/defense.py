"""FGSM adversarial training of victim classifiers, plus the robust-accuracy
bookkeeping needed to chart the accuracy/robustness/privacy trade-off."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch
from torch import nn

from .datahub import ImageBatch
from .modelzoo import (
    ModelHandle,
    TrainConfig,
    TrainingDivergedError,
    _make_optimizer,
)


class DefenseError(Exception):
    pass


@dataclass
class DefenseConfig:
    gamma: float  # FGSM perturbation bound used during training
    mix_ratio: float = 0.5  # fraction of each batch replaced by FGSM examples
    warmup_epochs: int = 3  # gamma ramps linearly over the first epochs; stabilizes large bounds

    def __post_init__(self) -> None:
        if self.gamma <= 0:
            raise ValueError("gamma must be > 0")
        if not 0.0 <= self.mix_ratio <= 1.0:
            raise ValueError("mix_ratio must be in [0,1]")
        if self.warmup_epochs < 0:
            raise ValueError("warmup_epochs must be >= 0")


def _mapped_labels(labels: np.ndarray, label_map: Sequence[int] | None) -> np.ndarray:
    if label_map is None:
        return labels
    lut = {int(c): i for i, c in enumerate(label_map)}
    return np.asarray([lut[int(l)] for l in labels], dtype=np.int64)


def fgsm_step(
    model: ModelHandle,
    x: ImageBatch | np.ndarray,
    labels: Sequence[int] | None,
    gamma: float,
    label_map: Sequence[int] | None = None,
) -> np.ndarray:
    """x' = clip(x + gamma * sign(grad_x CE(model(x), labels)), 0, 1)."""
    if gamma <= 0:
        raise ValueError("gamma must be > 0")
    if labels is None:
        raise DefenseError("fgsm_step needs labels")
    pixels = x.pixels if isinstance(x, ImageBatch) else np.asarray(x, dtype=np.float32)
    y = _mapped_labels(np.asarray(labels, dtype=np.int64), label_map)
    module = model.torch_module()
    module.eval()
    xt = torch.from_numpy(pixels).clone().requires_grad_(True)
    loss = nn.functional.cross_entropy(module(xt), torch.from_numpy(y))
    (grad,) = torch.autograd.grad(loss, xt)
    adv = (xt.detach() + gamma * grad.sign()).clamp(0.0, 1.0)
    return adv.numpy()


def robust_accuracy(
    model: ModelHandle,
    batch: ImageBatch,
    gamma: float,
    label_map: Sequence[int] | None = None,
) -> float:
    """Accuracy on FGSM examples crafted against the model itself at bound gamma."""
    if batch.labels is None:
        raise DefenseError("robust accuracy needs labels")
    adv = fgsm_step(model, batch, batch.labels, gamma, label_map)
    y = _mapped_labels(batch.labels, label_map)
    preds = model.query(adv).argmax(1)
    return float((preds == y).mean())


def adversarial_train(
    model: ModelHandle,
    data,
    defcfg: DefenseConfig,
    hyper: TrainConfig,
    label_map: Sequence[int] | None = None,
    eval_batch: ImageBatch | None = None,
) -> tuple[ModelHandle, list[dict]]:
    """Mixed clean/FGSM training; adversarial examples keep their true labels.

    The per-epoch log records standard accuracy and robust accuracy (on
    `eval_batch` when provided). `data` is a list of batches or a callable
    epoch -> iterable.
    """
    if not model.differentiable:
        raise DefenseError("adversarial training needs a differentiable model")
    trained = model.clone()
    module = trained.torch_module()
    if hyper.epochs == 0:
        return trained, []
    source = data if callable(data) else (lambda epoch: iter(list(data)))
    if not callable(data):
        batches = list(data)
        source = lambda epoch: iter(batches)  # noqa: E731
    opt = _make_optimizer(module, hyper)
    lossf = nn.CrossEntropyLoss(label_smoothing=hyper.label_smoothing)
    log: list[dict] = []
    for epoch in range(hyper.epochs):
        loss_sum, total = 0.0, 0
        if defcfg.warmup_epochs > 0:
            gamma_now = defcfg.gamma * min(1.0, (epoch + 1) / (defcfg.warmup_epochs + 1))
        else:
            gamma_now = defcfg.gamma
        for i, batch in enumerate(source(epoch)):
            if batch.labels is None:
                raise DefenseError("adversarial training needs labeled batches")
            y = _mapped_labels(batch.labels, label_map)
            n_adv = int(round(defcfg.mix_ratio * len(batch)))
            pixels = batch.pixels
            if n_adv > 0:
                adv = fgsm_step(trained, pixels[:n_adv], y[:n_adv], gamma_now)
                pixels = np.concatenate([adv, pixels[n_adv:]])
            module.train()
            opt.zero_grad()
            logits = module(torch.from_numpy(pixels))
            loss = lossf(logits, torch.from_numpy(y))
            if not torch.isfinite(loss):
                raise TrainingDivergedError(f"non-finite defense loss at epoch {epoch}", i)
            loss.backward()
            opt.step()
            module.eval()
            loss_sum += loss.item() * len(batch)
            total += len(batch)
        entry: dict = {"epoch": epoch, "loss": loss_sum / total}
        if eval_batch is not None:
            y_eval = _mapped_labels(eval_batch.labels, label_map)
            preds = trained.query(eval_batch.pixels).argmax(1)
            entry["std_acc"] = float((preds == y_eval).mean())
            entry["rob_acc"] = robust_accuracy(trained, eval_batch, defcfg.gamma, label_map)
        log.append(entry)
    return trained, log
