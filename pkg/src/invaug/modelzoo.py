"""Model families (victim/shadow/evaluator classifiers, inversion decoder),
generic training, and the query oracle abstraction.

Architectures are layer recipes in data, not hard-coded classes, so swapping
the architecture matrix of an experiment is pure configuration.
"""

from __future__ import annotations

import copy
import io
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np
import torch
from torch import nn

from .datahub import ImageBatch
from .util import derive_seed, hash_bytes

CHECKPOINT_FORMAT_VERSION = 1
PROB_FLOOR = 1e-12


class ModelZooError(Exception):
    pass


class UnknownArchError(ModelZooError):
    pass


class CapabilityError(ModelZooError):
    """Raised when gradient access is requested from a query-only handle."""


class TrainingDivergedError(ModelZooError):
    def __init__(self, message: str, batch_index: int | None = None):
        super().__init__(message)
        self.batch_index = batch_index


# ---------------------------------------------------------------------------
# Architecture recipes

ARCH_RECIPES: dict[str, dict] = {
    # pool-free, batch-normalized: every pixel feeds the head directly
    "small-cnn-3": {
        "kind": "convnet",
        "layers": [
            {"op": "conv", "out": 32, "k": 3, "pad": 1, "bn": True},
            {"op": "relu"},
            {"op": "conv", "out": 64, "k": 3, "pad": 1, "bn": True},
            {"op": "relu"},
            {"op": "flatten"},
            {"op": "linear", "out": "num_classes"},
        ],
    },
    "small-cnn-4": {
        "kind": "convnet",
        "layers": [
            {"op": "conv", "out": 32, "k": 3, "pad": 1, "bn": True},
            {"op": "relu"},
            {"op": "maxpool", "k": 2},
            {"op": "conv", "out": 64, "k": 3, "pad": 1, "bn": True},
            {"op": "relu"},
            {"op": "conv", "out": 96, "k": 3, "pad": 1, "bn": True},
            {"op": "relu"},
            {"op": "flatten"},
            {"op": "linear", "out": "num_classes"},
        ],
    },
    # desk-width residual net: stem + 4 stages x 2 basic blocks (16 convs) + fc
    "residual-18": {
        "kind": "residual",
        "stem": 16,
        "stage_blocks": [2, 2, 2, 2],
        "stage_widths": [16, 32, 64, 128],
    },
    "vgg-11-like": {
        "kind": "convnet",
        "layers": [
            {"op": "conv", "out": 32, "k": 3, "pad": 1, "bn": True},
            {"op": "relu"},
            {"op": "conv", "out": 32, "k": 3, "pad": 1, "bn": True},
            {"op": "relu"},
            {"op": "maxpool", "k": 2},
            {"op": "conv", "out": 64, "k": 3, "pad": 1, "bn": True},
            {"op": "relu"},
            {"op": "conv", "out": 64, "k": 3, "pad": 1, "bn": True},
            {"op": "relu"},
            {"op": "maxpool", "k": 2},
            {"op": "conv", "out": 128, "k": 3, "pad": 1, "bn": True},
            {"op": "relu"},
            {"op": "conv", "out": 128, "k": 3, "pad": 1, "bn": True},
            {"op": "relu"},
            {"op": "maxpool", "k": 2},
            {"op": "flatten"},
            {"op": "linear", "out": 256},
            {"op": "relu"},
            {"op": "linear", "out": "num_classes"},
        ],
    },
    # confidence vector -> image; fc stem, stride-2 transposed convs, sigmoid box
    "inversion-decoder": {
        "kind": "decoder",
        "fc": 512,
        "base_width": 128,
    },
}


class _Residual(nn.Module):
    def __init__(self, cin: int, cout: int, stride: int):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cout, 3, stride=stride, padding=1, bias=False)
        self.bn1 = nn.BatchNorm2d(cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1, bias=False)
        self.bn2 = nn.BatchNorm2d(cout)
        self.skip = (
            nn.Sequential(nn.Conv2d(cin, cout, 1, stride=stride, bias=False), nn.BatchNorm2d(cout))
            if stride != 1 or cin != cout
            else nn.Identity()
        )

    def forward(self, x):
        h = torch.relu(self.bn1(self.conv1(x)))
        h = self.bn2(self.conv2(h))
        return torch.relu(h + self.skip(x))


def _build_convnet(recipe: dict, image_shape: tuple[int, int, int], num_classes: int) -> nn.Module:
    cin, h, w = image_shape
    layers: list[nn.Module] = []
    flat = None
    for spec in recipe["layers"]:
        op = spec["op"]
        if op == "conv":
            layers.append(nn.Conv2d(cin, spec["out"], spec["k"], padding=spec.get("pad", 0)))
            if spec.get("bn"):
                layers.append(nn.BatchNorm2d(spec["out"]))
            cin = spec["out"]
            h = h + 2 * spec.get("pad", 0) - spec["k"] + 1
            w = w + 2 * spec.get("pad", 0) - spec["k"] + 1
        elif op == "relu":
            layers.append(nn.ReLU())
        elif op == "maxpool":
            layers.append(nn.MaxPool2d(spec["k"]))
            h, w = h // spec["k"], w // spec["k"]
        elif op == "flatten":
            layers.append(nn.Flatten())
            flat = cin * h * w
        elif op == "linear":
            out = num_classes if spec["out"] == "num_classes" else spec["out"]
            layers.append(nn.Linear(flat, out))
            flat = out
        else:
            raise UnknownArchError(f"unknown layer op {op!r}")
    return nn.Sequential(*layers)


def _build_residual(recipe: dict, image_shape: tuple[int, int, int], num_classes: int) -> nn.Module:
    cin = image_shape[0]
    stem_w = recipe["stem"]
    blocks: list[nn.Module] = [
        nn.Conv2d(cin, stem_w, 3, padding=1, bias=False),
        nn.BatchNorm2d(stem_w),
        nn.ReLU(),
    ]
    width = stem_w
    for stage, (n_blocks, stage_w) in enumerate(zip(recipe["stage_blocks"], recipe["stage_widths"])):
        for b in range(n_blocks):
            stride = 2 if (stage > 0 and b == 0) else 1
            blocks.append(_Residual(width, stage_w, stride))
            width = stage_w
    blocks += [nn.AdaptiveAvgPool2d(1), nn.Flatten(), nn.Linear(width, num_classes)]
    return nn.Sequential(*blocks)


class _Decoder(nn.Module):
    """Maps a length-C confidence vector to an image in [0,1]."""

    def __init__(self, recipe: dict, input_dim: int, output_shape: tuple[int, int, int]):
        super().__init__()
        cout, h, w = output_shape
        if h != w:
            raise UnknownArchError(f"decoder needs square output, got {output_shape}")
        # halve until the seed feature map is small (4..7 px)
        start, n_up = h, 0
        while start > 7 and start % 2 == 0:
            start //= 2
            n_up += 1
        if n_up == 0:
            raise UnknownArchError(f"output size {h} not reachable by stride-2 upsampling")
        base = recipe["base_width"]
        self.start = start
        self.base = base
        self.fc = nn.Sequential(
            nn.Linear(input_dim, recipe["fc"]),
            nn.ReLU(),
            nn.Linear(recipe["fc"], base * start * start),
            nn.ReLU(),
        )
        ups: list[nn.Module] = []
        width = base
        for i in range(n_up):
            nxt = cout if i == n_up - 1 else max(base // (2 ** (i + 1)), 16)
            ups.append(nn.ConvTranspose2d(width, nxt, 4, stride=2, padding=1))
            if i != n_up - 1:
                ups.append(nn.ReLU())
            width = nxt
        ups.append(nn.Sigmoid())
        self.up = nn.Sequential(*ups)

    def forward(self, v):
        h = self.fc(v)
        h = h.view(-1, self.base, self.start, self.start)
        return self.up(h)


# ---------------------------------------------------------------------------
# Handles


@dataclass
class TrainConfig:
    epochs: int = 10
    lr: float = 1e-3
    optimizer: str = "adam"
    momentum: float = 0.9
    weight_decay: float = 0.0
    label_smoothing: float = 0.0
    seed: int = 0


class ModelHandle:
    """Opaque classifier/decoder oracle with capability flags and a query counter."""

    def __init__(
        self,
        arch_id: str,
        module: nn.Module,
        capabilities: frozenset[str],
        num_classes: int | None = None,
        image_shape: tuple[int, int, int] | None = None,
        output_shape: tuple[int, int, int] | None = None,
    ):
        self.arch_id = arch_id
        self._module = module
        self.capabilities = capabilities
        self.num_classes = num_classes
        self.image_shape = image_shape
        self.output_shape = output_shape
        self.query_count = 0

    # -- oracle surface -----------------------------------------------------

    def query(self, x: ImageBatch | np.ndarray) -> np.ndarray:
        """Soft labels for a batch: (N, C) rows on the probability simplex."""
        pixels = x.pixels if isinstance(x, ImageBatch) else np.asarray(x, dtype=np.float32)
        if pixels.ndim == 3:
            pixels = pixels[None]
        if pixels.ndim != 4:
            raise ValueError(f"expected (N,C,H,W) images, got shape {pixels.shape}")
        if self.image_shape is not None and tuple(pixels.shape[1:]) != self.image_shape:
            raise ValueError(
                f"image shape {tuple(pixels.shape[1:])} does not match model's {self.image_shape}"
            )
        if self.num_classes is None:
            raise ModelZooError(f"{self.arch_id} is not a classifier")
        self._module.eval()
        with torch.no_grad():
            logits = self._module(torch.from_numpy(np.ascontiguousarray(pixels)))
            probs = torch.softmax(logits, dim=1).numpy()
        self.query_count += pixels.shape[0]
        return probs

    # -- gradient surface ---------------------------------------------------

    @property
    def differentiable(self) -> bool:
        return "differentiable" in self.capabilities

    def torch_module(self) -> nn.Module:
        if not self.differentiable:
            raise CapabilityError(f"{self.arch_id} handle is query-only; no gradient access")
        return self._module

    def as_query_only(self) -> "ModelHandle":
        """Black-box view sharing weights but exposing only query(); fresh counter."""
        return ModelHandle(
            self.arch_id,
            self._module,
            frozenset({"query-only"}),
            num_classes=self.num_classes,
            image_shape=self.image_shape,
            output_shape=self.output_shape,
        )

    def clone(self) -> "ModelHandle":
        return ModelHandle(
            self.arch_id,
            copy.deepcopy(self._module),
            self.capabilities,
            num_classes=self.num_classes,
            image_shape=self.image_shape,
            output_shape=self.output_shape,
        )

    def state_fingerprint(self) -> str:
        """Content hash over architecture and current weights."""
        buf = io.BytesIO()
        buf.write(self.arch_id.encode())
        for name, tensor in sorted(self._module.state_dict().items()):
            buf.write(name.encode())
            buf.write(tensor.numpy().tobytes())
        return hash_bytes(buf.getvalue())


def build_model(
    arch_id: str,
    num_classes: int | None = None,
    image_shape: tuple[int, int, int] | None = None,
    output_shape: tuple[int, int, int] | None = None,
    seed: int = 0,
) -> ModelHandle:
    """Instantiate an architecture recipe with seeded deterministic init."""
    if arch_id not in ARCH_RECIPES:
        raise UnknownArchError(f"unknown arch {arch_id!r}; known: {sorted(ARCH_RECIPES)}")
    recipe = ARCH_RECIPES[arch_id]
    torch.manual_seed(derive_seed(seed, "init", arch_id))
    if recipe["kind"] == "decoder":
        if num_classes is None or output_shape is None:
            raise ValueError("decoder needs num_classes (input width) and output_shape")
        module: nn.Module = _Decoder(recipe, num_classes, tuple(output_shape))
        return ModelHandle(
            arch_id,
            module,
            frozenset({"differentiable"}),
            num_classes=num_classes,
            output_shape=tuple(output_shape),
        )
    if num_classes is None or num_classes < 1:
        raise ValueError("classifier needs a positive num_classes")
    if image_shape is None:
        raise ValueError("classifier needs image_shape (C, H, W)")
    if recipe["kind"] == "convnet":
        module = _build_convnet(recipe, tuple(image_shape), num_classes)
    elif recipe["kind"] == "residual":
        module = _build_residual(recipe, tuple(image_shape), num_classes)
    else:
        raise UnknownArchError(f"unknown recipe kind {recipe['kind']!r}")
    return ModelHandle(
        arch_id,
        module,
        frozenset({"differentiable"}),
        num_classes=num_classes,
        image_shape=tuple(image_shape),
    )


def query(model: ModelHandle, x: ImageBatch | np.ndarray) -> np.ndarray:
    return model.query(x)


# ---------------------------------------------------------------------------
# Losses and training

BatchSource = Callable[[int], Iterable[ImageBatch]]


def soft_cross_entropy(
    logits: torch.Tensor, target_probs: torch.Tensor, floor: float = PROB_FLOOR
) -> torch.Tensor:
    """Soft-target cross-entropy -sum_i t_i log p_i, mean over the batch.

    The probability inside the log is floored so the loss stays finite even
    for saturated targets.
    """
    logp = torch.clamp(torch.log_softmax(logits, dim=1), min=math.log(floor))
    return -(target_probs * logp).sum(dim=1).mean()


def _make_optimizer(module: nn.Module, hyper: TrainConfig) -> torch.optim.Optimizer:
    if hyper.optimizer == "adam":
        return torch.optim.Adam(module.parameters(), lr=hyper.lr, weight_decay=hyper.weight_decay)
    if hyper.optimizer == "sgd":
        return torch.optim.SGD(
            module.parameters(), lr=hyper.lr, momentum=hyper.momentum,
            weight_decay=hyper.weight_decay,
        )
    raise ValueError(f"unknown optimizer {hyper.optimizer!r}")


def _as_source(data) -> BatchSource:
    if callable(data):
        return data
    batches = list(data)
    return lambda epoch: iter(batches)


def train_classifier(
    model: ModelHandle,
    data,
    hyper: TrainConfig,
    label_map: Sequence[int] | None = None,
) -> tuple[ModelHandle, list[dict]]:
    """Supervised training on labeled batches; returns a trained copy and a log.

    `data` is a list of ImageBatch or a callable epoch -> iterable of batches.
    `label_map` optionally remaps absolute class ids to model outputs.
    """
    if not model.differentiable:
        raise CapabilityError("cannot train a query-only handle")
    trained = model.clone()
    module = trained.torch_module()
    if hyper.epochs == 0:
        return trained, []
    source = _as_source(data)
    lut = None
    if label_map is not None:
        lut = {int(c): i for i, c in enumerate(label_map)}
    opt = _make_optimizer(module, hyper)
    lossf = nn.CrossEntropyLoss(label_smoothing=hyper.label_smoothing)
    log: list[dict] = []
    for epoch in range(hyper.epochs):
        module.train()
        total, correct, loss_sum = 0, 0, 0.0
        for i, batch in enumerate(source(epoch)):
            if batch.labels is None:
                raise ValueError("train_classifier needs labeled batches")
            labels = batch.labels
            if lut is not None:
                labels = np.asarray([lut[int(l)] for l in labels], dtype=np.int64)
            xb = torch.from_numpy(batch.pixels)
            yb = torch.from_numpy(labels)
            opt.zero_grad()
            logits = module(xb)
            loss = lossf(logits, yb)
            if not torch.isfinite(loss):
                raise TrainingDivergedError(
                    f"non-finite loss at epoch {epoch}, batch {i}", batch_index=i
                )
            loss.backward()
            opt.step()
            loss_sum += loss.item() * len(batch)
            correct += int((logits.argmax(1) == yb).sum())
            total += len(batch)
        log.append({"epoch": epoch, "loss": loss_sum / total, "accuracy": correct / total})
    module.eval()
    return trained, log


def classification_accuracy(
    model: ModelHandle, batch: ImageBatch, label_map: Sequence[int] | None = None
) -> float:
    """Top-1 accuracy of the handle on a labeled batch."""
    if batch.labels is None:
        raise ValueError("accuracy needs labels")
    labels = batch.labels
    if label_map is not None:
        lut = {int(c): i for i, c in enumerate(label_map)}
        labels = np.asarray([lut[int(l)] for l in labels], dtype=np.int64)
    preds = model.query(batch).argmax(1)
    return float((preds == labels).mean())


# ---------------------------------------------------------------------------
# Checkpoints: npz container, JSON header entry + one entry per tensor


def save_checkpoint(model: ModelHandle, path: str | Path) -> str:
    """Write a self-describing weight container; returns its content hash."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    state = model._module.state_dict()
    header = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "arch_id": model.arch_id,
        "num_classes": model.num_classes,
        "image_shape": list(model.image_shape) if model.image_shape else None,
        "output_shape": list(model.output_shape) if model.output_shape else None,
        "tensors": [
            {"name": k, "shape": list(v.shape), "dtype": str(v.numpy().dtype)}
            for k, v in state.items()
        ],
    }
    arrays = {f"tensor_{i}": v.numpy() for i, (k, v) in enumerate(state.items())}
    with open(path, "wb") as f:
        np.savez(f, __header__=np.str_(json.dumps(header)), **arrays)
    from .util import hash_file

    return hash_file(path)


def load_checkpoint(path: str | Path) -> ModelHandle:
    with np.load(path, allow_pickle=False) as z:
        header = json.loads(str(z["__header__"]))
        if header["format_version"] != CHECKPOINT_FORMAT_VERSION:
            raise ModelZooError(f"unsupported checkpoint version {header['format_version']}")
        handle = build_model(
            header["arch_id"],
            num_classes=header["num_classes"],
            image_shape=tuple(header["image_shape"]) if header["image_shape"] else None,
            output_shape=tuple(header["output_shape"]) if header["output_shape"] else None,
        )
        state = {}
        for i, meta in enumerate(header["tensors"]):
            arr = z[f"tensor_{i}"]
            state[meta["name"]] = torch.from_numpy(np.array(arr))
    handle._module.load_state_dict(state)
    handle._module.eval()
    return handle
