"""Datasets, private/public splits and deterministic batch streams.

Every experiment starts from a persisted :class:`SplitManifest` so that the
disjointness between the victim's private data and the attacker's public data
is a checked artifact, not a convention.
"""

from __future__ import annotations

import gzip
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterator, Literal, Sequence

import numpy as np

from .util import derive_seed, hash_array, read_json, stable_hash, write_json

MANIFEST_FORMAT_VERSION = 1

Side = Literal["private", "public"]
Subset = Literal["train", "test"]


class DatasetError(Exception):
    """Base class for dataset problems."""


class UnknownDatasetError(DatasetError):
    pass


class DataUnavailableError(DatasetError):
    """Raised when a dataset's raw files are not present locally."""


class SchemeError(DatasetError):
    """Split scheme incompatible with the dataset or degenerate."""


# ---------------------------------------------------------------------------
# Core batch type


@dataclass
class ImageBatch:
    """A batch of images as (N, C, H, W) float32 in [0, 1], optional labels."""

    pixels: np.ndarray
    labels: np.ndarray | None = None

    def __post_init__(self) -> None:
        self.pixels = np.asarray(self.pixels, dtype=np.float32)
        if self.pixels.ndim != 4:
            raise ValueError(f"pixels must be rank-4 (N,C,H,W), got shape {self.pixels.shape}")
        if self.pixels.shape[0] < 1:
            raise ValueError("batch must contain at least one image")
        lo, hi = float(self.pixels.min()), float(self.pixels.max())
        if lo < -1e-6 or hi > 1 + 1e-6:
            raise ValueError(f"pixel values outside [0,1]: min={lo}, max={hi}")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)
            if self.labels.shape != (self.pixels.shape[0],):
                raise ValueError("labels length must match batch size")

    def __len__(self) -> int:
        return int(self.pixels.shape[0])

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return tuple(self.pixels.shape[1:])  # type: ignore[return-value]


def image_hashes(pixels: np.ndarray) -> list[str]:
    """Per-image content hashes, used to key caches and audit split overlap."""
    return [hash_array(pixels[i]) for i in range(pixels.shape[0])]


# ---------------------------------------------------------------------------
# Dataset registry


@dataclass
class DatasetSource:
    """Raw images for one dataset, already normalized to uint8 (N, C, H, W)."""

    dataset_id: str
    kind: Literal["digit-classes", "identities"]
    train_images: np.ndarray  # uint8 (N, C, H, W)
    train_labels: np.ndarray  # int64, absolute class ids
    test_images: np.ndarray | None
    test_labels: np.ndarray | None
    class_ids: tuple[int, ...]
    class_names: tuple[str, ...] | None = None


_REGISTRY: dict[str, Callable[[Path], DatasetSource]] = {}


def register_dataset(dataset_id: str, loader: Callable[[Path], DatasetSource]) -> None:
    _REGISTRY[dataset_id] = loader


def dataset_ids() -> list[str]:
    return sorted(_REGISTRY)


def resolve_data_root(data_root: str | Path | None = None) -> Path:
    if data_root is not None:
        return Path(data_root)
    env = os.environ.get("INVAUG_DATA_ROOT")
    if env:
        return Path(env)
    return Path.home() / ".cache" / "invaug"


_SOURCE_CACHE: dict[tuple[str, str], DatasetSource] = {}


def load_source(dataset_id: str, data_root: str | Path | None = None) -> DatasetSource:
    if dataset_id not in _REGISTRY:
        raise UnknownDatasetError(
            f"unknown dataset {dataset_id!r}; registered: {dataset_ids()}"
        )
    root = resolve_data_root(data_root)
    key = (dataset_id, str(root))
    if key not in _SOURCE_CACHE:
        _SOURCE_CACHE[key] = _REGISTRY[dataset_id](root)
    return _SOURCE_CACHE[key]


# --- synth-digits: offline MNIST-scale stand-in -----------------------------
#
# Desk-scale rendition tuned so the victim regime matches the MNIST one the
# attack literature reports: in-distribution predictions are decisive while
# out-of-distribution digits land near multi-class boundaries (elastic warps
# and faint ghost glyphs supply the cross-class ambiguity real handwriting
# has and clean font renders lack).

_SYNTH_VERSION = 2
_SYNTH_PER_CLASS_TRAIN = 600
_SYNTH_PER_CLASS_TEST = 150
_SYNTH_SIZE = 16
_SYNTH_SEED = 20240613
_SYNTH_GHOST = 0.35
_SYNTH_ELASTIC = 6.0
_SYNTH_NOISE = 4.0
_SYNTH_CONTRAST = (0.85, 1.0)


def _digit_fonts() -> list:
    import matplotlib

    font_dir = Path(matplotlib.__file__).parent / "mpl-data" / "fonts" / "ttf"
    names = [
        "DejaVuSans.ttf",
        "DejaVuSans-Bold.ttf",
        "DejaVuSerif.ttf",
        "DejaVuSerif-Bold.ttf",
        "DejaVuSansMono.ttf",
        "cmr10.ttf",
        "STIXGeneral.ttf",
        "DejaVuSans-Oblique.ttf",
    ]
    fonts = [str(font_dir / n) for n in names if (font_dir / n).exists()]
    if not fonts:
        raise DataUnavailableError("no TTF fonts found for synthetic digit rendering")
    return fonts


def _draw_glyph(digit: int, rng: np.random.Generator, font_paths: list[str]):
    from PIL import Image, ImageDraw, ImageFont

    font = ImageFont.truetype(
        font_paths[int(rng.integers(len(font_paths)))], int(rng.integers(16, 26))
    )
    canvas = Image.new("L", (64, 64), 0)
    draw = ImageDraw.Draw(canvas)
    draw.text((32, 32), str(digit), fill=255, font=font, anchor="mm")
    canvas = canvas.rotate(
        float(rng.uniform(-12.0, 12.0)), resample=Image.BILINEAR, center=(32, 32)
    )
    shear = float(rng.uniform(-0.15, 0.15))
    canvas = canvas.transform(
        (64, 64), Image.AFFINE, (1, shear, -shear * 32, 0, 1, 0), resample=Image.BILINEAR
    )
    dx, dy = rng.uniform(-3.0, 3.0, 2)
    return canvas.transform(
        (32, 32), Image.AFFINE, (1, 0, 16 + dx, 0, 1, 16 + dy), resample=Image.BILINEAR
    )


def _elastic_warp(arr: np.ndarray, rng: np.random.Generator, alpha: float) -> np.ndarray:
    from scipy.ndimage import gaussian_filter, map_coordinates

    h, w = arr.shape
    dx = gaussian_filter(rng.uniform(-1, 1, (h, w)), 2.5) * alpha
    dy = gaussian_filter(rng.uniform(-1, 1, (h, w)), 2.5) * alpha
    yy, xx = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    return map_coordinates(arr, [yy + dy, xx + dx], order=1, mode="constant")


def _render_digit(digit: int, rng: np.random.Generator, font_paths: list[str]) -> np.ndarray:
    from PIL import Image, ImageFilter

    arr = np.asarray(_draw_glyph(digit, rng, font_paths), dtype=np.float32)
    arr = _elastic_warp(arr, rng, alpha=float(rng.uniform(2.0, _SYNTH_ELASTIC)))
    ghost = np.asarray(_draw_glyph(int(rng.integers(10)), rng, font_paths), dtype=np.float32)
    arr = np.maximum(arr, ghost * float(rng.uniform(0.0, _SYNTH_GHOST)))
    img = Image.fromarray(np.clip(arr, 0, 255).astype(np.uint8)).resize(
        (_SYNTH_SIZE, _SYNTH_SIZE), Image.BILINEAR
    )
    img = img.filter(ImageFilter.GaussianBlur(float(rng.uniform(0.0, 0.4))))
    out = np.asarray(img, dtype=np.float32) * float(rng.uniform(*_SYNTH_CONTRAST))
    out += rng.normal(0.0, _SYNTH_NOISE, out.shape)
    return np.clip(out, 0, 255).astype(np.uint8)


def _generate_synth_digits() -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    fonts = _digit_fonts()
    rng = np.random.default_rng(_SYNTH_SEED)
    images, labels = [], []
    per_class = _SYNTH_PER_CLASS_TRAIN + _SYNTH_PER_CLASS_TEST
    for digit in range(10):
        for _ in range(per_class):
            images.append(_render_digit(digit, rng, fonts))
            labels.append(digit)
    x = np.stack(images)[:, None, :, :]  # (N, 1, H, W)
    y = np.asarray(labels, dtype=np.int64)
    # interleave classes, then carve the test set off deterministically
    order = rng.permutation(len(y))
    x, y = x[order], y[order]
    n_test = 10 * _SYNTH_PER_CLASS_TEST
    return x[n_test:], y[n_test:], x[:n_test], y[:n_test]


def _load_synth_digits(root: Path) -> DatasetSource:
    cache = root / "synth-digits" / f"v{_SYNTH_VERSION}.npz"
    if cache.exists():
        z = np.load(cache)
        xtr, ytr, xte, yte = z["xtr"], z["ytr"], z["xte"], z["yte"]
    else:
        xtr, ytr, xte, yte = _generate_synth_digits()
        cache.parent.mkdir(parents=True, exist_ok=True)
        np.savez_compressed(cache, xtr=xtr, ytr=ytr, xte=xte, yte=yte)
    return DatasetSource(
        dataset_id="synth-digits",
        kind="digit-classes",
        train_images=xtr,
        train_labels=ytr,
        test_images=xte,
        test_labels=yte,
        class_ids=tuple(range(10)),
    )


# --- digits-sk: bundled 8x8 handwritten digits, upscaled --------------------


def _load_digits_sk(root: Path) -> DatasetSource:
    from PIL import Image
    from sklearn.datasets import load_digits

    raw = load_digits()
    imgs8 = (raw.images / 16.0 * 255.0).astype(np.uint8)
    up = np.stack(
        [
            np.asarray(Image.fromarray(im).resize((32, 32), Image.BILINEAR))
            for im in imgs8
        ]
    )[:, None, :, :]
    y = raw.target.astype(np.int64)
    rng = np.random.default_rng(97)
    order = rng.permutation(len(y))
    up, y = up[order], y[order]
    n_test = len(y) // 6
    return DatasetSource(
        dataset_id="digits-sk",
        kind="digit-classes",
        train_images=up[n_test:],
        train_labels=y[n_test:],
        test_images=up[:n_test],
        test_labels=y[:n_test],
        class_ids=tuple(range(10)),
    )


# --- mnist: standard IDX files from the data root ---------------------------


def _read_idx(path: Path) -> np.ndarray:
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "rb") as f:  # type: ignore[operator]
        data = f.read()
    zeros, dtype_code, ndim = struct.unpack(">HBB", data[:4])
    if zeros != 0 or dtype_code != 0x08:
        raise DataUnavailableError(f"{path} is not a ubyte IDX file")
    dims = struct.unpack(f">{ndim}I", data[4 : 4 + 4 * ndim])
    return np.frombuffer(data, dtype=np.uint8, offset=4 + 4 * ndim).reshape(dims)


def _find_idx(base: Path, stem: str) -> Path:
    for suffix in ("", ".gz"):
        p = base / f"{stem}{suffix}"
        if p.exists():
            return p
    raise DataUnavailableError(
        f"MNIST file {stem} not found under {base}; place the standard IDX files there"
    )


def _load_mnist(root: Path) -> DatasetSource:
    base = root / "mnist"
    xtr = _read_idx(_find_idx(base, "train-images-idx3-ubyte"))
    ytr = _read_idx(_find_idx(base, "train-labels-idx1-ubyte")).astype(np.int64)
    xte = _read_idx(_find_idx(base, "t10k-images-idx3-ubyte"))
    yte = _read_idx(_find_idx(base, "t10k-labels-idx1-ubyte")).astype(np.int64)
    # pad 28x28 to 32x32 so every digit dataset shares one geometry
    pad = ((0, 0), (2, 2), (2, 2))
    xtr = np.pad(xtr, pad)[:, None, :, :]
    xte = np.pad(xte, pad)[:, None, :, :]
    return DatasetSource(
        dataset_id="mnist",
        kind="digit-classes",
        train_images=xtr,
        train_labels=ytr,
        test_images=xte,
        test_labels=yte,
        class_ids=tuple(range(10)),
    )


# --- facescrub: identity folders under the data root ------------------------

_FACE_SIZE = 64


def _load_facescrub(root: Path) -> DatasetSource:
    from PIL import Image

    base = root / "facescrub"
    if not base.is_dir():
        raise DataUnavailableError(
            f"facescrub directory not found at {base}; expected one folder per identity"
        )
    identities = sorted(p.name for p in base.iterdir() if p.is_dir())
    if not identities:
        raise DataUnavailableError(f"no identity folders under {base}")
    images, labels = [], []
    for idx, ident in enumerate(identities):
        for img_path in sorted((base / ident).iterdir()):
            if img_path.suffix.lower() not in {".png", ".jpg", ".jpeg", ".bmp"}:
                continue
            try:
                img = Image.open(img_path).convert("RGB").resize(
                    (_FACE_SIZE, _FACE_SIZE), Image.BILINEAR
                )
            except Exception as exc:
                raise DataUnavailableError(f"corrupt image {img_path}: {exc}") from exc
            images.append(np.asarray(img, dtype=np.uint8).transpose(2, 0, 1))
            labels.append(idx)
    return DatasetSource(
        dataset_id="facescrub",
        kind="identities",
        train_images=np.stack(images),
        train_labels=np.asarray(labels, dtype=np.int64),
        test_images=None,
        test_labels=None,
        class_ids=tuple(range(len(identities))),
        class_names=tuple(identities),
    )


register_dataset("synth-digits", _load_synth_digits)
register_dataset("digits-sk", _load_digits_sk)
register_dataset("mnist", _load_mnist)
register_dataset("facescrub", _load_facescrub)


# ---------------------------------------------------------------------------
# Splits


@dataclass(frozen=True)
class SplitScheme:
    """How to carve a dataset into disjoint private/public halves."""

    kind: Literal["by-class-range", "by-identity-count"]
    private_range: tuple[int, int] | None = None  # inclusive class range
    public_range: tuple[int, int] | None = None
    private_count: int | None = None
    public_count: int | None = None

    @staticmethod
    def by_class_range(private: tuple[int, int], public: tuple[int, int]) -> "SplitScheme":
        return SplitScheme("by-class-range", private_range=private, public_range=public)

    @staticmethod
    def by_identity_count(private: int, public: int) -> "SplitScheme":
        return SplitScheme("by-identity-count", private_count=private, public_count=public)


@dataclass(frozen=True)
class SplitManifest:
    dataset_id: str
    private_class_ids: tuple[int, ...]
    public_class_ids: tuple[int, ...]
    seed: int
    checksum: str = field(default="")

    def __post_init__(self) -> None:
        if set(self.private_class_ids) & set(self.public_class_ids):
            raise ValueError("private and public class ids overlap")
        expected = _manifest_checksum(
            self.dataset_id, self.private_class_ids, self.public_class_ids, self.seed
        )
        if self.checksum == "":
            object.__setattr__(self, "checksum", expected)
        elif self.checksum != expected:
            raise ValueError("manifest checksum mismatch; file corrupt or hand-edited")

    def to_json(self) -> dict:
        return {
            "format_version": MANIFEST_FORMAT_VERSION,
            "dataset_id": self.dataset_id,
            "private_class_ids": list(self.private_class_ids),
            "public_class_ids": list(self.public_class_ids),
            "seed": self.seed,
            "checksum": self.checksum,
        }

    @staticmethod
    def from_json(obj: dict) -> "SplitManifest":
        if obj.get("format_version") != MANIFEST_FORMAT_VERSION:
            raise ValueError(f"unsupported manifest format_version {obj.get('format_version')}")
        return SplitManifest(
            dataset_id=obj["dataset_id"],
            private_class_ids=tuple(obj["private_class_ids"]),
            public_class_ids=tuple(obj["public_class_ids"]),
            seed=int(obj["seed"]),
            checksum=obj["checksum"],
        )

    def save(self, path: str | Path) -> None:
        write_json(path, self.to_json())

    @staticmethod
    def load(path: str | Path) -> "SplitManifest":
        return SplitManifest.from_json(read_json(path))


def _manifest_checksum(dataset_id, private_ids, public_ids, seed) -> str:
    return stable_hash(
        {
            "dataset_id": dataset_id,
            "private": list(private_ids),
            "public": list(public_ids),
            "seed": int(seed),
        }
    )


def build_split(
    dataset_id: str,
    scheme: SplitScheme,
    seed: int,
    data_root: str | Path | None = None,
) -> SplitManifest:
    """Carve the dataset's classes into disjoint private/public halves."""
    source = load_source(dataset_id, data_root)
    if scheme.kind == "by-class-range":
        if source.kind != "digit-classes":
            raise SchemeError(f"by-class-range does not apply to {dataset_id} ({source.kind})")
        lo_p, hi_p = scheme.private_range  # type: ignore[misc]
        lo_q, hi_q = scheme.public_range  # type: ignore[misc]
        private = tuple(c for c in source.class_ids if lo_p <= c <= hi_p)
        public = tuple(c for c in source.class_ids if lo_q <= c <= hi_q)
    elif scheme.kind == "by-identity-count":
        if source.kind != "identities":
            raise SchemeError(f"by-identity-count does not apply to {dataset_id} ({source.kind})")
        n_priv = int(scheme.private_count)  # type: ignore[arg-type]
        n_pub = int(scheme.public_count)  # type: ignore[arg-type]
        if n_priv + n_pub > len(source.class_ids):
            raise SchemeError(
                f"requested {n_priv}+{n_pub} identities but only {len(source.class_ids)} exist"
            )
        rng = np.random.default_rng(derive_seed(seed, "identity-split", dataset_id))
        order = rng.permutation(len(source.class_ids))
        private = tuple(int(source.class_ids[i]) for i in sorted(order[:n_priv]))
        public = tuple(int(source.class_ids[i]) for i in sorted(order[n_priv : n_priv + n_pub]))
    else:
        raise SchemeError(f"unknown split scheme {scheme.kind!r}")

    if not private:
        raise SchemeError("private split is empty")
    if not public:
        raise SchemeError("public split is empty")
    if set(private) & set(public):
        raise SchemeError("scheme produced overlapping splits")
    return SplitManifest(dataset_id, private, public, int(seed))


# ---------------------------------------------------------------------------
# Batch streams

_HOLDOUT_FRACTION = 0.1  # train/test carve for datasets without a canonical test set


def _side_arrays(
    manifest: SplitManifest,
    side: Side,
    subset: Subset,
    data_root: str | Path | None,
    holdout: float = _HOLDOUT_FRACTION,
) -> tuple[np.ndarray, np.ndarray]:
    if side not in ("private", "public"):
        raise ValueError(f"side must be 'private' or 'public', got {side!r}")
    source = load_source(manifest.dataset_id, data_root)
    wanted = set(
        manifest.private_class_ids if side == "private" else manifest.public_class_ids
    )
    if source.test_images is not None:
        imgs = source.train_images if subset == "train" else source.test_images
        labels = source.train_labels if subset == "train" else source.test_labels
        mask = np.isin(labels, sorted(wanted))
        return imgs[mask], labels[mask]
    # identity datasets: deterministic per-class holdout
    mask = np.isin(source.train_labels, sorted(wanted))
    imgs, labels = source.train_images[mask], source.train_labels[mask]
    rng = np.random.default_rng(derive_seed(manifest.seed, "holdout", side))
    test_idx: list[int] = []
    for c in sorted(wanted):
        idx = np.nonzero(labels == c)[0]
        n_test = max(1, int(round(len(idx) * holdout)))
        test_idx.extend(rng.permutation(idx)[:n_test].tolist())
    test_mask = np.zeros(len(labels), dtype=bool)
    test_mask[test_idx] = True
    keep = test_mask if subset == "test" else ~test_mask
    return imgs[keep], labels[keep]


def _to_float(images: np.ndarray) -> np.ndarray:
    return (images.astype(np.float32) / 255.0).clip(0.0, 1.0)


def load_all(
    manifest: SplitManifest,
    side: Side,
    subset: Subset = "train",
    data_root: str | Path | None = None,
) -> ImageBatch:
    """The whole requested side as one batch (desk-scale datasets fit in memory)."""
    imgs, labels = _side_arrays(manifest, side, subset, data_root)
    if len(imgs) == 0:
        raise DataUnavailableError(f"no {side}/{subset} images for {manifest.dataset_id}")
    return ImageBatch(_to_float(imgs), labels)


def load_batches(
    manifest: SplitManifest,
    side: Side,
    batch_size: int,
    shuffle_seed: int,
    subset: Subset = "train",
    data_root: str | Path | None = None,
) -> Iterator[ImageBatch]:
    """One epoch over the requested side: every image exactly once, shuffled."""
    if batch_size < 1:
        raise ValueError(f"batch_size must be >= 1, got {batch_size}")
    imgs, labels = _side_arrays(manifest, side, subset, data_root)
    order = np.random.default_rng(shuffle_seed).permutation(len(imgs))
    for start in range(0, len(order), batch_size):
        idx = order[start : start + batch_size]
        yield ImageBatch(_to_float(imgs[idx]), labels[idx])


def batch_source(
    manifest: SplitManifest,
    side: Side,
    batch_size: int,
    shuffle_seed: int,
    subset: Subset = "train",
    data_root: str | Path | None = None,
) -> Callable[[int], Iterator[ImageBatch]]:
    """Re-iterable stream for trainers; each epoch reshuffles deterministically."""

    def epoch_iter(epoch: int) -> Iterator[ImageBatch]:
        return load_batches(
            manifest,
            side,
            batch_size,
            derive_seed(shuffle_seed, "epoch", epoch),
            subset=subset,
            data_root=data_root,
        )

    return epoch_iter


def remap_labels(labels: np.ndarray, class_ids: Sequence[int]) -> np.ndarray:
    """Map absolute class ids onto contiguous indices 0..len(class_ids)-1."""
    lut = {int(c): i for i, c in enumerate(class_ids)}
    return np.asarray([lut[int(l)] for l in labels], dtype=np.int64)
