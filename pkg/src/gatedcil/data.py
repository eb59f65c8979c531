"""Datasets: IDX files, per-class shard directories and a synthetic generator.

IDX layout (big-endian, as used by MNIST)::

    bytes 0-1   0x00 0x00
    byte  2     element type, 0x08 = unsigned byte
    byte  3     number of dimensions n
    4*n bytes   dimension sizes as uint32
    rest        raw elements, row-major

Images are stored (count, H, W) or (count, H, W, C); labels (count,).
A dataset directory holds ``train-images.idx``, ``train-labels.idx``,
``test-images.idx`` and ``test-labels.idx`` (``.gz`` variants and the MNIST
file names are also accepted).

Shard directory layout: ``manifest.json`` plus one raw uint8 file per
(split, class) holding ``count * H * W * C`` bytes, row-major::

    {"format": "gatedcil-shards", "version": 1,
     "image_shape": [H, W, C], "num_classes": K, "class_names": [...],
     "shards": [{"split": "train", "label": 0, "file": "train_000.bin", "count": 500}, ...]}
"""

from __future__ import annotations

import gzip
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

IDX_UBYTE = 0x08
MANIFEST_FORMAT = "gatedcil-shards"


class DatasetError(ValueError):
    """Malformed or inconsistent dataset files."""


@dataclass
class Dataset:
    train_images: np.ndarray
    train_labels: np.ndarray
    test_images: np.ndarray
    test_labels: np.ndarray
    num_classes: int
    class_names: list[str] = field(default_factory=list)
    mean: float | None = None
    std: float | None = None

    def __post_init__(self) -> None:
        for name in ("train_images", "test_images"):
            arr = getattr(self, name)
            if arr.ndim == 3:
                setattr(self, name, arr[..., None])
        self.train_labels = np.asarray(self.train_labels, dtype=np.int64)
        self.test_labels = np.asarray(self.test_labels, dtype=np.int64)
        for split, labels in (("train", self.train_labels), ("test", self.test_labels)):
            if labels.size and (labels.min() < 0 or labels.max() >= self.num_classes):
                raise DatasetError(f"{split} labels outside [0, {self.num_classes})")
        if self.mean is None or self.std is None:
            pixels = self.train_images.astype(np.float64) / 255.0
            self.mean = float(pixels.mean())
            self.std = float(pixels.std()) or 1.0

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return tuple(self.train_images.shape[1:])  # type: ignore[return-value]

    def normalize(self, images: np.ndarray, dtype=np.float64) -> np.ndarray:
        return ((images.astype(np.float64) / 255.0 - self.mean) / self.std).astype(dtype)

    def check_nonempty_classes(self) -> None:
        for split, labels in (("train", self.train_labels), ("test", self.test_labels)):
            missing = sorted(set(range(self.num_classes)) - set(np.unique(labels).tolist()))
            if missing:
                raise DatasetError(f"{split} split has no samples for classes {missing}")


# -- IDX ------------------------------------------------------------------------------

def _open(path: Path, mode: str):
    return gzip.open(path, mode) if path.suffix == ".gz" else open(path, mode)


def read_idx(path: str | Path) -> np.ndarray:
    path = Path(path)
    with _open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 4:
        raise DatasetError(f"{path}: truncated header")
    zero, dtype_code, ndim = struct.unpack(">HBB", raw[:4])
    if zero != 0 or dtype_code != IDX_UBYTE:
        raise DatasetError(f"{path}: bad magic {raw[:4].hex()} (expected 0000 08 nn)")
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise DatasetError(f"{path}: truncated dimension header")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    expected = int(np.prod(dims)) if dims else 0
    body = raw[header:]
    if len(body) != expected:
        raise DatasetError(f"{path}: expected {expected} data bytes for dims {dims}, found {len(body)}")
    return np.frombuffer(body, dtype=np.uint8).reshape(dims).copy()


def write_idx(path: str | Path, array: np.ndarray) -> None:
    array = np.ascontiguousarray(array)
    if array.dtype != np.uint8:
        raise DatasetError("IDX writer stores unsigned bytes only")
    header = struct.pack(">HBB", 0, IDX_UBYTE, array.ndim) + struct.pack(f">{array.ndim}I", *array.shape)
    path = Path(path)
    with _open(path, "wb") as fh:
        fh.write(header + array.tobytes())


_IDX_NAMES = {
    "train_images": ("train-images.idx", "train-images-idx3-ubyte"),
    "train_labels": ("train-labels.idx", "train-labels-idx1-ubyte"),
    "test_images": ("test-images.idx", "t10k-images-idx3-ubyte"),
    "test_labels": ("test-labels.idx", "t10k-labels-idx1-ubyte"),
}


def _find_idx(root: Path, key: str) -> Path:
    for name in _IDX_NAMES[key]:
        for candidate in (root / name, root / f"{name}.gz"):
            if candidate.exists():
                return candidate
    raise DatasetError(f"{root}: no file for {key} (looked for {', '.join(_IDX_NAMES[key])})")


def load_idx_dir(root: str | Path, num_classes: int | None = None) -> Dataset:
    root = Path(root)
    arrays = {key: read_idx(_find_idx(root, key)) for key in _IDX_NAMES}
    for split in ("train", "test"):
        n_img, n_lab = len(arrays[f"{split}_images"]), len(arrays[f"{split}_labels"])
        if n_img != n_lab:
            raise DatasetError(f"{split}: {n_img} images but {n_lab} labels")
        if arrays[f"{split}_labels"].ndim != 1:
            raise DatasetError(f"{split} labels must be one-dimensional")
    if num_classes is None:
        num_classes = int(max(arrays["train_labels"].max(), arrays["test_labels"].max())) + 1
    return Dataset(num_classes=num_classes, **arrays)


def save_idx_dir(dataset: Dataset, root: str | Path) -> None:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    write_idx(root / "train-images.idx", dataset.train_images)
    write_idx(root / "train-labels.idx", dataset.train_labels.astype(np.uint8))
    write_idx(root / "test-images.idx", dataset.test_images)
    write_idx(root / "test-labels.idx", dataset.test_labels.astype(np.uint8))


# -- shard directories ----------------------------------------------------------------

def load_manifest_dir(root: str | Path) -> Dataset:
    root = Path(root)
    manifest_path = root / "manifest.json"
    if not manifest_path.exists():
        raise DatasetError(f"{root}: missing manifest.json")
    manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    if manifest.get("format") != MANIFEST_FORMAT:
        raise DatasetError(f"{manifest_path}: format must be {MANIFEST_FORMAT!r}")
    shape = tuple(int(v) for v in manifest["image_shape"])
    num_classes = int(manifest["num_classes"])
    per_image = int(np.prod(shape))
    parts: dict[str, list[tuple[np.ndarray, np.ndarray]]] = {"train": [], "test": []}
    for shard in manifest["shards"]:
        label = int(shard["label"])
        if not 0 <= label < num_classes:
            raise DatasetError(f"{shard['file']}: label {label} outside [0, {num_classes})")
        split = shard["split"]
        if split not in parts:
            raise DatasetError(f"{shard['file']}: unknown split {split!r}")
        raw = (root / shard["file"]).read_bytes()
        count = int(shard["count"])
        if len(raw) != count * per_image:
            raise DatasetError(f"{shard['file']}: expected {count * per_image} bytes, found {len(raw)}")
        images = np.frombuffer(raw, dtype=np.uint8).reshape((count, *shape)).copy()
        parts[split].append((images, np.full(count, label, dtype=np.int64)))
    arrays = {}
    for split, items in parts.items():
        if not items:
            raise DatasetError(f"{manifest_path}: no {split} shards")
        arrays[f"{split}_images"] = np.concatenate([i for i, _ in items])
        arrays[f"{split}_labels"] = np.concatenate([lab for _, lab in items])
    return Dataset(num_classes=num_classes, class_names=list(manifest.get("class_names", [])), **arrays)


def save_manifest_dir(dataset: Dataset, root: str | Path) -> None:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    shards = []
    for split in ("train", "test"):
        images = getattr(dataset, f"{split}_images")
        labels = getattr(dataset, f"{split}_labels")
        for label in range(dataset.num_classes):
            chunk = np.ascontiguousarray(images[labels == label], dtype=np.uint8)
            name = f"{split}_{label:03d}.bin"
            (root / name).write_bytes(chunk.tobytes())
            shards.append({"split": split, "label": label, "file": name, "count": int(len(chunk))})
    manifest = {
        "format": MANIFEST_FORMAT,
        "version": 1,
        "image_shape": list(dataset.image_shape),
        "num_classes": dataset.num_classes,
        "class_names": dataset.class_names,
        "shards": shards,
    }
    (root / "manifest.json").write_text(json.dumps(manifest, indent=1), encoding="utf-8")


def load_dataset(path: str | Path, format: str, num_classes: int | None = None) -> Dataset:  # noqa: A002
    if format == "idx":
        dataset = load_idx_dir(path, num_classes)
    elif format == "manifest":
        dataset = load_manifest_dir(path)
        if num_classes is not None and dataset.num_classes != num_classes:
            raise DatasetError(f"manifest declares {dataset.num_classes} classes, config expects {num_classes}")
    else:
        raise DatasetError(f"unknown dataset format {format!r}")
    dataset.check_nonempty_classes()
    return dataset


# -- synthetic ------------------------------------------------------------------------

def _class_patterns(num_classes: int, size: int, channels: int, rng: np.random.Generator) -> np.ndarray:
    """One oriented grating times a placed Gaussian blob per class, in [-1, 1]."""
    yy, xx = np.meshgrid(np.linspace(-1, 1, size), np.linspace(-1, 1, size), indexing="ij")
    patterns = np.empty((num_classes, size, size, channels))
    angles = np.pi * (np.arange(num_classes) + rng.uniform(0, 0.5)) / num_classes
    freqs = rng.choice([1.5, 2.5, 3.5], size=num_classes)
    centres = rng.uniform(-0.5, 0.5, size=(num_classes, 2))
    for c in range(num_classes):
        phase = rng.uniform(0, 2 * np.pi)
        grating = np.cos(np.pi * freqs[c] * (xx * np.cos(angles[c]) + yy * np.sin(angles[c])) + phase)
        blob = np.exp(-((xx - centres[c, 0]) ** 2 + (yy - centres[c, 1]) ** 2) / 0.3)
        base = 0.6 * grating + 0.8 * blob - 0.4
        for ch in range(channels):
            patterns[c, :, :, ch] = np.roll(base, ch, axis=1)
    return patterns


def synth_dataset(num_classes: int, per_class: int, image_size: int, difficulty: float = 0.5,
                  seed: int = 0, test_per_class: int | None = None, channels: int = 1) -> Dataset:
    """Class-conditional grating/blob images; ``difficulty`` scales pixel noise and spatial jitter.

    At difficulty 0 each image is its class pattern times a random contrast,
    which keeps classes linearly separable.
    """
    if min(num_classes, per_class, image_size) < 1 or difficulty < 0:
        raise ValueError("num_classes, per_class and image_size must be positive; difficulty >= 0")
    test_per_class = per_class if test_per_class is None else test_per_class
    rng = np.random.default_rng(seed)
    patterns = _class_patterns(num_classes, image_size, channels, rng)

    def draw(count: int) -> tuple[np.ndarray, np.ndarray]:
        labels = np.repeat(np.arange(num_classes), count)
        contrast = rng.uniform(0.7, 1.3, size=labels.size)
        images = patterns[labels] * contrast[:, None, None, None]
        max_shift = int(round(difficulty * image_size / 8))
        if max_shift:
            shifts = rng.integers(-max_shift, max_shift + 1, size=(labels.size, 2))
            for n, (dy, dx) in enumerate(shifts):
                images[n] = np.roll(images[n], (dy, dx), axis=(0, 1))
        images = images + rng.normal(0.0, 0.5 * difficulty, size=images.shape)
        pixels = np.clip(np.round(127.5 + 90.0 * images), 0, 255).astype(np.uint8)
        order = rng.permutation(labels.size)
        return pixels[order], labels[order]

    train_images, train_labels = draw(per_class)
    test_images, test_labels = draw(test_per_class)
    return Dataset(train_images, train_labels, test_images, test_labels, num_classes,
                   class_names=[f"class_{c}" for c in range(num_classes)])


def dataset_from_config(cfg) -> Dataset:
    d = cfg.data
    if d.source == "synth":
        seed = cfg.seed if d.seed is None else d.seed
        return synth_dataset(d.num_classes, d.per_class, cfg.model.image_size, d.difficulty, seed,
                             d.test_per_class, cfg.model.channels)
    dataset = load_dataset(d.path, d.source, d.num_classes)
    if dataset.image_shape != (cfg.model.image_size, cfg.model.image_size, cfg.model.channels):
        raise DatasetError(
            f"dataset images are {dataset.image_shape}, model expects "
            f"{(cfg.model.image_size, cfg.model.image_size, cfg.model.channels)}"
        )
    return dataset
