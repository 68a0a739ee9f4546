"""Dataset ingestion, preprocessing, and train/test splitting.

Three sources are supported:

  * image directory trees laid out ``root/<group>/<class>/<example>.png``
    (or one level, ``root/<class>/...``); every leaf directory with image
    files becomes one class and the first-level directory name is kept as
    the class's group (the alphabet, for Omniglot-style trees),
  * IDX files as distributed with MNIST: big-endian magic 0x00000803 for
    images and 0x00000801 for labels, then dimension sizes, then raw bytes
    (``.gz`` files are decompressed transparently),
  * a synthetic blob generator: one random template image per class plus
    per-example pixel noise, for fast desk-scale runs.

All images are stored as float64 [C,H,W] arrays. Normalization is an
affine transform fitted dataset-wide per channel (or per image with
``scope="per-image"``); the fitted statistics are kept so a model trained
on one dataset can reuse them on another.
"""

from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

IMAGE_EXTENSIONS = {".png", ".pgm", ".jpg", ".jpeg", ".bmp"}

IDX_IMAGE_MAGIC = 0x00000803
IDX_LABEL_MAGIC = 0x00000801


class DataError(ValueError):
    pass


@dataclass
class ClassRecord:
    class_id: str
    images: np.ndarray  # [N,C,H,W] float64
    group: str | None = None


@dataclass
class RawDataset:
    name: str
    classes: list
    geometry: tuple  # (C,H,W)

    @property
    def num_examples(self) -> int:
        return sum(len(c.images) for c in self.classes)

    def groups(self) -> list:
        seen = []
        for c in self.classes:
            if c.group is not None and c.group not in seen:
                seen.append(c.group)
        return seen


@dataclass
class SplitDataset:
    """Classes assigned to one side of a train/test split."""
    name: str
    split: str
    classes: list
    geometry: tuple


@dataclass
class NormStats:
    mean: np.ndarray  # per channel
    std: np.ndarray
    scope: str = "global"


def _to_chw(img: Image.Image, channels: int, resize: tuple | None) -> np.ndarray:
    img = img.convert("L" if channels == 1 else "RGB")
    if resize is not None and img.size != (resize[1], resize[0]):
        img = img.resize((resize[1], resize[0]), Image.BILINEAR)
    arr = np.asarray(img, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[None, :, :]
    else:
        arr = arr.transpose(2, 0, 1)
    return arr


def load_image_tree(root, resize: tuple | None = (28, 28),
                    channels: int = 1) -> RawDataset:
    """Load a directory tree of raster images.

    Every directory that directly contains image files becomes one class,
    ordered lexicographically by its path relative to ``root``. A class's
    group is its parent directory's name (the alphabet, for Omniglot-style
    ``.../alphabet/character/`` layouts of any nesting depth); classes
    sitting directly under ``root`` have no group.
    """
    root = Path(root)
    if not root.is_dir():
        raise DataError(f"dataset root {root} is not a directory")

    leaves = []  # (relative posix path, group, dir)
    stack = [root]
    while stack:
        d = stack.pop()
        entries = list(d.iterdir())
        has_images = any(p.suffix.lower() in IMAGE_EXTENSIONS
                         for p in entries if p.is_file())
        subdirs = [p for p in entries if p.is_dir()]
        if has_images and d != root:
            group = d.parent.name if d.parent != root else None
            leaves.append((d.relative_to(root).as_posix(), group, d))
        elif not has_images and not subdirs and d != root:
            raise DataError(f"class directory {d} contains no images")
        stack.extend(subdirs)
    leaves.sort(key=lambda item: item[0])
    if not leaves:
        raise DataError(f"no class directories under {root}")

    classes = []
    for class_id, group, leaf in leaves:
        files = sorted(p for p in leaf.iterdir()
                       if p.suffix.lower() in IMAGE_EXTENSIONS)
        if not files:
            raise DataError(f"class directory {leaf} contains no images")
        images = []
        for f in files:
            try:
                with Image.open(f) as img:
                    images.append(_to_chw(img, channels, resize))
            except OSError as exc:
                raise DataError(f"unreadable image {f}: {exc}") from exc
        stack = np.stack(images)
        classes.append(ClassRecord(class_id=class_id, images=stack, group=group))

    geometry = classes[0].images.shape[1:]
    for c in classes:
        if c.images.shape[1:] != geometry:
            raise DataError(
                f"class {c.class_id}: geometry {c.images.shape[1:]} differs "
                f"from {geometry}; pass a resize target"
            )
    return RawDataset(name=root.name, classes=classes, geometry=geometry)


def _read_idx_bytes(path) -> bytes:
    path = Path(path)
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "rb") as f:
        return f.read()


def load_idx(images_path, labels_path) -> RawDataset:
    """Load an MNIST-style IDX image/label file pair into digit classes."""
    raw = _read_idx_bytes(images_path)
    if len(raw) < 16:
        raise DataError(f"{images_path}: truncated IDX header")
    magic, n, rows, cols = struct.unpack(">IIII", raw[:16])
    if magic != IDX_IMAGE_MAGIC:
        raise DataError(
            f"{images_path}: bad magic 0x{magic:08x}, "
            f"expected 0x{IDX_IMAGE_MAGIC:08x}"
        )
    if len(raw) != 16 + n * rows * cols:
        raise DataError(f"{images_path}: payload size mismatch")
    images = np.frombuffer(raw, dtype=np.uint8, offset=16).reshape(n, rows, cols)

    raw = _read_idx_bytes(labels_path)
    if len(raw) < 8:
        raise DataError(f"{labels_path}: truncated IDX header")
    magic, n_labels = struct.unpack(">II", raw[:8])
    if magic != IDX_LABEL_MAGIC:
        raise DataError(
            f"{labels_path}: bad magic 0x{magic:08x}, "
            f"expected 0x{IDX_LABEL_MAGIC:08x}"
        )
    if n_labels != n:
        raise DataError(
            f"label count {n_labels} does not match image count {n}"
        )
    labels = np.frombuffer(raw, dtype=np.uint8, offset=8)

    classes = []
    for digit in sorted(np.unique(labels)):
        subset = images[labels == digit].astype(np.float64)[:, None, :, :]
        classes.append(ClassRecord(class_id=str(int(digit)), images=subset))
    return RawDataset(name="idx", classes=classes, geometry=(1, rows, cols))


def synth_blobs(num_classes: int, per_class: int, geometry=(1, 28, 28),
                spread: float = 0.25, seed: int = 0) -> RawDataset:
    """Classes are a random template image plus pixel noise of scale
    ``spread``. Deterministic for a given seed."""
    if spread < 0:
        raise DataError(f"spread must be >= 0, got {spread}")
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed])))
    classes = []
    for i in range(num_classes):
        template = rng.normal(0.0, 1.0, size=geometry)
        noise = rng.normal(0.0, 1.0, size=(per_class, *geometry))
        classes.append(ClassRecord(
            class_id=f"blob{i:03d}",
            images=template[None] + spread * noise,
        ))
    return RawDataset(name="synth", classes=classes, geometry=tuple(geometry))


def resize_dataset(ds: RawDataset, size: tuple) -> RawDataset:
    """Bilinear-resize every image to (H, W). Identity sizes pass through."""
    c, h, w = ds.geometry
    if (h, w) == tuple(size):
        return ds
    classes = []
    for rec in ds.classes:
        resized = np.empty((len(rec.images), c, size[0], size[1]))
        for i, img in enumerate(rec.images):
            for ch in range(c):
                pil = Image.fromarray(img[ch])
                pil = pil.resize((size[1], size[0]), Image.BILINEAR)
                resized[i, ch] = np.asarray(pil, dtype=np.float64)
        classes.append(ClassRecord(rec.class_id, resized, rec.group))
    return RawDataset(ds.name, classes, (c, size[0], size[1]))


def fit_norm_stats(ds: RawDataset, scope: str = "global") -> NormStats:
    if scope == "per-image":
        c = ds.geometry[0]
        return NormStats(mean=np.zeros(c), std=np.ones(c), scope=scope)
    if scope != "global":
        raise DataError(f"unknown normalization scope {scope!r}")
    stacked = np.concatenate([c.images for c in ds.classes])  # [N,C,H,W]
    mean = stacked.mean(axis=(0, 2, 3))
    std = stacked.std(axis=(0, 2, 3))
    if np.any(std == 0):
        raise DataError("dataset has zero variance; cannot normalize")
    return NormStats(mean=mean, std=std, scope=scope)


def apply_norm(ds: RawDataset, stats: NormStats) -> RawDataset:
    classes = []
    for rec in ds.classes:
        if stats.scope == "per-image":
            m = rec.images.mean(axis=(1, 2, 3), keepdims=True)
            s = rec.images.std(axis=(1, 2, 3), keepdims=True)
            if np.any(s == 0):
                raise DataError(
                    f"class {rec.class_id} has a constant image; "
                    "cannot normalize per-image"
                )
            imgs = (rec.images - m) / s
        else:
            imgs = ((rec.images - stats.mean[None, :, None, None])
                    / stats.std[None, :, None, None])
        classes.append(ClassRecord(rec.class_id, imgs, rec.group))
    return RawDataset(ds.name, classes, ds.geometry)


def normalize(ds: RawDataset, scope: str = "global"):
    """Fit statistics on ``ds`` and apply them. Returns (dataset, stats)."""
    stats = fit_norm_stats(ds, scope)
    return apply_norm(ds, stats), stats


def _make_splits(ds: RawDataset, train_classes: list) -> tuple:
    train_set = set(train_classes)
    train = [c for c in ds.classes if c.class_id in train_set]
    test = [c for c in ds.classes if c.class_id not in train_set]
    if not train or not test:
        raise DataError(
            f"degenerate split: {len(train)} train / {len(test)} test classes"
        )
    return (
        SplitDataset(ds.name, "train", train, ds.geometry),
        SplitDataset(ds.name, "test", test, ds.geometry),
    )


def split_by_group(ds: RawDataset, train_groups: int = 30, seed: int = 0):
    """Split by group (alphabet): a seeded shuffle of the group names,
    the first ``train_groups`` of them for training."""
    groups = ds.groups()
    if len(groups) < 2:
        raise DataError("dataset has no group structure to split by")
    if not 0 < train_groups < len(groups):
        raise DataError(
            f"train_groups={train_groups} out of range for "
            f"{len(groups)} groups"
        )
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed])))
    order = [groups[i] for i in rng.permutation(len(groups))]
    chosen = set(order[:train_groups])
    train_classes = [c.class_id for c in ds.classes if c.group in chosen]
    return _make_splits(ds, train_classes)


def split_by_class(ds: RawDataset, train_fraction: float = 0.6, seed: int = 0):
    """Seeded class-level split for datasets without group metadata."""
    n = len(ds.classes)
    n_train = int(round(train_fraction * n))
    if not 0 < n_train < n:
        raise DataError(
            f"train_fraction={train_fraction} leaves an empty split for "
            f"{n} classes"
        )
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed])))
    order = rng.permutation(n)
    train_classes = [ds.classes[i].class_id for i in order[:n_train]]
    return _make_splits(ds, train_classes)


def split_from_files(ds: RawDataset, train_list, test_list):
    """Split by explicit class lists, one class id per line, UTF-8."""
    def read_list(path):
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        return [ln.strip() for ln in lines if ln.strip()]

    known = {c.class_id for c in ds.classes}
    train_classes = read_list(train_list)
    test_classes = read_list(test_list)
    for name, lst in (("train", train_classes), ("test", test_classes)):
        missing = [c for c in lst if c not in known]
        if missing:
            raise DataError(f"{name} list names unknown classes: {missing[:5]}")
    overlap = set(train_classes) & set(test_classes)
    if overlap:
        raise DataError(f"train and test lists overlap: {sorted(overlap)[:5]}")
    train = [c for c in ds.classes if c.class_id in set(train_classes)]
    test = [c for c in ds.classes if c.class_id in set(test_classes)]
    if not train or not test:
        raise DataError("empty split after applying class lists")
    return (
        SplitDataset(ds.name, "train", train, ds.geometry),
        SplitDataset(ds.name, "test", test, ds.geometry),
    )


def as_split(ds: RawDataset, split: str = "test") -> SplitDataset:
    """Wrap a whole dataset as a single split (cross-dataset evaluation)."""
    return SplitDataset(ds.name, split, list(ds.classes), ds.geometry)
