"""Labeled image datasets, manifests, label noise and the toy benchmark.

Manifest format (plain text, comma separated)::

    # aamgan manifest
    classes,square-red,square-green,...
    resolution,32
    path,label
    images/00000.png,0
    images/00001.png,5

Paths are relative to the manifest's directory. Images are held in memory
as float32 arrays of shape (H, W, 3) scaled to [-1, 1].
"""

from __future__ import annotations

import csv
import hashlib
import math
from dataclasses import dataclass
from pathlib import Path
from typing import List, NamedTuple, Sequence, Tuple

import numpy as np
import torch
from PIL import Image, UnidentifiedImageError

from .errors import BadLabel, DecodeError, IOFailure, InvalidLabel, MissingFile

MANIFEST_NAME = "manifest.csv"
_MAGIC_LINE = "# aamgan manifest"


def one_hot(label, num_classes):
    if not isinstance(label, (int, np.integer)) or not 0 <= label < num_classes:
        raise InvalidLabel(f"label {label!r} outside [0, {num_classes})")
    code = np.zeros(num_classes, dtype=np.float32)
    code[label] = 1.0
    return code


def bytes_to_unit(arr):
    """uint8 pixels -> float32 in [-1, 1] (0 -> -1, 255 -> 1)."""
    return np.asarray(arr, dtype=np.float32) / np.float32(127.5) - np.float32(1.0)


def unit_to_bytes(arr):
    arr = np.clip(np.asarray(arr, dtype=np.float32), -1.0, 1.0)
    return np.round((arr + 1.0) * 127.5).astype(np.uint8)


@dataclass(frozen=True)
class LabeledImage:
    image: np.ndarray
    label: int
    num_classes: int

    @property
    def one_hot(self):
        return one_hot(self.label, self.num_classes)


class LabelChange(NamedTuple):
    index: int
    old: int
    new: int


class LabeledDataset:
    """Immutable in-memory dataset of (H, W, 3) images with class indices."""

    def __init__(self, images, labels, class_names, paths=None):
        images = np.ascontiguousarray(images, dtype=np.float32)
        labels = np.ascontiguousarray(labels, dtype=np.int64)
        if images.ndim != 4 or images.shape[-1] != 3:
            raise ValueError(f"images must have shape (N, H, W, 3), got {images.shape}")
        if labels.shape != (images.shape[0],):
            raise ValueError("one label per image required")
        self.class_names = tuple(class_names)
        if len(self.class_names) < 2:
            raise ValueError("at least two classes are required")
        if labels.size and (labels.min() < 0 or labels.max() >= len(self.class_names)):
            raise BadLabel(f"labels must lie in [0, {len(self.class_names)})")
        images.setflags(write=False)
        labels.setflags(write=False)
        self.images = images
        self.labels = labels
        self.paths = tuple(paths) if paths is not None else None

    def __len__(self):
        return self.labels.shape[0]

    def __getitem__(self, i):
        return LabeledImage(self.images[i], int(self.labels[i]), self.num_classes)

    def __repr__(self):
        return f"LabeledDataset(n={len(self)}, classes={self.num_classes}, res={self.resolution})"

    @property
    def num_classes(self):
        return len(self.class_names)

    @property
    def resolution(self):
        return self.images.shape[1]

    def one_hot_codes(self):
        return np.eye(self.num_classes, dtype=np.float32)[self.labels]

    def subset(self, indices):
        idx = np.asarray(indices, dtype=np.int64)
        paths = None if self.paths is None else [self.paths[i] for i in idx]
        return LabeledDataset(self.images[idx], self.labels[idx], self.class_names, paths)

    def with_labels(self, labels):
        return LabeledDataset(self.images, labels, self.class_names, self.paths)

    def concat(self, other):
        if other.class_names != self.class_names:
            raise ValueError("cannot concatenate datasets with different classes")
        return LabeledDataset(np.concatenate([self.images, other.images]),
                              np.concatenate([self.labels, other.labels]), self.class_names)

    def split_halves(self, seed=0):
        """Disjoint, class-stratified halves ``(first, second)``."""
        rng = np.random.default_rng(seed)
        order = []
        for k in range(self.num_classes):
            members = np.flatnonzero(self.labels == k)
            order.extend(rng.permutation(members).tolist())
        order = np.array(order, dtype=np.int64)
        first = np.sort(order[0::2])
        second = np.sort(order[1::2])
        return self.subset(first), self.subset(second)

    def tensors(self):
        """``(x, y)`` with x as an NCHW float32 tensor."""
        x = torch.from_numpy(np.array(self.images.transpose(0, 3, 1, 2)))
        return x, torch.from_numpy(np.array(self.labels))

    def digest(self):
        h = hashlib.sha256()
        h.update(self.images.tobytes())
        h.update(self.labels.tobytes())
        h.update(",".join(self.class_names).encode())
        return h.hexdigest()


# ---------------------------------------------------------------------------
# manifests


@dataclass(frozen=True)
class DatasetManifest:
    entries: Tuple[Tuple[str, int], ...]
    class_names: Tuple[str, ...]
    resolution: int
    root: Path

    @property
    def num_classes(self):
        return len(self.class_names)


def write_manifest(path, entries, class_names, resolution):
    for name in class_names:
        if "," in name or "\n" in name:
            raise ValueError(f"class name {name!r} may not contain commas or newlines")
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="", encoding="utf-8") as fh:
            fh.write(_MAGIC_LINE + "\n")
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["classes", *class_names])
            w.writerow(["resolution", resolution])
            w.writerow(["path", "label"])
            for rel, label in entries:
                w.writerow([rel, int(label)])
    except OSError as exc:
        raise IOFailure(f"cannot write manifest {path}: {exc}") from exc
    return path


def resolve_manifest_path(path):
    path = Path(path)
    return path / MANIFEST_NAME if path.is_dir() else path


def read_manifest(path) -> DatasetManifest:
    path = resolve_manifest_path(path)
    if not path.is_file():
        raise MissingFile(f"manifest not found: {path}")
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            rows = [r for r in csv.reader(fh) if r and not r[0].startswith("#")]
    except (OSError, UnicodeDecodeError) as exc:
        raise DecodeError(f"cannot read manifest {path}: {exc}") from exc
    if len(rows) < 3 or rows[0][0] != "classes" or rows[1][0] != "resolution" or rows[2] != ["path", "label"]:
        raise DecodeError(f"malformed manifest header in {path}")
    class_names = tuple(rows[0][1:])
    if len(class_names) < 2:
        raise BadLabel(f"{path}: at least two classes are required")
    try:
        resolution = int(rows[1][1])
    except (IndexError, ValueError):
        raise DecodeError(f"{path}: bad resolution line") from None
    entries = []
    for lineno, row in enumerate(rows[3:], start=5):
        if len(row) != 2:
            raise DecodeError(f"{path}:{lineno}: expected 'path,label'")
        try:
            label = int(row[1])
        except ValueError:
            raise BadLabel(f"{path}:{lineno}: label {row[1]!r} is not an integer") from None
        if not 0 <= label < len(class_names):
            raise BadLabel(f"{path}:{lineno}: label {label} outside [0, {len(class_names)})")
        entries.append((row[0], label))
    return DatasetManifest(tuple(entries), class_names, resolution, path.parent)


def _decode(path, resolution):
    if not path.is_file():
        raise MissingFile(f"image not found: {path}")
    try:
        with Image.open(path) as im:
            im = im.convert("RGB")
            if im.size != (resolution, resolution):
                im = im.resize((resolution, resolution), Image.BILINEAR)
            return np.asarray(im, dtype=np.uint8)
    except (UnidentifiedImageError, OSError, ValueError) as exc:
        raise DecodeError(f"cannot decode {path}: {exc}") from exc


def load_dataset(manifest_path) -> LabeledDataset:
    """Decode every manifest entry, resize to the declared resolution and
    scale to [-1, 1]. Ordering follows the manifest."""
    manifest = read_manifest(manifest_path)
    n = len(manifest.entries)
    res = manifest.resolution
    pixels = np.empty((n, res, res, 3), dtype=np.uint8)
    for i, (rel, _) in enumerate(manifest.entries):
        pixels[i] = _decode(manifest.root / rel, res)
    labels = [label for _, label in manifest.entries]
    return LabeledDataset(bytes_to_unit(pixels), labels, manifest.class_names,
                          [rel for rel, _ in manifest.entries])


def save_dataset(dataset: LabeledDataset, out_dir, prefix="img"):
    """Write PNGs plus a manifest; returns the manifest path."""
    out_dir = Path(out_dir)
    img_dir = out_dir / "images"
    try:
        img_dir.mkdir(parents=True, exist_ok=True)
        pixels = unit_to_bytes(dataset.images)
        entries = []
        width = max(5, len(str(len(dataset))))
        for i in range(len(dataset)):
            rel = f"images/{prefix}{i:0{width}d}.png"
            Image.fromarray(pixels[i], "RGB").save(out_dir / rel, format="PNG", optimize=False)
            entries.append((rel, int(dataset.labels[i])))
    except OSError as exc:
        raise IOFailure(f"cannot write images under {out_dir}: {exc}") from exc
    return write_manifest(out_dir / MANIFEST_NAME, entries, dataset.class_names, dataset.resolution)


# ---------------------------------------------------------------------------
# label noise


def inject_label_noise(dataset: LabeledDataset, p, seed=0):
    """Replace exactly ``round(p * N)`` labels by a different class.

    Indices are drawn uniformly without replacement; each new label is
    uniform over the ``C - 1`` wrong classes. Returns the new dataset and
    the list of :class:`LabelChange` records.
    """
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"noise fraction must lie in [0, 1], got {p}")
    n, c = len(dataset), dataset.num_classes
    k = int(math.floor(p * n + 0.5))
    rng = np.random.default_rng(seed)
    chosen = np.sort(rng.choice(n, size=k, replace=False))
    offsets = rng.integers(1, c, size=k)
    labels = dataset.labels.copy()
    changes: List[LabelChange] = []
    for idx, off in zip(chosen, offsets):
        old = int(labels[idx])
        new = (old + int(off)) % c
        labels[idx] = new
        changes.append(LabelChange(int(idx), old, new))
    return dataset.with_labels(labels), changes


# ---------------------------------------------------------------------------
# toy benchmark

TOY_SHAPES = ("square", "circle", "diamond")
TOY_COLORS = (
    ("red", (1.0, 0.0, 0.0)),
    ("green", (0.0, 1.0, 0.0)),
    ("blue", (0.0, 0.0, 1.0)),
    ("yellow", (1.0, 1.0, 0.0)),
)
_FG_THRESHOLD = 0.4


@dataclass(frozen=True)
class ToySpec:
    """Shape x colour classes with nuisance jitter.

    Class ``k`` is shape ``k // 4`` drawn in colour ``k % 4``. Position,
    size, brightness and the background level vary per sample; none of
    them carries class information.
    """

    num_classes: int = 8
    samples_per_class: int = 500
    resolution: int = 32
    seed: int = 0

    def __post_init__(self):
        if not 2 <= self.num_classes <= len(TOY_SHAPES) * len(TOY_COLORS):
            raise ValueError("toy datasets support 2..12 classes")
        if self.samples_per_class < 1:
            raise ValueError("samples_per_class must be positive")
        if self.resolution not in (32, 64, 128):
            raise ValueError("resolution must be 32, 64 or 128")

    @property
    def class_names(self):
        return tuple(f"{TOY_SHAPES[k // 4]}-{TOY_COLORS[k % 4][0]}" for k in range(self.num_classes))


def _shape_mask(shape, res, cx, cy, r):
    yy, xx = np.mgrid[0:res, 0:res] + 0.5
    dx, dy = np.abs(xx - cx), np.abs(yy - cy)
    if shape == "square":
        return (dx <= r) & (dy <= r)
    if shape == "circle":
        return dx * dx + dy * dy <= r * r
    return dx + dy <= r


def render_toy(spec: ToySpec):
    """Render the toy dataset in memory as uint8 pixels ``(N, H, W, 3)``.

    Samples are interleaved by class so every prefix is near-balanced.
    """
    rng = np.random.default_rng(spec.seed)
    res = spec.resolution
    unit = res / 32.0
    n = spec.num_classes * spec.samples_per_class
    pixels = np.empty((n, res, res, 3), dtype=np.uint8)
    labels = np.empty(n, dtype=np.int64)
    i = 0
    for _ in range(spec.samples_per_class):
        for k in range(spec.num_classes):
            cx, cy = rng.uniform(res / 2 - 6 * unit, res / 2 + 6 * unit, size=2)
            r = rng.uniform(6 * unit, 9 * unit)
            brightness = rng.uniform(0.6, 1.0)
            bg = rng.uniform(0.05, 0.2)
            img = np.full((res, res, 3), bg)
            mask = _shape_mask(TOY_SHAPES[k // 4], res, cx, cy, r)
            img[mask] = brightness * np.array(TOY_COLORS[k % 4][1])
            img += rng.uniform(-0.03, 0.03, size=img.shape)
            pixels[i] = np.round(np.clip(img, 0.0, 1.0) * 255).astype(np.uint8)
            labels[i] = k
            i += 1
    return pixels, labels


def toy_dataset(spec: ToySpec) -> LabeledDataset:
    pixels, labels = render_toy(spec)
    return LabeledDataset(bytes_to_unit(pixels), labels, spec.class_names)


def generate_toy_dataset(spec: ToySpec, out_dir):
    """Render the toy benchmark to PNGs + manifest under ``out_dir``."""
    return save_dataset(toy_dataset(spec), out_dir, prefix="toy")


def toy_rule_classifier(images):
    """Reference classifier for toy renders.

    Accepts uint8 ``(N, H, W, 3)`` or float images in [-1, 1]. Colour is
    the palette entry closest in angle to the mean foreground colour; shape
    comes from how much of its bounding box the foreground fills.
    """
    images = np.asarray(images)
    if images.dtype != np.uint8:
        images = unit_to_bytes(images)
    if images.ndim == 3:
        images = images[None]
    x = images.astype(np.float64) / 255.0
    palette = np.array([c for _, c in TOY_COLORS])
    palette /= np.linalg.norm(palette, axis=1, keepdims=True)
    out = np.empty(len(x), dtype=np.int64)
    for i, img in enumerate(x):
        mask = img.max(axis=2) > _FG_THRESHOLD
        if not mask.any():
            out[i] = 0
            continue
        mean = img[mask].mean(axis=0)
        color = int(np.argmax(palette @ (mean / np.linalg.norm(mean))))
        ys, xs = np.nonzero(mask)
        fill = mask.sum() / ((ys.max() - ys.min() + 1) * (xs.max() - xs.min() + 1))
        shape = 0 if fill > 0.95 else (1 if fill > 0.65 else 2)
        out[i] = shape * 4 + color
    return out


def dataset_from_config(data_cfg, image_size, workdir=None):
    """Return ``(train, test)`` according to a :class:`DataConfig`.

    With no manifest the toy benchmark is rendered (and, when ``workdir``
    is given, also written there as PNGs for inspection).
    """
    if data_cfg.manifest:
        full = load_dataset(data_cfg.manifest)
        if data_cfg.test_manifest:
            return full, load_dataset(data_cfg.test_manifest)
        return full.split_halves(data_cfg.split_seed)
    spec = ToySpec(data_cfg.toy_classes, data_cfg.toy_samples_per_class, image_size, data_cfg.toy_seed)
    full = toy_dataset(spec)
    if workdir is not None:
        save_dataset(full, Path(workdir), prefix="toy")
    return full.split_halves(data_cfg.split_seed)


def check_compatible(a: LabeledDataset, b: LabeledDataset):
    return a.class_names == b.class_names and a.resolution == b.resolution


__all__: Sequence[str] = (
    "LabeledImage", "LabeledDataset", "LabelChange", "DatasetManifest", "ToySpec",
    "one_hot", "load_dataset", "save_dataset", "read_manifest", "write_manifest",
    "inject_label_noise", "render_toy", "toy_dataset", "generate_toy_dataset",
    "toy_rule_classifier", "dataset_from_config", "bytes_to_unit", "unit_to_bytes",
)
