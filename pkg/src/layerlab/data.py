"""Dataset loading, subset construction, stratified splitting, statistics.

Three on-disk formats: big-endian IDX (MNIST family), CIFAR-10 binary
batches, and the native LLDS container for materialized subsets. All
loaders return the same in-memory Dataset (u8 images [n,C,H,W] + labels)
and every parse error names the byte offset it tripped on.
"""

import json
import math
import os
import struct
import tempfile
import warnings
from dataclasses import dataclass, replace
from typing import Optional, Union

import numpy as np

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
LLDS_MAGIC = b"LLDS"
LLDS_VERSION = 1

MNIST_CLASSES = [str(i) for i in range(10)]
FMNIST_CLASSES = ["T-shirt/top", "Trouser", "Pullover", "Dress", "Coat",
                  "Sandal", "Shirt", "Sneaker", "Bag", "Ankle boot"]
CIFAR10_CLASSES = ["airplane", "automobile", "bird", "cat", "deer",
                   "dog", "frog", "horse", "ship", "truck"]
CLASS_ALIASES = {"car": "automobile", "plane": "airplane", "auto": "automobile"}


class DataFormatError(ValueError):
    pass


class SubsetError(ValueError):
    pass


@dataclass
class Dataset:
    images: np.ndarray  # u8 [n, C, H, W]
    labels: np.ndarray  # int64 [n]
    channels: int
    source: str
    class_names: list
    role: str = "full"  # provenance tag: full|subset|trainval|train|val|test

    def __post_init__(self):
        if self.images.dtype != np.uint8 or self.images.ndim != 4:
            raise DataFormatError(f"images must be u8 [n,C,H,W], got "
                                  f"{self.images.dtype} {self.images.shape}")
        if self.images.shape[1] != self.channels or self.channels not in (1, 3):
            raise DataFormatError(f"channels {self.channels} inconsistent with "
                                  f"image shape {self.images.shape}")
        if len(self.labels) != len(self.images):
            raise DataFormatError(f"{len(self.images)} images but {len(self.labels)} labels")
        if len(self.labels) and self.labels.max() >= len(self.class_names):
            raise DataFormatError(f"label {self.labels.max()} out of range for "
                                  f"{len(self.class_names)} classes")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def image_shape(self) -> tuple:
        return tuple(self.images.shape[1:])

    def take(self, indices: np.ndarray, role: Optional[str] = None) -> "Dataset":
        return replace(self, images=self.images[indices], labels=self.labels[indices],
                       role=role or self.role)

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=len(self.class_names))


# ---------------------------------------------------------------------------
# IDX

def _read_exact(f, n: int, offset: int, what: str) -> bytes:
    buf = f.read(n)
    if len(buf) != n:
        raise DataFormatError(
            f"truncated {what}: expected {n} bytes at offset {offset}, found {len(buf)}"
        )
    return buf


def load_idx(images_path: str, labels_path: str, source: str = "mnist",
             class_names: Optional[list] = None) -> Dataset:
    with open(images_path, "rb") as f:
        magic = struct.unpack(">I", _read_exact(f, 4, 0, "image header"))[0]
        if magic != IDX_IMAGES_MAGIC:
            raise DataFormatError(
                f"bad image magic 0x{magic:08x} at offset 0 (expected 0x{IDX_IMAGES_MAGIC:08x})"
            )
        n, h, w = struct.unpack(">III", _read_exact(f, 12, 4, "image dims"))
        pixels = _read_exact(f, n * h * w, 16, "image payload")
        images = np.frombuffer(pixels, dtype=np.uint8).reshape(n, 1, h, w)
    with open(labels_path, "rb") as f:
        magic = struct.unpack(">I", _read_exact(f, 4, 0, "label header"))[0]
        if magic != IDX_LABELS_MAGIC:
            raise DataFormatError(
                f"bad label magic 0x{magic:08x} at offset 0 (expected 0x{IDX_LABELS_MAGIC:08x})"
            )
        n_labels = struct.unpack(">I", _read_exact(f, 4, 4, "label count"))[0]
        if n_labels != n:
            raise DataFormatError(f"count mismatch: {n} images vs {n_labels} labels")
        labels = np.frombuffer(_read_exact(f, n_labels, 8, "label payload"),
                               dtype=np.uint8).astype(np.int64)
    names = class_names or (FMNIST_CLASSES if source == "fmnist" else MNIST_CLASSES)
    return Dataset(images.copy(), labels, 1, source, list(names))


def save_idx(images: np.ndarray, labels: np.ndarray, images_path: str, labels_path: str) -> None:
    """Writer counterpart of load_idx, used for fixtures and round-trip checks."""
    n, c, h, w = images.shape
    assert c == 1
    with _atomic_write(images_path) as f:
        f.write(struct.pack(">IIII", IDX_IMAGES_MAGIC, n, h, w))
        f.write(np.ascontiguousarray(images[:, 0]).tobytes())
    with _atomic_write(labels_path) as f:
        f.write(struct.pack(">II", IDX_LABELS_MAGIC, n))
        f.write(labels.astype(np.uint8).tobytes())


# ---------------------------------------------------------------------------
# CIFAR-10 binary

CIFAR_RECORD = 1 + 3 * 32 * 32


def load_cifar_bin(batch_paths, source: str = "cifar10") -> Dataset:
    all_images, all_labels = [], []
    for path in batch_paths:
        size = os.path.getsize(path)
        if size % CIFAR_RECORD:
            raise DataFormatError(
                f"{path}: size {size} not divisible by record length {CIFAR_RECORD} "
                f"(expected {size - size % CIFAR_RECORD} or {size + CIFAR_RECORD - size % CIFAR_RECORD})"
            )
        with open(path, "rb") as f:
            raw = np.frombuffer(f.read(), dtype=np.uint8).reshape(-1, CIFAR_RECORD)
        all_labels.append(raw[:, 0].astype(np.int64))
        all_images.append(raw[:, 1:].reshape(-1, 3, 32, 32))
    images = np.concatenate(all_images)
    labels = np.concatenate(all_labels)
    return Dataset(images.copy(), labels, 3, source, list(CIFAR10_CLASSES))


# ---------------------------------------------------------------------------
# LLDS container

class _atomic_write:
    """Write to a temp file in the target directory, rename on success."""

    def __init__(self, path: str, mode: str = "wb"):
        self.path = path
        self.mode = mode

    def __enter__(self):
        d = os.path.dirname(os.path.abspath(self.path))
        os.makedirs(d, exist_ok=True)
        fd, self.tmp = tempfile.mkstemp(dir=d, prefix=".tmp-")
        self.f = os.fdopen(fd, self.mode)
        return self.f

    def __exit__(self, exc_type, exc, tb):
        self.f.close()
        if exc_type is None:
            os.replace(self.tmp, self.path)
        else:
            os.unlink(self.tmp)


def save_llds(d: Dataset, path: str, sidecar: Optional[dict] = None) -> None:
    n, c, h, w = d.images.shape
    with _atomic_write(path) as f:
        f.write(LLDS_MAGIC)
        f.write(struct.pack(">BIBHH", LLDS_VERSION, n, c, h, w))
        f.write(d.labels.astype(np.uint8).tobytes())
        f.write(np.ascontiguousarray(d.images).tobytes())
    meta = {"class_names": d.class_names, "source": d.source, "role": d.role}
    if sidecar:
        meta.update(sidecar)
    with _atomic_write(path + ".json", "w") as f:
        json.dump(meta, f, indent=2, sort_keys=True)
        f.write("\n")


def load_llds(path: str) -> Dataset:
    with open(path, "rb") as f:
        magic = _read_exact(f, 4, 0, "LLDS magic")
        if magic != LLDS_MAGIC:
            raise DataFormatError(f"bad magic {magic!r} at offset 0 (expected {LLDS_MAGIC!r})")
        version, n, c, h, w = struct.unpack(">BIBHH", _read_exact(f, 10, 4, "LLDS header"))
        if version != LLDS_VERSION:
            raise DataFormatError(f"unsupported LLDS version {version}")
        labels = np.frombuffer(_read_exact(f, n, 14, "labels"), dtype=np.uint8).astype(np.int64)
        pixels = _read_exact(f, n * c * h * w, 14 + n, "pixels")
        images = np.frombuffer(pixels, dtype=np.uint8).reshape(n, c, h, w)
    meta = {}
    sidecar_path = path + ".json"
    if os.path.exists(sidecar_path):
        with open(sidecar_path) as f:
            meta = json.load(f)
    names = meta.get("class_names") or [str(i) for i in range(int(labels.max()) + 1 if n else 2)]
    return Dataset(images.copy(), labels, c, meta.get("source", "llds"),
                   list(names), role=meta.get("role", "full"))


# ---------------------------------------------------------------------------
# subsets and splits

@dataclass(frozen=True)
class SubsetSpec:
    base: str
    class_a: Union[int, str]
    class_b: Union[int, str]
    sample_size: Union[int, str]  # per-pair total, or "all"
    tag: str = ""  # hard/easy label for reports
    seed: int = 0

    def dataset_id(self) -> str:
        size = "All" if self.sample_size == "all" else str(self.sample_size)
        tag = self.tag or "2Cls"
        return f"{self.base}{tag}{size}"


def resolve_class(d: Dataset, token: Union[int, str]) -> int:
    if isinstance(token, (int, np.integer)):
        idx = int(token)
        if not 0 <= idx < len(d.class_names):
            raise SubsetError(f"class index {idx} out of range for {len(d.class_names)} classes")
        return idx
    name = str(token)
    lowered = {c.lower(): i for i, c in enumerate(d.class_names)}
    key = CLASS_ALIASES.get(name.lower(), name.lower())
    if key in lowered:
        return lowered[key]
    if name.isdigit() and int(name) < len(d.class_names):
        return int(name)
    raise SubsetError(f"unknown class {token!r}; valid: {', '.join(d.class_names)}")


def build_subset(full: Dataset, spec: SubsetSpec) -> Dataset:
    """Balanced two-class draw, labels remapped to {0, 1}, deterministic."""
    a = resolve_class(full, spec.class_a)
    b = resolve_class(full, spec.class_b)
    if a == b:
        raise SubsetError(f"class pair must differ, got {spec.class_a!r} twice")
    idx_a = np.flatnonzero(full.labels == a)
    idx_b = np.flatnonzero(full.labels == b)
    if spec.sample_size == "all":
        for cls, pool in ((spec.class_a, idx_a), (spec.class_b, idx_b)):
            if len(pool) == 0:
                raise SubsetError(f"class {cls!r} has no samples in {full.source}")
        take_a, take_b = idx_a, idx_b
    else:
        size = int(spec.sample_size)
        if size < 2 or size % 2:
            raise SubsetError(f"sample_size must be even and >= 2, got {size}")
        per_class = size // 2
        for cls, pool in ((spec.class_a, idx_a), (spec.class_b, idx_b)):
            if len(pool) < per_class:
                raise SubsetError(
                    f"class {cls!r} has {len(pool)} samples, need {per_class}"
                )
        rng = np.random.default_rng(spec.seed)
        take_a = np.sort(rng.choice(idx_a, per_class, replace=False))
        take_b = np.sort(rng.choice(idx_b, per_class, replace=False))
    images = np.concatenate([full.images[take_a], full.images[take_b]])
    labels = np.concatenate([
        np.zeros(len(take_a), dtype=np.int64),
        np.ones(len(take_b), dtype=np.int64),
    ])
    names = [str(full.class_names[a]), str(full.class_names[b])]
    return Dataset(images, labels, full.channels, full.source, names, role="subset")


@dataclass(frozen=True)
class SplitConfig:
    testsize: float = 0.25
    randstate: int = 42
    validationsplit: float = 0.25
    stratify: bool = True

    def __post_init__(self):
        for name in ("testsize", "validationsplit"):
            v = getattr(self, name)
            if not 0.0 < v < 1.0:
                raise ValueError(f"{name} must be in (0, 1), got {v}")


def stratified_split(d: Dataset, fraction: float, seed: int, stratify: bool = True,
                     roles=("trainval", "test")):
    """Per-class proportional split; returns (rest, held_out)."""
    if not 0.0 < fraction < 1.0:
        raise ValueError(f"split fraction must be in (0, 1), got {fraction}")
    rng = np.random.default_rng(seed)
    held, rest = [], []
    if stratify:
        for cls in range(len(d.class_names)):
            idx = np.flatnonzero(d.labels == cls)
            if len(idx) == 0:
                continue
            if len(idx) < 2:
                raise SubsetError(f"class {d.class_names[cls]!r} has a single sample; "
                                  "cannot split")
            k = int(math.floor(len(idx) * fraction + 0.5))
            k = min(max(k, 1), len(idx) - 1)
            perm = rng.permutation(idx)
            held.append(perm[:k])
            rest.append(perm[k:])
    else:
        perm = rng.permutation(len(d))
        k = int(math.floor(len(d) * fraction + 0.5))
        held.append(perm[:k])
        rest.append(perm[k:])
    held_idx = np.sort(np.concatenate(held))
    rest_idx = np.sort(np.concatenate(rest))
    return d.take(rest_idx, roles[0]), d.take(held_idx, roles[1])


def split_dataset(d: Dataset, cfg: SplitConfig):
    """The full protocol split: (train, val, test)."""
    trainval, test = stratified_split(d, cfg.testsize, cfg.randstate, cfg.stratify,
                                      roles=("trainval", "test"))
    train, val = stratified_split(trainval, cfg.validationsplit, cfg.randstate,
                                  cfg.stratify, roles=("train", "val"))
    return train, val, test


def to_rgb(d: Dataset) -> Dataset:
    """Replicate a grayscale channel three times; pixels unchanged."""
    if d.channels == 3:
        warnings.warn("to_rgb: dataset already has 3 channels; no-op")
        return d
    return replace(d, images=np.repeat(d.images, 3, axis=1), channels=3)


# ---------------------------------------------------------------------------
# statistics

@dataclass(frozen=True)
class DatasetStats:
    entropy: float
    estimator: str
    per_class_counts: tuple
    pixel_mean: float
    pixel_std: float


def dataset_entropy(d: Dataset, estimator: str = "hist") -> float:
    if len(d) < 1:
        raise ValueError("entropy needs at least one image")
    if estimator == "hist":
        counts = np.bincount(d.images.reshape(-1), minlength=256)
        p = counts[counts > 0] / counts.sum()
        return float(-(p * np.log2(p)).sum())
    if estimator == "gaussian":
        x = d.images.astype(np.float64) / 255.0
        var = np.maximum(x.var(axis=0), 1e-12)
        return float(np.mean(0.5 * np.log(2.0 * math.pi * math.e * var)))
    raise ValueError(f"unknown entropy estimator {estimator!r}; valid: hist, gaussian")


def dataset_stats(d: Dataset, estimator: str = "hist") -> DatasetStats:
    return DatasetStats(
        entropy=dataset_entropy(d, estimator),
        estimator=estimator,
        per_class_counts=tuple(int(c) for c in d.class_counts()),
        pixel_mean=float(d.images.mean()),
        pixel_std=float(d.images.std()),
    )
