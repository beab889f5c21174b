"""MNIST and CIFAR-10 loaders, splits, subsampling and augmentation.

File formats (all integers big-endian for IDX):

* IDX images: magic ``0x00000803``, count u32, rows u32, cols u32, then
  ``count * rows * cols`` unsigned bytes, row-major.
* IDX labels: magic ``0x00000801``, count u32, then ``count`` bytes.
* CIFAR-10 binary: records of 3073 bytes, one label byte followed by a
  32x32 red plane, green plane and blue plane (row-major each).

IDX files may be gzip-compressed (``.gz`` suffix). Nothing here touches the
network except :func:`fetch_mnist`, which the CLI exposes as an explicit
opt-in.
"""
from __future__ import annotations

import gzip
import hashlib
import os
import struct
import urllib.request
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from pcnet.exceptions import DataError

IMAGES_MAGIC = 0x0803
LABELS_MAGIC = 0x0801
CIFAR_RECORD = 1 + 32 * 32 * 3

MNIST_FILES = {
    "train_images": "train-images-idx3-ubyte",
    "train_labels": "train-labels-idx1-ubyte",
    "test_images": "t10k-images-idx3-ubyte",
    "test_labels": "t10k-labels-idx1-ubyte",
}
# SHA-256 of the decompressed files.
MNIST_SHA256 = {
    "train-images-idx3-ubyte": "ba891046e6505d7aadcbbe25680a0738ad16aec93bde7f9b65e87a2fc25776db",
    "train-labels-idx1-ubyte": "65a50cbbf4e906d70832878ad85ccda5333a97f0f4c3dd2ef09a8a9eef7101c5",
    "t10k-images-idx3-ubyte": "0fa7898d509279e482958e8ce81c8e77db3f2f8254e26661ceb7762c4d494ce7",
    "t10k-labels-idx1-ubyte": "ff7bcfd416de33731a308c3f266cc351222c34898ecbeaf847f06e48f7ec33f2",
}
AUGMENT_POLICIES = ("none", "pad4-crop32-hflip")


@dataclass(frozen=True)
class Dataset:
    """Images in ``(N, h, w, c)`` float32 layout with integer labels."""

    name: str
    x_train: np.ndarray
    y_train: np.ndarray
    x_test: np.ndarray
    y_test: np.ndarray
    x_val: np.ndarray | None = None
    y_val: np.ndarray | None = None
    classes: int = 10
    mean: np.ndarray | None = None
    std: np.ndarray | None = None

    @property
    def image_shape(self) -> tuple[int, ...]:
        return tuple(self.x_train.shape[1:])

    def with_validation(self, fraction: float, seed: int = 0) -> "Dataset":
        """Move a seeded random ``fraction`` of the training set into a validation split."""
        if self.x_val is not None:
            raise DataError("dataset already has a validation split")
        if not 0 < fraction < 1:
            raise DataError(f"validation fraction must be in (0, 1), got {fraction}")
        n = len(self.x_train)
        n_val = int(round(n * fraction))
        if not 0 < n_val < n:
            raise DataError(f"validation fraction {fraction} leaves an empty split of {n} samples")
        perm = np.random.default_rng(seed).permutation(n)
        val, train = np.sort(perm[:n_val]), np.sort(perm[n_val:])
        return replace(self, x_train=self.x_train[train], y_train=self.y_train[train],
                       x_val=self.x_train[val], y_val=self.y_train[val])


def data_dir(default: str | Path | None = None) -> Path:
    """``$PCN_DATA_DIR`` if set, else ``default``, else ``~/data``."""
    env = os.environ.get("PCN_DATA_DIR")
    if env:
        return Path(env)
    return Path(default) if default is not None else Path.home() / "data"


def _read_bytes(path: Path) -> bytes:
    try:
        if path.suffix == ".gz":
            with gzip.open(path, "rb") as f:
                return f.read()
        return path.read_bytes()
    except (OSError, EOFError) as exc:
        raise DataError(f"cannot read {path}: {exc}") from None


def parse_idx(raw: bytes, expected_magic: int, source: str = "<bytes>") -> np.ndarray:
    """Decode an unsigned-byte IDX file into an array of its declared shape."""
    if len(raw) < 8:
        raise DataError(f"{source}: too short for an IDX header")
    magic, count = struct.unpack(">II", raw[:8])
    if magic != expected_magic:
        raise DataError(f"{source}: bad IDX magic 0x{magic:08x}, expected 0x{expected_magic:08x}")
    rank = magic & 0xFF
    header = 4 + 4 * rank
    if len(raw) < header:
        raise DataError(f"{source}: truncated IDX header")
    dims = struct.unpack(f">{rank}I", raw[4:header])
    size = int(np.prod(dims))
    if len(raw) != header + size:
        raise DataError(f"{source}: expected {header + size} bytes, found {len(raw)} (truncated or padded)")
    return np.frombuffer(raw, dtype=np.uint8, offset=header).reshape(dims)


def _find(directory: Path, stem: str) -> Path:
    for name in (stem, stem + ".gz", stem.replace("-idx", ".idx"), stem.replace("-idx", ".idx") + ".gz"):
        path = directory / name
        if path.is_file():
            return path
    raise DataError(f"missing {stem} in {directory}")


def _check_labels(labels: np.ndarray, classes: int, source: str) -> np.ndarray:
    if labels.size and labels.max() >= classes:
        raise DataError(f"{source}: label {int(labels.max())} out of range [0, {classes})")
    return labels.astype(np.int64)


def load_mnist(directory: str | Path | None = None) -> Dataset:
    """MNIST as 28x28x1 float32 images scaled to [0, 1]."""
    directory = Path(directory) if directory is not None else data_dir() / "mnist"
    arrays = {}
    for key, stem in MNIST_FILES.items():
        path = _find(directory, stem)
        magic = IMAGES_MAGIC if key.endswith("images") else LABELS_MAGIC
        arrays[key] = parse_idx(_read_bytes(path), magic, str(path))
    for split in ("train", "test"):
        if len(arrays[f"{split}_images"]) != len(arrays[f"{split}_labels"]):
            raise DataError(f"MNIST {split}: image and label counts differ")
    scale = np.float32(1 / 255)
    return Dataset(
        "mnist",
        arrays["train_images"][..., None].astype(np.float32) * scale,
        _check_labels(arrays["train_labels"], 10, "MNIST train labels"),
        arrays["test_images"][..., None].astype(np.float32) * scale,
        _check_labels(arrays["test_labels"], 10, "MNIST test labels"),
    )


def parse_cifar_batch(raw: bytes, source: str = "<bytes>") -> tuple[np.ndarray, np.ndarray]:
    """Decode CIFAR-10 binary records into uint8 ``(N, 32, 32, 3)`` images and labels."""
    if len(raw) == 0 or len(raw) % CIFAR_RECORD:
        raise DataError(f"{source}: size {len(raw)} is not a multiple of the {CIFAR_RECORD}-byte record")
    rec = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
    labels = _check_labels(rec[:, 0], 10, source)
    images = rec[:, 1:].reshape(-1, 3, 32, 32).transpose(0, 2, 3, 1)
    return np.ascontiguousarray(images), labels


def load_cifar10(directory: str | Path | None = None) -> Dataset:
    """CIFAR-10, standardized per channel with training-set statistics."""
    directory = Path(directory) if directory is not None else data_dir() / "cifar-10-batches-bin"
    if (directory / "cifar-10-batches-bin").is_dir():
        directory = directory / "cifar-10-batches-bin"

    def batch(name):
        path = directory / name
        if not path.is_file():
            raise DataError(f"missing {name} in {directory}")
        return parse_cifar_batch(_read_bytes(path), str(path))

    parts = [batch(f"data_batch_{i}.bin") for i in range(1, 6)]
    x_train = np.concatenate([p[0] for p in parts])
    y_train = np.concatenate([p[1] for p in parts])
    x_test, y_test = batch("test_batch.bin")
    mean, std = channel_stats(x_train)
    return Dataset("cifar10", standardize(x_train, mean, std), y_train, standardize(x_test, mean, std), y_test,
                   mean=mean, std=std)


def channel_stats(images: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-channel mean and population standard deviation of uint8 images.

    Computed exactly from per-channel value histograms.
    """
    values = np.arange(256, dtype=np.float64)
    means, stds = [], []
    for c in range(images.shape[-1]):
        hist = np.bincount(images[..., c].ravel(), minlength=256).astype(np.float64)
        total = hist.sum()
        mean = hist @ values / total
        means.append(mean)
        stds.append(np.sqrt(hist @ (values - mean) ** 2 / total))
    return np.array(means), np.array(stds)


def standardize(images: np.ndarray, mean: np.ndarray, std: np.ndarray) -> np.ndarray:
    """``(x - mean) / std`` per channel for uint8 images, via a lookup table."""
    table = ((np.arange(256, dtype=np.float64)[:, None] - mean) / std).astype(np.float32)
    out = np.empty(images.shape, dtype=np.float32)
    for c in range(images.shape[-1]):
        out[..., c] = table[images[..., c], c]
    return out


def load_dataset(name: str, directory: str | Path | None = None) -> Dataset:
    loaders = {"mnist": load_mnist, "cifar10": load_cifar10}
    if name not in loaders:
        raise DataError(f"unknown dataset {name!r}; available: {', '.join(loaders)}")
    return loaders[name](directory)


def subsample(ds: Dataset, n: int, seed: int = 0) -> Dataset:
    """Keep ``n`` training samples, class-stratified when ``n`` splits evenly.

    Selected samples keep their original order; ``n`` equal to the training
    size returns ``ds`` unchanged.
    """
    total = len(ds.x_train)
    if n <= 0:
        raise DataError(f"subsample size must be positive, got {n}")
    if n > total:
        raise DataError(f"cannot subsample {n} of {total} training samples")
    if n == total:
        return ds
    rng = np.random.default_rng(seed)
    if n % ds.classes == 0:
        per = n // ds.classes
        idx = []
        for c in range(ds.classes):
            members = np.flatnonzero(ds.y_train == c)
            if len(members) < per:
                raise DataError(f"class {c} has {len(members)} samples, {per} needed")
            idx.append(rng.choice(members, size=per, replace=False))
        idx = np.sort(np.concatenate(idx))
    else:
        idx = np.sort(rng.choice(total, size=n, replace=False))
    return replace(ds, x_train=ds.x_train[idx], y_train=ds.y_train[idx])


def augment(batch: np.ndarray, policy: str = "none", rng: np.random.Generator | int | None = None) -> np.ndarray:
    """Training-time augmentation.

    ``pad4-crop32-hflip`` zero-pads 4 pixels on every side, takes a random
    32x32 crop and mirrors it horizontally with probability 1/2.
    """
    if policy not in AUGMENT_POLICIES:
        raise DataError(f"unknown augmentation policy {policy!r}; available: {', '.join(AUGMENT_POLICIES)}")
    if policy == "none":
        return batch
    if batch.ndim != 4 or batch.shape[1:3] != (32, 32):
        raise DataError(f"{policy} needs (N, 32, 32, c) batches, got {batch.shape}")
    rng = np.random.default_rng(rng)
    n = len(batch)
    padded = np.pad(batch, ((0, 0), (4, 4), (4, 4), (0, 0)))
    dy, dx = rng.integers(0, 9, size=(2, n))
    flip = rng.random(n) < 0.5
    out = np.empty_like(batch)
    for i in range(n):
        crop = padded[i, dy[i]:dy[i] + 32, dx[i]:dx[i] + 32]
        out[i] = crop[:, ::-1] if flip[i] else crop
    return out


def batches(n: int, batch_size: int, rng: np.random.Generator | None = None):
    """Index arrays of consecutive minibatches, shuffled when ``rng`` is given."""
    order = rng.permutation(n) if rng is not None else np.arange(n)
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]


def fetch_mnist(dest: str | Path, base_url: str, force: bool = False) -> list[Path]:
    """Download the four gzipped MNIST files from ``base_url`` into ``dest``.

    Each file is decompressed and its SHA-256 checked before it is written.
    Existing files with the right checksum are left alone.
    """
    dest = Path(dest)
    dest.mkdir(parents=True, exist_ok=True)
    written = []
    for stem, digest in MNIST_SHA256.items():
        target = dest / stem
        if target.is_file() and not force and hashlib.sha256(target.read_bytes()).hexdigest() == digest:
            written.append(target)
            continue
        url = base_url.rstrip("/") + "/" + stem + ".gz"
        try:
            with urllib.request.urlopen(url, timeout=60) as resp:
                raw = gzip.decompress(resp.read())
        except (OSError, EOFError) as exc:
            raise DataError(f"download of {url} failed: {exc}") from None
        got = hashlib.sha256(raw).hexdigest()
        if got != digest:
            raise DataError(f"{url}: SHA-256 {got} does not match the expected {digest}")
        tmp = target.with_suffix(".part")
        tmp.write_bytes(raw)
        tmp.replace(target)
        written.append(target)
    return written
