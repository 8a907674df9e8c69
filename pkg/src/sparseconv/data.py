"""Dataset loading: IDX image/label files and synthetic blob classes."""

import gzip
import struct
from dataclasses import dataclass

import numpy as np

from .errors import DataFormatError, ConfigError

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


@dataclass
class Dataset:
    images: np.ndarray  # (N, C, H, W) float32 in [0, 1]
    labels: np.ndarray  # (N,) int64
    num_classes: int

    def __len__(self):
        return len(self.labels)

    def subset(self, n):
        return Dataset(self.images[:n], self.labels[:n], self.num_classes)


def _read_bytes(path):
    opener = gzip.open if str(path).endswith(".gz") else open
    with opener(path, "rb") as fh:
        return fh.read()


def _read_u32(buf, offset, path):
    if offset + 4 > len(buf):
        raise DataFormatError(
            f"{path} truncated at byte offset {len(buf)} (wanted 4 bytes at {offset})",
            offset=offset,
        )
    return struct.unpack_from(">I", buf, offset)[0]


def load_idx_images(path):
    """Read a big-endian IDX image file into (N, 1, H, W) uint8."""
    buf = _read_bytes(path)
    magic = _read_u32(buf, 0, path)
    if magic != IDX_IMAGES_MAGIC:
        raise DataFormatError(
            f"{path} has bad magic 0x{magic:08x} at byte offset 0, "
            f"expected 0x{IDX_IMAGES_MAGIC:08x}",
            offset=0,
        )
    n = _read_u32(buf, 4, path)
    rows = _read_u32(buf, 8, path)
    cols = _read_u32(buf, 12, path)
    need = 16 + n * rows * cols
    if len(buf) < need:
        raise DataFormatError(
            f"{path} truncated at byte offset {len(buf)}, expected {need} bytes",
            offset=len(buf),
        )
    data = np.frombuffer(buf, dtype=np.uint8, count=n * rows * cols, offset=16)
    return data.reshape(n, 1, rows, cols)


def load_idx_labels(path):
    """Read a big-endian IDX label file into (N,) uint8."""
    buf = _read_bytes(path)
    magic = _read_u32(buf, 0, path)
    if magic != IDX_LABELS_MAGIC:
        raise DataFormatError(
            f"{path} has bad magic 0x{magic:08x} at byte offset 0, "
            f"expected 0x{IDX_LABELS_MAGIC:08x}",
            offset=0,
        )
    n = _read_u32(buf, 4, path)
    need = 8 + n
    if len(buf) < need:
        raise DataFormatError(
            f"{path} truncated at byte offset {len(buf)}, expected {need} bytes",
            offset=len(buf),
        )
    return np.frombuffer(buf, dtype=np.uint8, count=n, offset=8)


def load_idx(path_images, path_labels, num_classes=10):
    """Load a paired IDX image/label set, pixels normalized to [0, 1]."""
    images = load_idx_images(path_images)
    labels = load_idx_labels(path_labels)
    if len(images) != len(labels):
        raise DataFormatError(
            f"{path_images} has {len(images)} images but {path_labels} has "
            f"{len(labels)} labels"
        )
    if labels.max(initial=0) >= num_classes:
        raise DataFormatError(
            f"{path_labels} contains label {labels.max()} >= {num_classes}"
        )
    return Dataset(
        images.astype(np.float32) / 255.0,
        labels.astype(np.int64),
        num_classes,
    )


@dataclass(frozen=True)
class SynthSpec:
    """Separable Gaussian-blob classes for fast smoke runs.

    Class k is a fixed bump at one of num_classes positions on a circle;
    samples add pixel noise. Trivially learnable, which is the point.
    """

    num_classes: int = 4
    size: int = 16
    count: int = 2048
    noise: float = 0.15

    def validate(self):
        if self.num_classes < 2:
            raise ConfigError(f"synth needs >= 2 classes, got {self.num_classes}")
        if self.size < 4:
            raise ConfigError(f"synth image size must be >= 4, got {self.size}")
        if self.count < 1:
            raise ConfigError(f"synth count must be >= 1, got {self.count}")
        return self


def synth_dataset(spec, seed):
    """Deterministic synthetic dataset for the given spec and seed."""
    spec.validate()
    rng = np.random.default_rng(seed)
    s = spec.size
    yy, xx = np.mgrid[0:s, 0:s].astype(np.float32)
    sigma = s / 8.0
    templates = []
    for k in range(spec.num_classes):
        ang = 2.0 * np.pi * k / spec.num_classes
        cy = s / 2.0 + (s / 4.0) * np.sin(ang)
        cx = s / 2.0 + (s / 4.0) * np.cos(ang)
        bump = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * sigma**2))
        templates.append(bump)
    labels = rng.integers(spec.num_classes, size=spec.count)
    images = np.empty((spec.count, 1, s, s), dtype=np.float32)
    for i, k in enumerate(labels):
        img = templates[k] + spec.noise * rng.standard_normal((s, s)).astype(np.float32)
        images[i, 0] = np.clip(img, 0.0, 1.0)
    return Dataset(images, labels.astype(np.int64), spec.num_classes)
