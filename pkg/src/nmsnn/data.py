"""Spike datasets: synthetic class templates and rate-coded images.

Flat dataset file layout (all integers little-endian)::

    offset  size  field
    0       8     magic b"NMSDATA\\0"
    8       4     u32 version (1)
    12      4     u32 count
    16      4     u32 height
    20      4     u32 width
    24      4     u32 num_classes
    28      count u8 labels
    ...     count*height*width  u8 intensities (row-major, value/255 in [0, 1])
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DomainError

__all__ = [
    "SpikeDatasetSpec",
    "EncodedBatch",
    "SpikeDataset",
    "ImageDataset",
    "generate_synthetic",
    "encode_rate",
    "write_flat",
    "read_flat",
    "digits_arrays",
    "write_digits_file",
    "load_dataset",
]

DATA_MAGIC = b"NMSDATA\x00"
_HEADER = struct.Struct("<8sIIIII")


@dataclass(frozen=True)
class SpikeDatasetSpec:
    kind: str = "synthetic_patterns"
    num_classes: int = 4
    time_steps: int = 8
    input_dim: int = 32
    encoder: str = "rate"
    source_path: str | None = None
    num_samples: int = 512
    margin: float = 0.5
    base_rate: float = 0.1
    active_fraction: float = 0.25
    test_fraction: float = 0.2

    def __post_init__(self):
        if self.kind not in ("synthetic_patterns", "image_rate_coded"):
            raise DomainError(f"unknown dataset kind {self.kind!r}")
        if self.encoder not in ("rate", "direct_first_layer"):
            raise DomainError(f"unknown encoder {self.encoder!r}")
        if self.time_steps < 1:
            raise DomainError("time_steps must be >= 1")
        if self.num_classes < 1:
            raise DomainError("num_classes must be >= 1")


@dataclass
class EncodedBatch:
    spikes: np.ndarray  # (batch, T, input_dim) of 0/1
    labels: np.ndarray


class SpikeDataset:
    """Pre-encoded spike trains; batches are drawn by index."""

    def __init__(self, spikes: np.ndarray, labels: np.ndarray, num_classes: int):
        self.spikes = np.asarray(spikes, dtype=np.uint8)
        self.labels = np.asarray(labels, dtype=np.int64)
        self.num_classes = num_classes

    def __len__(self):
        return len(self.labels)

    @property
    def input_dim(self) -> int:
        return self.spikes.shape[2]

    def batch(self, idx, rng=None, time_steps=None) -> EncodedBatch:
        return EncodedBatch(spikes=self.spikes[idx].astype(float), labels=self.labels[idx])


class ImageDataset:
    """Intensities in [0, 1]; spikes are freshly rate-coded for every batch."""

    def __init__(self, images: np.ndarray, labels: np.ndarray, num_classes: int, time_steps: int, encoder: str = "rate"):
        self.images = np.asarray(images, dtype=float).reshape(len(labels), -1)
        self.labels = np.asarray(labels, dtype=np.int64)
        self.num_classes = num_classes
        self.time_steps = time_steps
        self.encoder = encoder

    def __len__(self):
        return len(self.labels)

    @property
    def input_dim(self) -> int:
        return self.images.shape[1]

    def batch(self, idx, rng: np.random.Generator, time_steps=None) -> EncodedBatch:
        T = time_steps or self.time_steps
        img = self.images[idx]
        if self.encoder == "direct_first_layer":
            # analog intensities presented at every step
            spikes = np.repeat(img[:, None, :], T, axis=1)
            return EncodedBatch(spikes=spikes, labels=self.labels[idx])
        enc = encode_rate(img, T, rng)
        enc.labels = self.labels[idx]
        return enc


def encode_rate(images, T: int, rng: np.random.Generator) -> EncodedBatch:
    """Bernoulli rate coding: spike[b, t, d] ~ Bernoulli(images[b, d])."""
    img = np.asarray(images, dtype=float)
    if np.any(~np.isfinite(img)) or np.any(img < 0.0) or np.any(img > 1.0):
        raise DomainError("intensities must lie in [0, 1]")
    img = img.reshape(img.shape[0], -1)
    u = rng.random((img.shape[0], T, img.shape[1]))
    spikes = (u < img[:, None, :]).astype(float)
    return EncodedBatch(spikes=spikes, labels=np.zeros(img.shape[0], dtype=np.int64))


def generate_synthetic(spec: SpikeDatasetSpec, rng: np.random.Generator, templates=None):
    """Class-conditional Poisson spike patterns.

    Each class has a rate template: ``base_rate`` everywhere plus ``margin`` on
    a random subset of ``active_fraction`` of the inputs. Pass ``templates``
    (num_classes, input_dim) to override. Returns ``(train, test)`` datasets.
    """
    if spec.kind != "synthetic_patterns":
        raise DomainError("generate_synthetic needs kind='synthetic_patterns'")
    C, D, T = spec.num_classes, spec.input_dim, spec.time_steps
    if templates is None:
        n_active = max(1, int(round(spec.active_fraction * D)))
        templates = np.full((C, D), spec.base_rate)
        for c in range(C):
            on = rng.choice(D, size=n_active, replace=False)
            templates[c, on] += spec.margin
    templates = np.clip(np.asarray(templates, dtype=float), 0.0, 1.0)
    labels = np.arange(spec.num_samples) % C
    rng.shuffle(labels)
    rates = templates[labels]
    spikes = (rng.random((spec.num_samples, T, D)) < rates[:, None, :]).astype(np.uint8)
    n_test = int(round(spec.test_fraction * spec.num_samples))
    train = SpikeDataset(spikes[n_test:], labels[n_test:], C)
    test = SpikeDataset(spikes[:n_test], labels[:n_test], C)
    return train, test


# ---------------------------------------------------------------------------
# Flat binary image files
# ---------------------------------------------------------------------------


def write_flat(path, images, labels, num_classes: int):
    """Write ``images`` (count, H, W) with intensities in [0, 1]."""
    images = np.asarray(images, dtype=float)
    if images.ndim != 3:
        raise DomainError("images must be (count, height, width)")
    if np.any(images < 0) or np.any(images > 1):
        raise DomainError("intensities must lie in [0, 1]")
    labels = np.asarray(labels)
    count, h, w = images.shape
    header = _HEADER.pack(DATA_MAGIC, 1, count, h, w, num_classes)
    body = labels.astype(np.uint8).tobytes() + np.round(images * 255).astype(np.uint8).tobytes()
    Path(path).write_bytes(header + body)


def read_flat(path):
    """Return ``(images (count, H, W) in [0, 1], labels, num_classes)``."""
    data = Path(path).read_bytes()
    magic, version, count, h, w, classes = _HEADER.unpack_from(data, 0)
    if magic != DATA_MAGIC or version != 1:
        raise ValueError(f"{path} is not a version-1 flat dataset file")
    pos = _HEADER.size
    if len(data) != pos + count + count * h * w:
        raise ValueError(f"{path} has {len(data)} bytes, expected {pos + count + count * h * w}")
    labels = np.frombuffer(data, dtype=np.uint8, count=count, offset=pos).astype(np.int64)
    pix = np.frombuffer(data, dtype=np.uint8, count=count * h * w, offset=pos + count)
    return pix.reshape(count, h, w) / 255.0, labels, classes


def digits_arrays():
    """scikit-learn's bundled 8x8 handwritten digits (1797 samples, 10 classes).

    Intensities are quantised to the 1/255 grid so they round-trip through
    the flat file format unchanged.
    """
    from sklearn.datasets import load_digits

    d = load_digits()
    images = np.round(d.images / 16.0 * 255) / 255.0
    return images, d.target.astype(np.int64), 10


def write_digits_file(path) -> Path:
    images, labels, classes = digits_arrays()
    write_flat(path, images, labels, classes)
    return Path(path)


def load_dataset(spec: SpikeDatasetSpec, seed: int):
    """Build ``(train, test)`` for a spec. Deterministic in ``(spec, seed)``."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xDA7A]))
    if spec.kind == "synthetic_patterns":
        return generate_synthetic(spec, rng)
    if spec.source_path is None:
        raise DomainError("image_rate_coded datasets need source_path (a flat file or 'sklearn:digits')")
    if spec.source_path == "sklearn:digits":
        images, labels, classes = digits_arrays()
    else:
        images, labels, classes = read_flat(spec.source_path)
    order = rng.permutation(len(labels))
    n_test = int(round(spec.test_fraction * len(labels)))
    te, tr = order[:n_test], order[n_test:]
    mk = lambda idx: ImageDataset(images[idx], labels[idx], classes, spec.time_steps, spec.encoder)  # noqa: E731
    return mk(tr), mk(te)
