"""Datasets: the IDX (MNIST) reader/writer and a synthetic blob generator."""

import gzip
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import FormatError, ParameterError

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801


@dataclass(frozen=True)
class LabeledDataset:
    """Images (N x H x W x C, values in [0, 1]) with integer labels."""

    images: np.ndarray
    labels: np.ndarray
    num_classes: int = 10

    def __post_init__(self):
        images = np.asarray(self.images, dtype=np.float64)
        labels = np.asarray(self.labels, dtype=np.int64)
        if images.ndim != 4:
            raise ParameterError(f"images must be N x H x W x C, got {images.shape}")
        if labels.shape != (images.shape[0],):
            raise ParameterError(f"{labels.shape} labels for {images.shape[0]} images")
        if images.size and (images.min() < 0.0 or images.max() > 1.0):
            raise ParameterError("pixel values must lie in [0, 1]")
        if labels.size and (labels.min() < 0 or labels.max() >= self.num_classes):
            raise ParameterError(f"labels must lie in [0, {self.num_classes})")
        images.flags.writeable = False
        labels.flags.writeable = False
        object.__setattr__(self, "images", images)
        object.__setattr__(self, "labels", labels)

    def __len__(self):
        return self.labels.shape[0]

    @property
    def image_shape(self):
        return self.images.shape[1:]

    def subset(self, index):
        index = np.asarray(index)
        return LabeledDataset(self.images[index], self.labels[index], self.num_classes)

    def head(self, n):
        return self.subset(np.arange(min(n, len(self))))

    def split(self, n_first):
        return self.head(n_first), self.subset(np.arange(n_first, len(self)))


def _read_bytes(path):
    path = Path(path)
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "rb") as f:
        return f.read()


def _parse_idx(raw, expected_magic, what):
    if len(raw) < 8:
        raise FormatError(f"{what} file truncated: expected at least 8 header bytes, got {len(raw)}", len(raw))
    magic, count = struct.unpack(">II", raw[:8])
    if magic != expected_magic:
        raise FormatError(f"bad {what} magic 0x{magic:08x} (expected 0x{expected_magic:08x})", 0)
    ndim = expected_magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise FormatError(f"{what} header truncated: expected {header} bytes, got {len(raw)}", len(raw))
    dims = struct.unpack(">" + "I" * ndim, raw[4:header])
    expected = header + int(np.prod(dims))
    if len(raw) != expected:
        raise FormatError(f"{what} payload length mismatch: expected {expected} bytes, got {len(raw)}", min(len(raw), expected))
    return dims, np.frombuffer(raw, dtype=np.uint8, offset=header).reshape(dims)


def load_mnist_idx(images_path, labels_path):
    """Parse an IDX image/label file pair; ``.gz`` files are decompressed transparently."""
    (n, rows, cols), pixels = _parse_idx(_read_bytes(images_path), IMAGE_MAGIC, "image")
    (m,), labels = _parse_idx(_read_bytes(labels_path), LABEL_MAGIC, "label")
    if n != m:
        raise FormatError(f"image count {n} does not match label count {m}", 4)
    if labels.size and labels.max() > 9:
        raise FormatError(f"label value {labels.max()} outside 0-9", 8 + int(np.argmax(labels > 9)))
    images = pixels.astype(np.float64).reshape(n, rows, cols, 1) / 255.0
    return LabeledDataset(images, labels.astype(np.int64), 10)


def write_idx_images(path, images):
    """Write uint8 N x H x W images as an IDX3 file (test fixtures, data export)."""
    images = np.asarray(images, dtype=np.uint8)
    n, rows, cols = images.shape
    with open(path, "wb") as f:
        f.write(struct.pack(">IIII", IMAGE_MAGIC, n, rows, cols))
        f.write(images.tobytes())


def write_idx_labels(path, labels):
    labels = np.asarray(labels, dtype=np.uint8)
    with open(path, "wb") as f:
        f.write(struct.pack(">II", LABEL_MAGIC, labels.shape[0]))
        f.write(labels.tobytes())


def find_mnist(root=None):
    """Locate the four MNIST files under ``root`` (default: $EVADELAB_MNIST or ./data/mnist)."""
    import os

    candidates = [root] if root else [os.environ.get("EVADELAB_MNIST"), "data/mnist",
                                      Path(__file__).resolve().parents[2] / "data" / "mnist"]
    names = ("train-images-idx3-ubyte", "train-labels-idx1-ubyte", "t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte")
    for c in candidates:
        if not c:
            continue
        found = []
        for name in names:
            for suffix in ("", ".gz"):
                p = Path(c) / (name + suffix)
                if p.exists():
                    found.append(p)
                    break
        if len(found) == 4:
            return tuple(found)
    return None


def load_mnist(root=None):
    """(train, test) datasets from the located MNIST files."""
    paths = find_mnist(root)
    if paths is None:
        raise FileNotFoundError("MNIST IDX files not found; set EVADELAB_MNIST or place them in data/mnist")
    return load_mnist_idx(paths[0], paths[1]), load_mnist_idx(paths[2], paths[3])


def generate_synthetic(num_classes, samples, seed, side=8, noise=0.08):
    """Gaussian-blob images: each class is a bright blob at its own location.

    Classes are linearly separable for small ``num_classes``; output is a
    deterministic function of ``seed``.
    """
    if num_classes < 2 or samples < 1:
        raise ParameterError("need at least two classes and one sample")
    rng = np.random.default_rng(seed)
    angles = 2 * np.pi * np.arange(num_classes) / num_classes
    radius = side / 3.5
    centres = np.stack([side / 2 - 0.5 + radius * np.sin(angles), side / 2 - 0.5 + radius * np.cos(angles)], axis=1)
    yy, xx = np.mgrid[0:side, 0:side]
    labels = np.arange(samples) % num_classes
    rng.shuffle(labels)
    jitter = rng.normal(scale=0.4, size=(samples, 2))
    cy = centres[labels, 0] + jitter[:, 0]
    cx = centres[labels, 1] + jitter[:, 1]
    sigma = side / 8
    blobs = np.exp(-((yy[None] - cy[:, None, None]) ** 2 + (xx[None] - cx[:, None, None]) ** 2) / (2 * sigma ** 2))
    images = np.clip(blobs + rng.normal(scale=noise, size=blobs.shape), 0.0, 1.0)
    return LabeledDataset(images[..., None], labels, num_classes)
