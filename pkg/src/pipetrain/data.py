"""Datasets, IDX loading, normalization and seeded mini/micro-batch slicing."""

import gzip
import struct
from dataclasses import dataclass

import numpy as np

from .runtime.engine import MicroBatch
from .tensor import DTYPE

IDX_IMAGES = 0x00000803
IDX_LABELS = 0x00000801

# per-channel (mean, std) used for the image benchmarks
NORMALIZATION_PRESETS = {
    "cifar10": ((0.4914, 0.4822, 0.4465), (0.2023, 0.1994, 0.2010)),
    "tiny_imagenet": ((0.485, 0.456, 0.406), (0.229, 0.224, 0.225)),
}


@dataclass
class Dataset:
    inputs: np.ndarray
    labels: np.ndarray
    num_classes: int
    split: str = "train"

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=DTYPE)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.inputs) != len(self.labels):
            raise ValueError(f"{len(self.inputs)} inputs but {len(self.labels)} labels")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValueError(f"labels must lie in [0, {self.num_classes})")

    def __len__(self):
        return len(self.labels)

    @property
    def sample_shape(self):
        return self.inputs.shape[1:]

    def subset(self, index, split=None):
        return Dataset(self.inputs[index], self.labels[index], self.num_classes, split or self.split)


@dataclass(frozen=True)
class BatchPlan:
    N: int
    T: int = 1
    shuffle_seed: int = 1

    def __post_init__(self):
        if self.N < 1 or self.T < 1:
            raise ValueError("N and T must be >= 1")
        if self.N % self.T:
            raise ValueError(f"mini-batch size {self.N} is not divisible by T={self.T}")

    @property
    def micro_size(self):
        return self.N // self.T


def synth_blobs(num_samples, num_features, num_classes, seed=1, separation=6.0, sigma=1.0):
    """Gaussian class clusters with unit-variance noise.

    Class means sit on mutually orthogonal directions (when there are at least as
    many features as classes) at distance ``separation * sigma`` from the origin.
    Labels are assigned round-robin, so class counts differ by at most one.
    """
    if min(num_samples, num_features, num_classes) < 1:
        raise ValueError("num_samples, num_features and num_classes must be positive")
    rng = np.random.default_rng(seed)
    directions = rng.standard_normal((max(num_features, num_classes), num_classes))
    if num_features >= num_classes:
        q, _ = np.linalg.qr(directions[:num_features])
        centers = q.T
    else:
        d = directions[:num_features].T
        centers = d / np.linalg.norm(d, axis=1, keepdims=True)
    centers = centers * separation * sigma
    labels = np.arange(num_samples) % num_classes
    inputs = centers[labels] + sigma * rng.standard_normal((num_samples, num_features))
    return Dataset(inputs, labels, num_classes)


def train_val_split(dataset, val_fraction=0.2, seed=1):
    if not 0 <= val_fraction < 1:
        raise ValueError("val_fraction must lie in [0, 1)")
    order = np.random.default_rng([seed, 0xBA7]).permutation(len(dataset))
    n_val = int(round(len(dataset) * val_fraction))
    return dataset.subset(order[n_val:], "train"), dataset.subset(order[:n_val], "val")


def _open(path):
    path = str(path)
    return gzip.open(path, "rb") if path.endswith(".gz") else open(path, "rb")


def _read_idx(path, expect_magic):
    with _open(path) as fh:
        raw = fh.read()
    if len(raw) < 8:
        raise ValueError(f"{path}: truncated IDX header")
    magic = struct.unpack(">I", raw[:4])[0]
    if magic != expect_magic:
        raise ValueError(f"{path}: bad magic 0x{magic:08x}, expected 0x{expect_magic:08x}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    count = int(np.prod(dims))
    body = np.frombuffer(raw, dtype=np.uint8, offset=header)
    if body.size != count:
        raise ValueError(f"{path}: expected {count} bytes of data, found {body.size}")
    return body.reshape(dims)


def load_idx(images_path, labels_path, num_classes=None, split="train"):
    """Load a big-endian u8 IDX image/label pair (MNIST layout), scaled to [0, 1].

    Images of shape (n, rows, cols) become (n, 1, rows, cols).
    """
    images = _read_idx(images_path, IDX_IMAGES)
    labels = _read_idx(labels_path, IDX_LABELS)
    if len(images) != len(labels):
        raise ValueError(f"{len(images)} images but {len(labels)} labels")
    x = images.astype(DTYPE) / 255.0
    if x.ndim == 3:
        x = x[:, None, :, :]
    y = labels.astype(np.int64)
    if num_classes is None:
        num_classes = int(y.max()) + 1 if len(y) else 1
    return Dataset(x, y, num_classes, split)


def write_idx(path, array, magic):
    """Write a u8 array in IDX format (used for fixtures and round trips)."""
    array = np.asarray(array, dtype=np.uint8)
    with open(path, "wb") as fh:
        fh.write(struct.pack(">I", magic))
        fh.write(struct.pack(f">{array.ndim}I", *array.shape))
        fh.write(array.tobytes())


def normalize(dataset, mean, std):
    """Per-channel (x - mean) / std along axis 1; ``mean``/``std`` may name a preset."""
    if isinstance(mean, str):
        mean, std = NORMALIZATION_PRESETS[mean]
    mean = np.asarray(mean, dtype=DTYPE)
    std = np.asarray(std, dtype=DTYPE)
    channels = dataset.inputs.shape[1] if dataset.inputs.ndim > 1 else 1
    if mean.shape != (channels,) or std.shape != (channels,):
        raise ValueError(f"expected {channels} channel statistics, got {mean.shape}/{std.shape}")
    if np.any(std == 0):
        raise ValueError("std contains 0")
    shape = (1, channels) + (1,) * (dataset.inputs.ndim - 2)
    x = (dataset.inputs - mean.reshape(shape)) / std.reshape(shape)
    return Dataset(x, dataset.labels, dataset.num_classes, dataset.split)


def shuffled_order(n, seed, epoch):
    """Epoch permutation from a generator keyed by (seed, epoch)."""
    return np.random.default_rng([int(seed), int(epoch)]).permutation(n)


def batches(dataset, plan, epoch=0):
    """Shuffle, cut into mini-batches of N (dropping the tail), split each into T micro-batches."""
    n = len(dataset)
    if plan.N > n:
        raise ValueError(f"mini-batch size {plan.N} exceeds the {n} available samples")
    order = shuffled_order(n, plan.shuffle_seed, epoch)
    out = []
    micro = plan.micro_size
    for t in range(n // plan.N):
        idx = order[t * plan.N:(t + 1) * plan.N]
        for j in range(plan.T):
            part = idx[j * micro:(j + 1) * micro]
            out.append(MicroBatch(t + 1, j + 1, dataset.inputs[part], dataset.labels[part]))
    return out
