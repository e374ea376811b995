"""Datasets: CIFAR-10 binary batches, desk-scale synthetic sets, and the
augmentation pipeline.

Images are channel-first float32 (C, H, W). CIFAR normalization statistics
come from the training split only; the test split reuses them.
"""

from __future__ import annotations

import os
from typing import NamedTuple

import numpy as np

from .errors import DataFormatError

RECORD_BYTES = 3073  # 1 label byte + 3 * 32 * 32 pixels
CIFAR_TRAIN_FILES = [f"data_batch_{i}.bin" for i in range(1, 6)]
CIFAR_TEST_FILE = "test_batch.bin"


class Dataset(NamedTuple):
    x_train: np.ndarray
    y_train: np.ndarray
    x_test: np.ndarray
    y_test: np.ndarray
    mean: np.ndarray | None = None
    std: np.ndarray | None = None


def _read_cifar_file(path: str):
    if not os.path.exists(path):
        raise DataFormatError(f"missing dataset file {path}")
    raw = np.fromfile(path, dtype=np.uint8)
    n_complete, leftover = divmod(raw.size, RECORD_BYTES)
    if leftover != 0:
        raise DataFormatError(
            f"truncated record in {path} at byte offset {n_complete * RECORD_BYTES}")
    if n_complete == 0:
        raise DataFormatError(f"no records in {path}")
    rec = raw.reshape(n_complete, RECORD_BYTES)
    labels = rec[:, 0].astype(np.int64)
    bad = np.nonzero(labels >= 10)[0]
    if bad.size:
        raise DataFormatError(
            f"label {labels[bad[0]]} out of range in {path} at record {bad[0]}")
    images = rec[:, 1:].reshape(n_complete, 3, 32, 32)
    return images, labels


def load_cifar10(data_dir: str, subset_size: int | None = None,
                 test_subset_size: int | None = None) -> Dataset:
    """Read the binary batches under data_dir. At least one data_batch_*.bin
    plus test_batch.bin must be present. subset_size keeps the leading slice
    of the concatenated training records; normalization statistics are
    computed from exactly the training images kept."""
    train_parts = []
    label_parts = []
    for name in CIFAR_TRAIN_FILES:
        path = os.path.join(data_dir, name)
        if not os.path.exists(path):
            continue
        xs, ys = _read_cifar_file(path)
        train_parts.append(xs)
        label_parts.append(ys)
    if not train_parts:
        raise DataFormatError(f"no data_batch_*.bin files under {data_dir}")
    x_train = np.concatenate(train_parts)
    y_train = np.concatenate(label_parts)
    x_test, y_test = _read_cifar_file(os.path.join(data_dir, CIFAR_TEST_FILE))
    if subset_size is not None:
        x_train = x_train[:subset_size]
        y_train = y_train[:subset_size]
    if test_subset_size is not None:
        x_test = x_test[:test_subset_size]
        y_test = y_test[:test_subset_size]

    xf = x_train.astype(np.float32) / 255.0
    mean = xf.mean(axis=(0, 2, 3))
    std = xf.std(axis=(0, 2, 3))
    std[std == 0] = 1.0
    xf = (xf - mean[None, :, None, None]) / std[None, :, None, None]
    xt = (x_test.astype(np.float32) / 255.0 - mean[None, :, None, None]) \
        / std[None, :, None, None]
    return Dataset(xf, y_train, xt, y_test, mean=mean, std=std)


def synthetic_dataset(kind: str, n_samples: int, seed: int, dim: int = 8,
                      n_classes: int = 4) -> Dataset:
    """Deterministic desk-scale sets with an 80/20 split.

    spiral: three interleaved 2-D arms, the classic nonlinear benchmark.
    blobs: widely separated Gaussian clusters, linearly separable.
    """
    rng = np.random.default_rng((int(seed), 31))
    if kind == "spiral":
        k = 3
        per = [n_samples // k + (1 if c < n_samples % k else 0) for c in range(k)]
        xs, ys = [], []
        for c in range(k):
            t = rng.random(per[c])
            radius = 0.1 + 0.9 * t
            theta = t * 3.5 * np.pi / k + 2.0 * np.pi * c / k
            theta = theta + rng.standard_normal(per[c]) * 0.08
            xs.append(np.stack([radius * np.cos(theta), radius * np.sin(theta)], axis=1))
            ys.append(np.full(per[c], c, dtype=np.int64))
        x = np.concatenate(xs).astype(np.float32)
        y = np.concatenate(ys)
    elif kind == "blobs":
        means = rng.standard_normal((n_classes, dim))
        means *= 6.0 / np.linalg.norm(means, axis=1, keepdims=True)
        y = rng.integers(0, n_classes, size=n_samples)
        x = (means[y] + rng.standard_normal((n_samples, dim))).astype(np.float32)
        y = y.astype(np.int64)
    else:
        raise ValueError(f"unknown synthetic dataset {kind!r}")
    order = rng.permutation(n_samples)
    x, y = x[order], y[order]
    n_train = int(0.8 * n_samples)
    return Dataset(x[:n_train], y[:n_train], x[n_train:], y[n_train:])


def apply_augment(image: np.ndarray, oy: int, ox: int, flip: bool) -> np.ndarray:
    """Deterministic core of the augmentation: pad 4, crop a 32x32 window at
    (oy, ox), optionally mirror horizontally. (4, 4) without flip is the
    identity."""
    c, h, w = image.shape
    padded = np.pad(image, ((0, 0), (4, 4), (4, 4)))
    out = padded[:, oy:oy + h, ox:ox + w]
    if flip:
        out = out[:, :, ::-1]
    return np.ascontiguousarray(out)


def augment(image: np.ndarray, rng) -> np.ndarray:
    """Random-crop-with-padding plus 50% horizontal flip for one (C, 32, 32)
    image."""
    oy = int(rng.integers(0, 9))
    ox = int(rng.integers(0, 9))
    flip = bool(rng.random() < 0.5)
    return apply_augment(image, oy, ox, flip)


def augment_batch(x: np.ndarray, rng) -> np.ndarray:
    """Augment a (B, C, H, W) batch; per-image draws happen in index order so
    the result is a pure function of (x, rng state)."""
    b, c, h, w = x.shape
    oy = rng.integers(0, 9, size=b)
    ox = rng.integers(0, 9, size=b)
    flip = rng.random(b) < 0.5
    padded = np.pad(x, ((0, 0), (0, 0), (4, 4), (4, 4)))
    out = np.empty_like(x)
    for i in range(b):
        win = padded[i, :, oy[i]:oy[i] + h, ox[i]:ox[i] + w]
        out[i] = win[:, :, ::-1] if flip[i] else win
    return out


# --- CIFAR-format synthetic imagery ----------------------------------------
#
# Ten classes built from oriented gratings with class-specific color mixes and
# spatial frequencies, plus per-image phase/shift/noise. Structured enough for
# a small conv net, noisy enough that training method quality shows.

_PALETTE = np.array([
    [1.0, 0.2, 0.2], [0.2, 1.0, 0.2], [0.2, 0.2, 1.0], [1.0, 1.0, 0.2],
    [1.0, 0.2, 1.0], [0.2, 1.0, 1.0], [1.0, 0.6, 0.2], [0.6, 0.2, 1.0],
    [0.2, 0.6, 0.6], [0.8, 0.8, 0.8],
])


def synth_image(label: int, rng) -> np.ndarray:
    """One (3, 32, 32) uint8 image for the given class.

    Class identity lives mostly in grating orientation (random phase and
    shift rule out pixel templates); the color mix is softened toward gray so
    channel statistics alone are a weak cue.
    """
    i, j = np.meshgrid(np.arange(32), np.arange(32), indexing="ij")
    # orientation jitter overlaps neighboring classes: the irreducible
    # confusion keeps accuracies off the ceiling where method gaps vanish
    theta = (label + rng.standard_normal() * 0.35) * np.pi / 10.0
    freq = 4.0 * (1.0 + 0.3 * (rng.random() - 0.5))
    phase = rng.random() * 2.0 * np.pi
    di = float(rng.integers(-3, 4))
    dj = float(rng.integers(-3, 4))
    track = ((i - di) * np.cos(theta) + (j - dj) * np.sin(theta)) / 32.0
    pattern = np.sin(2.0 * np.pi * freq * track + phase)
    # a second, fainter grating at the "opposite" class keeps classes entangled
    other = (label + 5) % 10
    theta2 = other * np.pi / 10.0
    track2 = (i * np.cos(theta2) + j * np.sin(theta2)) / 32.0
    pattern = pattern + 0.35 * np.sin(2.0 * np.pi * 4.0 * track2 + phase * 0.7)
    color = 0.3 * _PALETTE[label] + 0.7 * _PALETTE.mean(axis=0)
    img = color[:, None, None] * pattern[None, :, :]
    img = img + rng.standard_normal((3, 32, 32)) * 0.6
    return np.clip(128.0 + 72.0 * img, 0, 255).astype(np.uint8)


def write_synthetic_cifar(data_dir: str, n_train: int = 10000,
                          n_test: int = 2000, seed: int = 0) -> None:
    """Emit CIFAR-10-shaped binary batches (data_batch_1.bin, test_batch.bin)
    with labels cycling 0..9 so leading-slice subsets stay class-balanced."""
    os.makedirs(data_dir, exist_ok=True)
    for name, count, tag in ((CIFAR_TRAIN_FILES[0], n_train, 41),
                             (CIFAR_TEST_FILE, n_test, 42)):
        rng = np.random.default_rng((int(seed), tag))
        rec = np.empty((count, RECORD_BYTES), dtype=np.uint8)
        for idx in range(count):
            label = idx % 10
            rec[idx, 0] = label
            rec[idx, 1:] = synth_image(label, rng).reshape(-1)
        rec.tofile(os.path.join(data_dir, name))
