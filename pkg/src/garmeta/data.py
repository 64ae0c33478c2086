"""Dataset ingestion, synthetic generators, split construction, label noising.

The CIFAR-10 binary layout is records of 3073 bytes: one label byte followed
by 3072 pixel bytes (1024 R, 1024 G, 1024 B, each row-major 32x32). The
synthetic generators stand in for it at desk scale: `synth_blobs` makes
Gaussian class clusters for the split-sampling experiment, `synth_images`
makes small in-range class-pattern images for the augmentation experiment.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import FormatError, ProbabilityError, SamplingError
from .policies import SplitAction
from .tensor import Rng

Array = np.ndarray

_CIFAR_RECORD = 3073
_CIFAR_CLASSES = 10


@dataclass
class Dataset:
    images: Array      # (M, C, H, W) float64
    labels: Array      # (M,) int64
    class_count: int

    def __post_init__(self):
        if self.images.ndim != 4:
            raise FormatError(f"images must be (M, C, H, W), got {self.images.shape}")
        if self.labels.shape != (self.images.shape[0],):
            raise FormatError("one label per image required")
        if self.labels.size and int(self.labels.max()) >= self.class_count:
            raise FormatError("label exceeds class_count")

    def __len__(self) -> int:
        return self.images.shape[0]


@dataclass
class SplitDataset:
    dataset: Dataset              # labels already noised where flagged
    split_assignment: Array       # (M,) split index per example
    noisy: list[bool]             # per-split noisy flag

    def __post_init__(self):
        self.members: list[Array] = [
            np.flatnonzero(self.split_assignment == s) for s in range(len(self.noisy))
        ]

    @property
    def n_splits(self) -> int:
        return len(self.noisy)


# ---------------------------------------------------------------------------
# CIFAR-10 binary ingestion
# ---------------------------------------------------------------------------

def load_cifar10_binary(paths: Sequence[str | Path]) -> Dataset:
    """Read one or more files in the CIFAR-10 binary layout."""
    images: list[Array] = []
    labels: list[Array] = []
    for path in paths:
        raw = np.fromfile(Path(path), dtype=np.uint8)
        if raw.size % _CIFAR_RECORD != 0:
            offset = (raw.size // _CIFAR_RECORD) * _CIFAR_RECORD
            raise FormatError(
                f"{path}: size {raw.size} is not a multiple of {_CIFAR_RECORD} "
                f"bytes (truncated record starts at byte {offset})"
            )
        records = raw.reshape(-1, _CIFAR_RECORD)
        file_labels = records[:, 0]
        if file_labels.size and file_labels.max() > _CIFAR_CLASSES - 1:
            bad = int(np.flatnonzero(file_labels > _CIFAR_CLASSES - 1)[0])
            raise FormatError(
                f"{path}: record {bad} has label byte {file_labels[bad]} > 9"
            )
        pixels = records[:, 1:].reshape(-1, 3, 32, 32).astype(np.float64) / 255.0
        images.append(pixels)
        labels.append(file_labels.astype(np.int64))
    if images:
        all_images = np.concatenate(images)
        all_labels = np.concatenate(labels)
    else:
        all_images = np.zeros((0, 3, 32, 32))
        all_labels = np.zeros(0, dtype=np.int64)
    return Dataset(images=all_images, labels=all_labels, class_count=_CIFAR_CLASSES)


def write_cifar10_binary(ds: Dataset, path: str | Path) -> None:
    """Inverse of load_cifar10_binary, up to the 1/255 quantization."""
    if ds.images.shape[1:] != (3, 32, 32):
        raise FormatError(f"CIFAR layout needs (3, 32, 32) images, got {ds.images.shape[1:]}")
    records = np.empty((len(ds), _CIFAR_RECORD), dtype=np.uint8)
    records[:, 0] = ds.labels
    records[:, 1:] = np.round(ds.images * 255.0).reshape(len(ds), -1)
    records.tofile(Path(path))


# ---------------------------------------------------------------------------
# synthetic data
# ---------------------------------------------------------------------------

def _class_sign_patterns(classes: int, dims: int) -> Array:
    """Per-class +-1 patterns: coordinate j carries bit (j mod B) of the class
    code, so distinct classes differ by 1.0 in every coordinate whose bit
    differs. Two classes come out at +1 and -1 everywhere."""
    bits = max(1, (classes - 1).bit_length())
    patterns = np.empty((classes, dims))
    for c in range(classes):
        code = [(c >> b) & 1 for b in range(bits)]
        patterns[c] = [1.0 - 2.0 * code[j % bits] for j in range(dims)]
    return patterns


def synth_blobs(classes: int, per_class: int, dims: int, seed: int) -> Dataset:
    """Gaussian clusters, one per class, sigma 0.3 around +-0.5 sign-pattern
    means (unit separation per differing coordinate). Stored as (M, 1, 1, dims)
    so a Flatten layer feeds them to fully-connected nets."""
    if classes < 2:
        raise ValueError("need at least 2 classes")
    rng = Rng(seed)
    means = 0.5 * _class_sign_patterns(classes, dims)
    features = np.empty((classes * per_class, dims))
    labels = np.empty(classes * per_class, dtype=np.int64)
    for c in range(classes):
        sl = slice(c * per_class, (c + 1) * per_class)
        features[sl] = means[c] + 0.3 * rng.normal((per_class, dims))
        labels[sl] = c
    return Dataset(images=features.reshape(-1, 1, 1, dims), labels=labels,
                   class_count=classes)


def synth_images(classes: int, per_class: int, side: int, seed: int) -> Dataset:
    """Small single-channel class-pattern images in [0, 1] for augmentation
    runs.

    Patterns are mirrored left-right (so horizontal flips are label-
    preserving) with a small +-0.2 amplitude under sigma 0.3 pixel noise:
    hard enough that training does not saturate, and weak enough that strong
    additive noise genuinely buries the class signal."""
    if classes < 2:
        raise ValueError("need at least 2 classes")
    rng = Rng(seed)
    half = (side + 1) // 2
    half_patterns = _class_sign_patterns(classes, side * half).reshape(classes, side, half)
    patterns = np.empty((classes, side, side))
    patterns[:, :, :half] = half_patterns
    patterns[:, :, side - half :] = half_patterns[:, :, ::-1]
    base = 0.5 + 0.2 * patterns
    images = np.empty((classes * per_class, 1, side, side))
    labels = np.empty(classes * per_class, dtype=np.int64)
    for c in range(classes):
        sl = slice(c * per_class, (c + 1) * per_class)
        images[sl, 0] = base[c] + 0.3 * rng.normal((per_class, side, side))
        labels[sl] = c
    return Dataset(images=np.clip(images, 0.0, 1.0), labels=labels, class_count=classes)


# ---------------------------------------------------------------------------
# splits
# ---------------------------------------------------------------------------

def make_noisy_splits(ds: Dataset, n_splits: int, noisy_split: int, rng: Rng) -> SplitDataset:
    """Shuffle, partition round-robin into near-equal splits, and replace all
    labels in the noisy split with uniform draws over all classes."""
    if n_splits < 2:
        raise ValueError("need at least 2 splits")
    if not 0 <= noisy_split < n_splits:
        raise ValueError(f"noisy split {noisy_split} out of range")
    order = rng.choice_without_replacement(len(ds), len(ds))
    assignment = np.empty(len(ds), dtype=np.int64)
    assignment[order] = np.arange(len(ds)) % n_splits
    labels = ds.labels.copy()
    noisy_members = np.flatnonzero(assignment == noisy_split)
    labels[noisy_members] = rng.integers(0, ds.class_count, size=noisy_members.size)
    noised = Dataset(images=ds.images, labels=labels, class_count=ds.class_count)
    noisy_flags = [s == noisy_split for s in range(n_splits)]
    return SplitDataset(dataset=noised, split_assignment=assignment, noisy=noisy_flags)


def sample_batch(
    sds: SplitDataset, probs: Array, n: int, rng: Rng
) -> tuple[Array, Array, Array]:
    """Per example independently: split ~ probs, then a uniform element of
    that split (with replacement across the batch)."""
    probs = np.asarray(probs, dtype=np.float64)
    if probs.shape != (sds.n_splits,):
        raise ProbabilityError(
            f"need {sds.n_splits} split probabilities, got shape {probs.shape}"
        )
    split_choices = np.asarray(rng.categorical(probs, size=n))
    indices = np.empty(n, dtype=np.int64)
    for s in range(sds.n_splits):
        mask = split_choices == s
        count = int(mask.sum())
        if count == 0:
            continue
        members = sds.members[s]
        if members.size == 0:
            raise SamplingError(f"split {s} is empty")
        indices[mask] = members[rng.integers(0, members.size, size=count)]
    ds = sds.dataset
    return ds.images[indices], ds.labels[indices], split_choices


def actions_from_splits(split_choices: Array) -> list[SplitAction]:
    return [SplitAction(int(s)) for s in split_choices]
