"""Tensor-native image augmentations with integer strengths.

Every op maps (image (C, H, W) in [0, 1], strength k in {0, ..., 30}) to an
image of the same shape, clamped back to [0, 1]. Strength k interpolates
linearly over the op's (lo, hi) range, with k = 0 landing exactly on lo.
Cutout and the noise canary additionally consume the rng; everything else is
deterministic in (image, k).

The canary exists to give the meta-learner something falsifiable to reject:
at high strength it buries the label signal in noise.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import RegistryError
from .policies import STRENGTH_BINS, AugmentAction
from .tensor import Rng

Array = np.ndarray


@dataclass(frozen=True)
class AugmentationOp:
    name: str
    apply: Callable[[Array, int, Rng], Array]
    strength_range: tuple[float, float]


def _level(k: int, lo: float, hi: float) -> float:
    if not 0 <= k < STRENGTH_BINS:
        raise ValueError(f"strength {k} outside 0..{STRENGTH_BINS - 1}")
    return lo + (hi - lo) * k / (STRENGTH_BINS - 1)


def _clamp(image: Array) -> Array:
    return np.clip(image, 0.0, 1.0)


def _identity(image: Array, k: int, rng: Rng) -> Array:
    return image.copy()


def _flip_lr(image: Array, k: int, rng: Rng) -> Array:
    return image[:, :, ::-1].copy()


def _flip_ud(image: Array, k: int, rng: Rng) -> Array:
    return image[:, ::-1, :].copy()


def _translate_x(image: Array, k: int, rng: Rng) -> Array:
    shift = int(round(_level(k, 0.0, 8.0)))
    out = np.zeros_like(image)
    if shift == 0:
        return image.copy()
    if shift < image.shape[2]:
        out[:, :, shift:] = image[:, :, : image.shape[2] - shift]
    return out


def _translate_y(image: Array, k: int, rng: Rng) -> Array:
    shift = int(round(_level(k, 0.0, 8.0)))
    out = np.zeros_like(image)
    if shift == 0:
        return image.copy()
    if shift < image.shape[1]:
        out[:, shift:, :] = image[:, : image.shape[1] - shift, :]
    return out


def _brightness(image: Array, k: int, rng: Rng) -> Array:
    return _clamp(image * _level(k, 0.2, 1.8))


def _contrast(image: Array, k: int, rng: Rng) -> Array:
    factor = _level(k, 0.2, 1.8)
    means = image.mean(axis=(1, 2), keepdims=True)
    return _clamp(means + factor * (image - means))


def _invert(image: Array, k: int, rng: Rng) -> Array:
    return 1.0 - image


def _cutout(image: Array, k: int, rng: Rng) -> Array:
    size = int(round(_level(k, 0.0, 12.0)))
    if size == 0:
        return image.copy()
    h, w = image.shape[1], image.shape[2]
    size = min(size, h, w)
    top = int(rng.integers(0, h - size + 1))
    left = int(rng.integers(0, w - size + 1))
    out = image.copy()
    out[:, top : top + size, left : left + size] = 0.0
    return out


def _gaussian_noise_canary(image: Array, k: int, rng: Rng) -> Array:
    sigma = _level(k, 0.0, 1.0)
    if sigma == 0.0:
        return image.copy()
    return _clamp(image + sigma * rng.normal(image.shape))


REGISTRY: dict[str, AugmentationOp] = {
    op.name: op
    for op in [
        AugmentationOp("identity", _identity, (0.0, 0.0)),
        AugmentationOp("flip_lr", _flip_lr, (0.0, 0.0)),
        AugmentationOp("flip_ud", _flip_ud, (0.0, 0.0)),
        AugmentationOp("translate_x", _translate_x, (0.0, 8.0)),
        AugmentationOp("translate_y", _translate_y, (0.0, 8.0)),
        AugmentationOp("brightness", _brightness, (0.2, 1.8)),
        AugmentationOp("contrast", _contrast, (0.2, 1.8)),
        AugmentationOp("invert", _invert, (0.0, 0.0)),
        AugmentationOp("cutout", _cutout, (0.0, 12.0)),
        AugmentationOp("gaussian_noise_canary", _gaussian_noise_canary, (0.0, 1.0)),
    ]
}


def get_op(name: str) -> AugmentationOp:
    try:
        return REGISTRY[name]
    except KeyError:
        raise RegistryError(
            f"unknown augmentation op {name!r}; registered: {sorted(REGISTRY)}"
        ) from None


def resolve_ops(names: list[str]) -> list[AugmentationOp]:
    return [get_op(name) for name in names]


def apply_action(image: Array, action: AugmentAction, ops: list[AugmentationOp],
                 rng: Rng) -> Array:
    """Apply an augmentation action's kept ops in recorded order."""
    out = image
    for choice in action.choices:
        if choice.keep:
            out = ops[choice.op_index].apply(out, choice.strength, rng)
    return out
