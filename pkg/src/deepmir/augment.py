"""Selective augmentation: every labelled slice plus a balancing draw of empty ones.

Image channels are filled with edge values when content moves off the grid;
label planes are filled with background so no lesion is fabricated.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import ndimage

from .preprocess import Slice2D


@dataclass
class AugmentConfig:
    n_translations: int = 5
    n_rotations: int = 8
    flip_lr: bool = True
    translation_range: tuple[int, int] = (-45, 45)
    rotation_range: tuple[int, int] = (1, 60)
    min_empty: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.n_translations < 0 or self.n_rotations < 0 or self.min_empty < 0:
            raise ValueError("augmentation counts must be >= 0")
        self.translation_range = tuple(int(v) for v in self.translation_range)
        self.rotation_range = tuple(int(v) for v in self.rotation_range)

    @classmethod
    def multiclass(cls, **kw) -> "AugmentConfig":
        return cls(n_translations=10, n_rotations=16, **kw)

    @classmethod
    def none(cls, **kw) -> "AugmentConfig":
        return cls(n_translations=0, n_rotations=0, flip_lr=False, **kw)

    @property
    def per_slice(self) -> int:
        """Augmented copies produced for each selected slice."""
        return self.n_translations + 2 * self.n_rotations + int(self.flip_lr)


# transform descriptors: ("translate", tx, ty) | ("rotate", d) | ("flip",)
Transform = tuple


@dataclass
class AugmentPlan:
    transforms: list[Transform]
    label_indices: list[int]
    empty_indices: list[int] = field(default_factory=list)

    @property
    def selected(self) -> list[int]:
        return self.label_indices + self.empty_indices

    def items_per_slice(self) -> int:
        return 1 + len(self.transforms)


def _sample_transforms(config: AugmentConfig, rng: np.random.Generator) -> list[Transform]:
    lo, hi = config.translation_range
    shifts = rng.integers(lo, hi, size=(config.n_translations, 2), endpoint=True)
    lo, hi = config.rotation_range
    angles = rng.integers(lo, hi, size=config.n_rotations, endpoint=True)
    out: list[Transform] = [("translate", int(tx), int(ty)) for tx, ty in shifts]
    for d in angles:
        out += [("rotate", int(d)), ("rotate", -int(d))]
    if config.flip_lr:
        out.append(("flip",))
    return out


def plan_selection(slices: Sequence[Slice2D], config: AugmentConfig) -> AugmentPlan:
    """Pick slices to augment and the shared transform set.

    Label-free slices are drawn without replacement (re-drawing from the full
    pool once exhausted) until they match the label-bearing count, which keeps
    the two item totals within one augmentation batch of each other.
    """
    rng = np.random.default_rng(config.seed)
    transforms = _sample_transforms(config, rng)
    label_idx = [i for i, s in enumerate(slices) if s.has_label()]
    empty_pool = [i for i, s in enumerate(slices) if not s.has_label()]
    target = len(label_idx) if label_idx else config.min_empty
    empty_idx: list[int] = []
    while empty_pool and len(empty_idx) < target:
        take = min(target - len(empty_idx), len(empty_pool))
        empty_idx += [empty_pool[i] for i in rng.permutation(len(empty_pool))[:take]]
    return AugmentPlan(transforms, label_idx, empty_idx)


def translate_slice(slice_: Slice2D, tx: int, ty: int) -> Slice2D:
    """Shift content by +tx along x and +ty along y."""
    if tx == 0 and ty == 0:
        return slice_
    channels = np.stack([
        ndimage.shift(c, (tx, ty), order=0, mode="nearest") for c in slice_.channels
    ])
    labels = slice_.label_plane
    if labels is not None:
        labels = ndimage.shift(labels, (tx, ty), order=0, mode="constant", cval=0)
    return slice_.replace(channels, labels)


def rotate_slice(slice_: Slice2D, degrees: float) -> Slice2D:
    """Rotate about the slice centre: bilinear for images, nearest for labels."""
    channels = np.stack([
        ndimage.rotate(c, degrees, axes=(0, 1), reshape=False, order=1, mode="nearest")
        for c in slice_.channels
    ])
    labels = slice_.label_plane
    if labels is not None:
        labels = ndimage.rotate(labels, degrees, axes=(0, 1), reshape=False, order=0,
                                mode="constant", cval=0)
    return slice_.replace(channels, labels)


def flip_lr(slice_: Slice2D) -> Slice2D:
    channels = slice_.channels[:, ::-1, :].copy()
    labels = slice_.label_plane
    if labels is not None:
        labels = labels[::-1, :].copy()
    return slice_.replace(channels, labels)


def apply_transform(slice_: Slice2D, t: Transform) -> Slice2D:
    kind = t[0]
    if kind == "translate":
        return translate_slice(slice_, t[1], t[2])
    if kind == "rotate":
        return rotate_slice(slice_, t[1])
    if kind == "flip":
        return flip_lr(slice_)
    raise ValueError(f"unknown transform {t!r}")


def build_training_set(slices: Sequence[Slice2D], config: AugmentConfig,
                       plan: AugmentPlan | None = None) -> list[Slice2D]:
    """Originals of the selected slices, each followed by its augmented copies."""
    plan = plan or plan_selection(slices, config)
    out = []
    for i in plan.selected:
        out.append(slices[i])
        out.extend(apply_transform(slices[i], t) for t in plan.transforms)
    return out
