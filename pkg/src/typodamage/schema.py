"""Damage taxonomy, triplet data model and class-weight derivation."""
from __future__ import annotations

import math
from dataclasses import dataclass
from enum import IntEnum
from pathlib import Path
from typing import Mapping, Optional

import numpy as np
from PIL import Image

from .errors import ConfigurationError, InvalidInputError

TILE_SIDE = 512
NUM_CLASSES = 5


class DamageClass(IntEnum):
    BACKGROUND = 0
    PARTIAL_ROOF_DAMAGE = 1
    TOTAL_ROOF_DAMAGE = 2
    PARTIAL_STRUCTURAL_COLLAPSE = 3
    TOTAL_STRUCTURAL_COLLAPSE = 4

    @property
    def label(self) -> str:
        return self.name.lower()

    @classmethod
    def from_label(cls, label: str) -> "DamageClass":
        try:
            return cls[label.upper()]
        except KeyError:
            raise InvalidInputError(f"unknown damage class {label!r}") from None


DAMAGE_CLASSES = tuple(c for c in DamageClass if c != DamageClass.BACKGROUND)

# Building counts of the Hurricane Ida typology dataset, used when no
# dataset-derived counts are available.
REFERENCE_COUNTS = {1: 7030, 2: 958, 3: 83, 4: 38}


@dataclass
class ImageTriplet:
    """One co-registered tile: pre image, post image, integer damage mask.

    ``pre`` and ``post`` are float arrays of shape (3, H, W); ``mask`` is an
    integer array of shape (H, W) holding :class:`DamageClass` ids.
    """

    id: str
    pre: np.ndarray
    post: np.ndarray
    mask: np.ndarray
    pixel_size_m: Optional[float] = None

    def __post_init__(self):
        if self.pre.ndim != 3 or self.pre.shape[0] != 3:
            raise InvalidInputError(f"{self.id}: pre must be 3xHxW, got {self.pre.shape}")
        if self.post.shape != self.pre.shape:
            raise InvalidInputError(
                f"{self.id}: post shape {self.post.shape} != pre shape {self.pre.shape}"
            )
        if self.mask.shape != self.pre.shape[1:]:
            raise InvalidInputError(
                f"{self.id}: mask shape {self.mask.shape} != image grid {self.pre.shape[1:]}"
            )
        violations = validate_mask(self.mask)
        if violations:
            r, c, v = violations[0]
            raise InvalidInputError(
                f"{self.id}: {len(violations)} invalid mask values, first {v} at ({r}, {c})"
            )

    @property
    def side(self) -> tuple[int, int]:
        return self.mask.shape


@dataclass
class ClassWeightTable:
    counts: dict[int, int]
    shares: dict[int, float]
    weights: dict[int, float]
    background_weight: float = 1.0

    def as_vector(self, num_classes: int = NUM_CLASSES) -> np.ndarray:
        """Weights indexed by class id, background first."""
        if sorted(self.weights) != list(range(1, num_classes)):
            raise ConfigurationError(
                f"weight table covers classes {sorted(self.weights)}, "
                f"model emits {num_classes} channels"
            )
        return np.array(
            [self.background_weight] + [self.weights[c] for c in range(1, num_classes)]
        )

    def rows(self):
        for c in sorted(self.counts):
            yield DamageClass(c).label, self.counts[c], 100.0 * self.shares[c], self.weights[c]


def compute_class_weights(
    counts: Mapping[int, int], background_weight: float = 1.0
) -> ClassWeightTable:
    """Weight each class by the square root of its inverse frequency."""
    if len(counts) < 2:
        raise InvalidInputError("class weights need at least two classes")
    for cls, n in counts.items():
        if n <= 0:
            name = DamageClass(cls).label if cls in DamageClass._value2member_map_ else cls
            raise InvalidInputError(f"class {name} has non-positive count {n}")
    total = sum(counts.values())
    shares = {int(c): n / total for c, n in counts.items()}
    weights = {c: math.sqrt(1.0 / f) for c, f in shares.items()}
    return ClassWeightTable(
        counts={int(c): int(n) for c, n in counts.items()},
        shares=shares,
        weights=weights,
        background_weight=background_weight,
    )


def validate_mask(mask, num_classes: int = NUM_CLASSES) -> list[tuple[int, int, int]]:
    """Return ``(row, col, value)`` for every cell outside ``[0, num_classes)``."""
    mask = np.asarray(mask)
    bad = np.argwhere((mask < 0) | (mask >= num_classes))
    return [(int(r), int(c), int(mask[r, c])) for r, c in bad]


def read_mask(path) -> np.ndarray:
    with Image.open(path) as im:
        if im.mode not in ("L", "P", "I", "I;16"):
            raise InvalidInputError(f"{path}: mask must be single-channel, got mode {im.mode}")
        mask = np.array(im, dtype=np.int64)
    return mask


def write_mask(path, mask: np.ndarray) -> None:
    mask = np.asarray(mask)
    violations = validate_mask(mask)
    if violations:
        raise InvalidInputError(f"{path}: mask has {len(violations)} out-of-range values")
    Image.fromarray(mask.astype(np.uint8)).save(path, optimize=False)


def read_image(path) -> np.ndarray:
    """Decode an 8-bit RGB file to a float32 (3, H, W) array in [0, 1]."""
    with Image.open(path) as im:
        arr = np.array(im.convert("RGB"), dtype=np.uint8)
    return arr.transpose(2, 0, 1).astype(np.float32) / 255.0


def read_image_u8(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.array(im.convert("RGB"), dtype=np.uint8)


def write_image(path, image: np.ndarray) -> None:
    """Write an (H, W, 3) uint8 array, or a (3, H, W) float array in [0, 1]."""
    image = np.asarray(image)
    if image.dtype != np.uint8:
        image = np.clip(np.floor(image.transpose(1, 2, 0) * 255.0 + 0.5), 0, 255).astype(np.uint8)
    Image.fromarray(image).save(path, optimize=False)


def load_triplet(root, triplet_id: str) -> ImageTriplet:
    root = Path(root)
    return ImageTriplet(
        id=triplet_id,
        pre=read_image(root / "pre" / f"{triplet_id}.png"),
        post=read_image(root / "post" / f"{triplet_id}.png"),
        mask=read_mask(root / "mask" / f"{triplet_id}.png"),
    )
