"""Triplet discovery, tiling, normalisation, splitting, upsampling, augmentation."""
from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Optional, Sequence

import numpy as np
import torch
from scipy.ndimage import gaussian_filter
from torch.utils.data import Dataset

from .errors import ConfigurationError, InvalidInputError
from .schema import DAMAGE_CLASSES, ImageTriplet, load_triplet, read_mask

MANIFEST_NAME = "manifest.txt"
SUBDIRS = ("pre", "post", "mask")


@dataclass(frozen=True)
class TripletRecord:
    id: str
    pre: Path
    post: Path
    mask: Path


@dataclass
class DatasetIndex:
    root: Path
    triplets: list[TripletRecord]
    present_classes: dict[str, frozenset[int]]

    @property
    def ids(self) -> list[str]:
        return [t.id for t in self.triplets]

    def __len__(self):
        return len(self.triplets)

    def class_pixel_counts(self, ids: Optional[Sequence[str]] = None) -> dict[int, int]:
        counts = {int(c): 0 for c in DAMAGE_CLASSES}
        for tid in ids if ids is not None else self.ids:
            mask = read_mask(self.root / "mask" / f"{tid}.png")
            for c, n in zip(*np.unique(mask, return_counts=True)):
                if c in counts:
                    counts[int(c)] += int(n)
        return counts


def index_dataset(root) -> DatasetIndex:
    """Scan ``root/{pre,post,mask}/<id>.png``; a manifest pins the order."""
    root = Path(root)
    manifest = root / MANIFEST_NAME
    if manifest.exists():
        ids = [ln.strip() for ln in manifest.read_text(encoding="utf-8").splitlines() if ln.strip()]
    else:
        ids = sorted(p.stem for p in (root / "mask").glob("*.png"))
    if len(set(ids)) != len(ids):
        raise InvalidInputError(f"{root}: duplicate triplet ids")
    records, present = [], {}
    for tid in ids:
        paths = [root / sub / f"{tid}.png" for sub in SUBDIRS]
        missing = [str(p) for p in paths if not p.exists()]
        if missing:
            raise InvalidInputError(f"triplet {tid}: missing {', '.join(missing)}")
        records.append(TripletRecord(tid, *paths))
        present[tid] = frozenset(int(v) for v in np.unique(read_mask(paths[2])) if v != 0)
    return DatasetIndex(root, records, present)


def tile_scene(pre_scene, post_scene, mask_scene, side: int = 512, scene_id: str = "scene"):
    """Cut aligned rasters into non-overlapping ``side`` tiles, row-major.

    Images are (3, H, W) and the mask (H, W). Edge remainders narrower than
    ``side`` are dropped.
    """
    pre_scene, post_scene, mask_scene = map(np.asarray, (pre_scene, post_scene, mask_scene))
    if pre_scene.shape != post_scene.shape or pre_scene.shape[1:] != mask_scene.shape:
        raise InvalidInputError(
            f"scene rasters disagree: pre {pre_scene.shape}, post {post_scene.shape}, "
            f"mask {mask_scene.shape}"
        )
    h, w = mask_scene.shape
    tiles = []
    for r in range(h // side):
        for c in range(w // side):
            ys, xs = slice(r * side, (r + 1) * side), slice(c * side, (c + 1) * side)
            tiles.append(
                ImageTriplet(
                    id=f"{scene_id}_r{r:03d}_c{c:03d}",
                    pre=pre_scene[:, ys, xs].copy(),
                    post=post_scene[:, ys, xs].copy(),
                    mask=mask_scene[ys, xs].copy(),
                )
            )
    return tiles


def normalize(image, mean=(0.5, 0.5, 0.5), std=(0.5, 0.5, 0.5)):
    mean = np.asarray(mean, dtype=np.float32).reshape(-1, 1, 1)
    std = np.asarray(std, dtype=np.float32).reshape(-1, 1, 1)
    if (std == 0).any():
        raise InvalidInputError("normalisation std must be non-zero")
    return ((np.asarray(image, dtype=np.float32) - mean) / std).astype(np.float32)


@dataclass
class SplitPlan:
    seed: int
    test_ids: list[str]
    train_ids: list[str]
    val_ids: list[str]

    @property
    def sizes(self) -> tuple[int, int, int]:
        return len(self.test_ids), len(self.val_ids), len(self.train_ids)


def split_sizes(n: int, test_fraction=0.10, val_fraction=0.10) -> tuple[int, int, int]:
    test = math.floor(test_fraction * n)
    rest = n - test
    val = math.floor(val_fraction * rest + 0.5)
    return test, val, rest - val


def make_split(index, seed: int, test_fraction=0.10, val_fraction=0.10) -> SplitPlan:
    """Hold out a test set first, then split the remainder train:val."""
    ids = list(index.ids if isinstance(index, DatasetIndex) else index)
    if len(ids) < 10:
        raise InvalidInputError(f"need at least 10 triplets to split, got {len(ids)}")
    n_test, n_val, _ = split_sizes(len(ids), test_fraction, val_fraction)
    order = np.random.default_rng(seed).permutation(len(ids))
    shuffled = [ids[i] for i in order]
    test = shuffled[:n_test]
    val = shuffled[n_test : n_test + n_val]
    train = shuffled[n_test + n_val :]
    return SplitPlan(int(seed), test, train, val)


@dataclass(frozen=True)
class UpsampleRule:
    # samples containing any of these get one extra copy
    minority: frozenset = frozenset({2, 3, 4})
    # samples containing any of these get one further copy
    extra: frozenset = frozenset({2, 3})


def multiplicity(classes, rule: UpsampleRule = UpsampleRule()) -> int:
    classes = set(classes)
    return 1 + bool(classes & rule.minority) + bool(classes & rule.extra)


def upsample_minority(train_ids, present_classes: Mapping[str, frozenset], rule=UpsampleRule()):
    out = []
    for tid in train_ids:
        out.extend([tid] * multiplicity(present_classes[tid], rule))
    return out


@dataclass
class AugmentationPolicy:
    hflip_prob: float = 0.5
    vflip_prob: float = 0.5
    rotations: tuple[int, ...] = (0, 90, 180, 270)
    blur_prob: float = 0.3
    blur_radius_range: tuple[float, float] = (0.5, 2.0)
    crop_side: int = 512
    seed: int = 0

    def validate(self) -> "AugmentationPolicy":
        for name in ("hflip_prob", "vflip_prob", "blur_prob"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ConfigurationError(f"{name} must lie in [0, 1], got {p}")
        lo, hi = self.blur_radius_range
        if not 0 < lo <= hi:
            raise ConfigurationError(f"blur_radius_range must be positive and ordered: {lo}, {hi}")
        if not self.rotations or any(r % 90 for r in self.rotations):
            raise ConfigurationError(f"rotations must be multiples of 90: {self.rotations}")
        if self.crop_side < 1:
            raise ConfigurationError("crop_side must be positive")
        return self

    @classmethod
    def identity(cls, crop_side=512) -> "AugmentationPolicy":
        return cls(hflip_prob=0.0, vflip_prob=0.0, rotations=(0,), blur_prob=0.0, crop_side=crop_side)


@dataclass(frozen=True)
class AugmentDraw:
    """One realised augmentation; geometric fields act on every grid."""

    offset: tuple[int, int] = (0, 0)
    hflip: bool = False
    vflip: bool = False
    rot_k: int = 0
    blur_radius: Optional[float] = None


def crop(arr, offset, side):
    r, c = offset
    return arr[..., r : r + side, c : c + side]


def apply_geometry(arr, draw: AugmentDraw, side: int):
    """Crop, flip and rotate the last two axes of ``arr``.

    ``rot_k`` quarter turns are counter-clockwise, so for one turn
    ``out[r, c] == in[c, W - 1 - r]``.
    """
    out = crop(arr, draw.offset, side)
    if draw.hflip:
        out = out[..., :, ::-1]
    if draw.vflip:
        out = out[..., ::-1, :]
    if draw.rot_k:
        out = np.rot90(out, k=draw.rot_k, axes=(-2, -1))
    return np.ascontiguousarray(out)


def _check_crop(triplet: ImageTriplet, side: int):
    h, w = triplet.mask.shape
    if side > h or side > w:
        raise InvalidInputError(f"crop_side {side} exceeds tile {h}x{w}")


def draw_augmentation(policy: AugmentationPolicy, rng: np.random.Generator, tile_hw) -> AugmentDraw:
    h, w = tile_hw
    side = policy.crop_side
    offset = (int(rng.integers(0, h - side + 1)), int(rng.integers(0, w - side + 1)))
    hflip = bool(rng.random() < policy.hflip_prob)
    vflip = bool(rng.random() < policy.vflip_prob)
    rot_k = (int(policy.rotations[rng.integers(len(policy.rotations))]) // 90) % 4
    blur = None
    if rng.random() < policy.blur_prob:
        blur = float(rng.uniform(*policy.blur_radius_range))
    return AugmentDraw(offset, hflip, vflip, rot_k, blur)


def apply_augmentation(triplet: ImageTriplet, draw: AugmentDraw, crop_side: int) -> ImageTriplet:
    _check_crop(triplet, crop_side)
    pre = apply_geometry(triplet.pre, draw, crop_side)
    post = apply_geometry(triplet.post, draw, crop_side)
    mask = apply_geometry(triplet.mask, draw, crop_side)
    if draw.blur_radius is not None:
        sigma = (0, draw.blur_radius, draw.blur_radius)
        pre = gaussian_filter(pre, sigma=sigma, mode="reflect")
        post = gaussian_filter(post, sigma=sigma, mode="reflect")
    return ImageTriplet(triplet.id, pre, post, mask, triplet.pixel_size_m)


def augment(triplet: ImageTriplet, policy: AugmentationPolicy, rng: np.random.Generator) -> ImageTriplet:
    """Random crop, flips, quarter-turn rotation and blur (images only)."""
    policy.validate()
    _check_crop(triplet, policy.crop_side)
    draw = draw_augmentation(policy, rng, triplet.mask.shape)
    return apply_augmentation(triplet, draw, policy.crop_side)


def val_positions(tile_hw, side: int) -> list[tuple[int, int]]:
    h, w = tile_hw
    if side > h or side > w:
        raise InvalidInputError(f"crop_side {side} exceeds tile {h}x{w}")
    if (h, w) == (side, side):
        return [(0, 0)]
    corners = [(0, 0), (0, w - side), (h - side, 0), (h - side, w - side)]
    center = ((h - side) // 2, (w - side) // 2)
    return list(dict.fromkeys(corners + [center]))


def sample_patches(triplet, mode: str, policy: AugmentationPolicy, rng=None) -> list[ImageTriplet]:
    """Training draws one random crop; validation uses the fixed position grid."""
    side = policy.crop_side
    if mode == "train":
        rng = rng if rng is not None else np.random.default_rng(policy.seed)
        _check_crop(triplet, side)
        h, w = triplet.mask.shape
        offsets = [(int(rng.integers(0, h - side + 1)), int(rng.integers(0, w - side + 1)))]
    elif mode == "val":
        offsets = val_positions(triplet.mask.shape, side)
    else:
        raise InvalidInputError(f"mode must be 'train' or 'val', got {mode!r}")
    return [apply_augmentation(triplet, AugmentDraw(offset=o), side) for o in offsets]


def item_seed(run_seed: int, epoch: int, position: int) -> int:
    return int(np.random.SeedSequence([run_seed, epoch, position]).generate_state(1)[0])


def epoch_order(train_list: Sequence[str], run_seed: int, epoch: int) -> list[tuple[str, int]]:
    """Shuffle the (upsampled) list and attach a per-item augmentation seed.

    Everything random about an epoch is fixed here, before any worker runs.
    """
    rng = np.random.default_rng(np.random.SeedSequence([run_seed, epoch]))
    order = rng.permutation(len(train_list))
    return [(train_list[i], item_seed(run_seed, epoch, k)) for k, i in enumerate(order)]


class TripletDataset(Dataset):
    """Yields normalised tensors for a fixed list of work items.

    Train items are ``(id, seed)`` pairs; validation items are
    ``(id, offset)`` pairs produced by :meth:`validation_items`.
    """

    def __init__(self, root, items, mode: str, policy: AugmentationPolicy,
                 mean=(0.5, 0.5, 0.5), std=(0.5, 0.5, 0.5), cache: bool = True):
        self.root = Path(root)
        self.items = list(items)
        self.mode = mode
        self.policy = policy.validate()
        self.mean, self.std = mean, std
        self.cache = {} if cache else None

    @classmethod
    def validation_items(cls, root, ids, crop_side):
        items = []
        for tid in ids:
            mask = read_mask(Path(root) / "mask" / f"{tid}.png")
            items.extend((tid, off) for off in val_positions(mask.shape, crop_side))
        return items

    def __len__(self):
        return len(self.items)

    def load(self, tid) -> ImageTriplet:
        if self.cache is None:
            return load_triplet(self.root, tid)
        if tid not in self.cache:
            self.cache[tid] = load_triplet(self.root, tid)
        return self.cache[tid]

    def __getitem__(self, i):
        tid, token = self.items[i]
        triplet = self.load(tid)
        if self.mode == "train":
            out = augment(triplet, self.policy, np.random.default_rng(token))
        else:
            out = apply_augmentation(triplet, AugmentDraw(offset=tuple(token)), self.policy.crop_side)
        return {
            "pre": torch.from_numpy(normalize(out.pre, self.mean, self.std)),
            "post": torch.from_numpy(normalize(out.post, self.mean, self.std)),
            "mask": torch.from_numpy(out.mask.astype(np.int64)),
        }
