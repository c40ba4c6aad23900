"""Deterministic synthetic pre/post/mask scenes for desk-scale fixtures.

Buildings are axis-aligned rectangles with flat roof tones on a noisy
ground. Damaged buildings get a class-specific caricature in the post image:

1. dark patches covering at most half the roof
2. the whole roof replaced by an exposed-interior tone
3. one corner replaced by debris texture
4. the whole footprint replaced by debris texture

Only the pixels actually altered are labelled.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .datapipe import MANIFEST_NAME, DatasetIndex, index_dataset
from .errors import ConfigurationError, GenerationError
from .schema import ImageTriplet, write_image, write_mask

PROVENANCE_NAME = "provenance.json"


@dataclass
class SceneSpec:
    seed: int = 0
    side: int = 128
    n_buildings: int = 6
    class_mix: dict[int, float] = field(default_factory=lambda: {1: 0.25, 2: 0.25, 3: 0.25, 4: 0.25})
    # std of the ground texture, 8-bit units
    noise: float = 6.0
    # std of independent per-date sensor noise, 8-bit units
    temporal_noise: float = 0.0
    undamaged_fraction: float = 0.2
    min_building: int = 12
    max_building: int = 28
    margin: int = 3
    max_retries: int = 200

    def __post_init__(self):
        self.class_mix = {int(k): float(v) for k, v in self.class_mix.items()}

    def validate(self) -> "SceneSpec":
        if set(self.class_mix) - {1, 2, 3, 4} or not self.class_mix:
            raise ConfigurationError(f"class_mix keys must be damage classes 1-4: {self.class_mix}")
        if any(p < 0 for p in self.class_mix.values()) or abs(sum(self.class_mix.values()) - 1) > 1e-9:
            raise ConfigurationError("class_mix probabilities must be non-negative and sum to 1")
        if self.n_buildings < 0:
            raise ConfigurationError("n_buildings must be >= 0")
        if not 0 < self.min_building <= self.max_building < self.side:
            raise ConfigurationError("need 0 < min_building <= max_building < side")
        if self.noise <= 0 or self.temporal_noise < 0 or not 0 <= self.undamaged_fraction <= 1:
            raise ConfigurationError("noise > 0, temporal_noise >= 0, undamaged_fraction in [0, 1]")
        return self


@dataclass(frozen=True)
class Building:
    row: int
    col: int
    height: int
    width: int
    damage: int  # 0 = intact


def _place(spec: SceneSpec, rng) -> list[tuple[int, int, int, int]]:
    occupied = np.zeros((spec.side, spec.side), dtype=bool)
    boxes = []
    for k in range(spec.n_buildings):
        for _ in range(spec.max_retries):
            h, w = rng.integers(spec.min_building, spec.max_building + 1, size=2)
            r = int(rng.integers(0, spec.side - h + 1))
            c = int(rng.integers(0, spec.side - w + 1))
            m = spec.margin
            if not occupied[max(r - m, 0) : r + h + m, max(c - m, 0) : c + w + m].any():
                occupied[r : r + h, c : c + w] = True
                boxes.append((r, c, int(h), int(w)))
                break
        else:
            raise GenerationError(
                f"could not place building {k + 1} of {spec.n_buildings} without overlap in "
                f"{spec.max_retries} tries; use fewer or smaller buildings"
            )
    return boxes


def _debris(rng, shape):
    base = rng.uniform(70, 190, size=shape[:2] + (1,))
    tint = rng.uniform(-25, 25, size=shape[:2] + (3,))
    return base + tint


def generate_with_log(spec: SceneSpec) -> tuple[ImageTriplet, list[Building]]:
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    n = spec.side
    yy, xx = np.mgrid[0:n, 0:n] / n
    phase = rng.uniform(0, 2 * np.pi, size=2)
    shade = 12 * np.sin(2 * np.pi * (1.5 * yy) + phase[0]) * np.cos(2 * np.pi * xx + phase[1])
    ground = np.array([96.0, 112.0, 78.0]) + shade[..., None]
    pre = ground + rng.normal(0, spec.noise, size=(n, n, 3))

    boxes = _place(spec, rng)
    classes = np.array(sorted(spec.class_mix))
    probs = np.array([spec.class_mix[c] for c in classes])
    buildings = []
    for r, c, h, w in boxes:
        roof = rng.uniform(120, 225, size=3)
        pre[r : r + h, c : c + w] = roof + rng.normal(0, spec.noise / 2, size=(h, w, 3))
        damage = 0
        if rng.random() >= spec.undamaged_fraction:
            damage = int(rng.choice(classes, p=probs))
        buildings.append(Building(r, c, h, w, damage))

    pre = np.clip(np.rint(pre), 0, 255)
    post = pre.copy()
    mask = np.zeros((n, n), dtype=np.uint8)
    for b in buildings:
        if b.damage:
            _damage(b, post, mask, rng)
    if spec.temporal_noise > 0:
        post += rng.normal(0, spec.temporal_noise, size=post.shape)
        post = np.clip(np.rint(post), 0, 255)
    _separate(pre, post, mask, 3 * spec.noise)

    pre_u8, post_u8 = pre.astype(np.uint8), post.astype(np.uint8)
    triplet = ImageTriplet(
        id=f"synth_{spec.seed}",
        pre=pre_u8.transpose(2, 0, 1).astype(np.float32) / 255.0,
        post=post_u8.transpose(2, 0, 1).astype(np.float32) / 255.0,
        mask=mask.astype(np.int64),
    )
    return triplet, buildings


def generate(spec: SceneSpec) -> ImageTriplet:
    return generate_with_log(spec)[0]


def _damage(b: Building, post, mask, rng):
    r, c, h, w = b.row, b.col, b.height, b.width
    region = np.zeros((h, w), dtype=bool)
    if b.damage == 1:
        budget = 0.5 * h * w
        for _ in range(int(rng.integers(1, 4))):
            ph = int(rng.integers(max(2, h // 5), max(3, h // 2)))
            pw = int(rng.integers(max(2, w // 5), max(3, w // 2)))
            pr, pc = int(rng.integers(0, h - ph + 1)), int(rng.integers(0, w - pw + 1))
            trial = region.copy()
            trial[pr : pr + ph, pc : pc + pw] = True
            if trial.sum() <= budget:
                region = trial
        if not region.any():
            region[: max(1, h // 4), : max(1, w // 4)] = True
        tone = rng.uniform(25, 50) + rng.normal(0, 4, size=(h, w, 3))
    elif b.damage == 2:
        region[:] = True
        tone = np.array([168.0, 118.0, 78.0]) + rng.uniform(-12, 12, size=3) + rng.normal(0, 3, size=(h, w, 3))
    elif b.damage == 3:
        ch = int(rng.integers(max(2, int(0.4 * h)), max(3, int(0.6 * h)) + 1))
        cw = int(rng.integers(max(2, int(0.4 * w)), max(3, int(0.6 * w)) + 1))
        top, left = bool(rng.integers(2)), bool(rng.integers(2))
        rs = slice(0, ch) if top else slice(h - ch, h)
        cs = slice(0, cw) if left else slice(w - cw, w)
        region[rs, cs] = True
        tone = _debris(rng, (h, w))
    else:
        region[:] = True
        tone = _debris(rng, (h, w))
    block = post[r : r + h, c : c + w]
    block[region] = np.clip(np.rint(tone), 0, 255)[region]
    mask[r : r + h, c : c + w][region] = b.damage


def _separate(pre, post, mask, floor):
    """Force every labelled pixel to differ from its pre value by more than ``floor``."""
    diff = np.abs(post - pre).max(axis=-1)
    weak = (mask > 0) & (diff <= floor)
    if weak.any():
        bright = pre[weak].mean(axis=-1, keepdims=True) > 127
        shift = max(60.0, 2 * floor)
        post[weak] = np.clip(np.where(bright, pre[weak] - shift, pre[weak] + shift), 0, 255)


def scene_seed(base_seed: int, i: int) -> int:
    return int(np.random.SeedSequence([base_seed, i]).generate_state(1)[0])


def generate_dataset(n: int, base_seed: int, out_dir, template: SceneSpec | None = None) -> DatasetIndex:
    """Write ``n`` scenes in the ``pre/ post/ mask/`` layout plus manifest and provenance."""
    if n < 1:
        raise ConfigurationError("n must be >= 1")
    template = (template or SceneSpec()).validate()
    out = Path(out_dir)
    for sub in ("pre", "post", "mask"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    width = max(5, len(str(n - 1)))
    ids = []
    for i in range(n):
        tid = f"{i:0{width}d}"
        triplet = generate(replace(template, seed=scene_seed(base_seed, i)))
        try:
            write_image(out / "pre" / f"{tid}.png", triplet.pre)
            write_image(out / "post" / f"{tid}.png", triplet.post)
            write_mask(out / "mask" / f"{tid}.png", triplet.mask)
        except OSError as e:
            raise OSError(f"failed writing triplet {tid} under {out}: {e}") from e
        ids.append(tid)
    (out / MANIFEST_NAME).write_text("\n".join(ids) + "\n", encoding="utf-8")
    provenance = {"base_seed": base_seed, "n": n, "spec": asdict(template)}
    (out / PROVENANCE_NAME).write_text(
        json.dumps(provenance, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    return index_dataset(out)
