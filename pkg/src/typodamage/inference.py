"""Tile and scene prediction plus colour overlays."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Union

import numpy as np
import torch

from .checkpoint import Checkpoint
from .errors import ConfigurationError, InvalidInputError
from .model import ChangeNet
from .schema import DAMAGE_CLASSES, NUM_CLASSES, DamageClass

# Okabe-Ito colour-blind-safe hues
DEFAULT_PALETTE_HEX = {
    1: "#F0E442",  # partial roof damage, yellow
    2: "#E69F00",  # total roof damage, orange
    3: "#D55E00",  # partial structural collapse, vermillion
    4: "#CC79A7",  # total structural collapse, reddish purple
}


def hex_to_rgb(value: str) -> tuple[int, int, int]:
    value = value.lstrip("#")
    return tuple(int(value[i : i + 2], 16) for i in (0, 2, 4))


@dataclass
class OverlaySpec:
    palette: dict[int, tuple[int, int, int]] = field(
        default_factory=lambda: {c: hex_to_rgb(h) for c, h in DEFAULT_PALETTE_HEX.items()}
    )
    alpha: float = 0.5

    def validate(self) -> "OverlaySpec":
        if not 0 < self.alpha <= 1:
            raise ConfigurationError(f"alpha must lie in (0, 1], got {self.alpha}")
        if sorted(self.palette) != [int(c) for c in DAMAGE_CLASSES]:
            raise ConfigurationError("palette must cover damage classes 1-4")
        if len(set(map(tuple, self.palette.values()))) != len(self.palette):
            raise ConfigurationError("palette colours must be distinct")
        return self


Predictor = Union[ChangeNet, Checkpoint]


def _as_model(predictor: Predictor) -> ChangeNet:
    model = predictor.build_model() if isinstance(predictor, Checkpoint) else predictor
    model.eval()
    return model


def logits_to_mask(logits) -> np.ndarray:
    """Per-pixel argmax over the class axis; ties go to the lowest class id."""
    return np.argmax(np.asarray(logits), axis=0).astype(np.int64)


@torch.no_grad()
def tile_logits(model: ChangeNet, pre, post) -> np.ndarray:
    pre_t = torch.as_tensor(np.asarray(pre, dtype=np.float32))
    post_t = torch.as_tensor(np.asarray(post, dtype=np.float32))
    if pre_t.shape != post_t.shape:
        raise InvalidInputError(f"pre {tuple(pre_t.shape)} and post {tuple(post_t.shape)} differ")
    return model(pre_t, post_t).numpy()


def predict_tile(predictor: Predictor, pre, post) -> np.ndarray:
    """Class mask for one normalised (3, S, S) pair; S must match the model."""
    model = _as_model(predictor)
    side = model.cfg.input_side
    if np.shape(pre)[-2:] != (side, side):
        raise ConfigurationError(
            f"tile {np.shape(pre)[-2:]} does not match checkpoint input_side {side}"
        )
    return logits_to_mask(tile_logits(model, pre, post))


@dataclass
class TilingPlan:
    window: int = 512
    stride: int = 256
    positions: list[tuple[int, int]] = field(default_factory=list)


def _axis_starts(length: int, window: int, stride: int) -> list[int]:
    starts = list(range(0, length - window + 1, stride))
    if starts[-1] + window < length:
        starts.append(length - window)
    return starts


def make_plan(height: int, width: int, window: int = 512, stride: int = 256) -> TilingPlan:
    if not 0 < stride <= window:
        raise ConfigurationError(f"need 0 < stride <= window, got stride {stride}, window {window}")
    if height < window or width < window:
        raise InvalidInputError(
            f"scene {height}x{width} is smaller than the {window} window; pad it first"
        )
    rows = _axis_starts(height, window, stride)
    cols = _axis_starts(width, window, stride)
    return TilingPlan(window, stride, [(r, c) for r in rows for c in cols])


@torch.no_grad()
def scene_logits(predictor: Predictor, pre_scene, post_scene, plan: TilingPlan | None = None,
                 batch_size: int = 4):
    """Mean logits over every window covering each pixel, plus the cover counts."""
    model = _as_model(predictor)
    pre_scene = np.asarray(pre_scene, dtype=np.float32)
    post_scene = np.asarray(post_scene, dtype=np.float32)
    if pre_scene.shape != post_scene.shape:
        raise InvalidInputError(f"scenes differ: {pre_scene.shape} vs {post_scene.shape}")
    h, w = pre_scene.shape[-2:]
    if plan is None:
        plan = make_plan(h, w, model.cfg.input_side, model.cfg.input_side // 2)
    elif not plan.positions:
        plan = make_plan(h, w, plan.window, plan.stride)
    if h < plan.window or w < plan.window:
        raise InvalidInputError(f"scene {h}x{w} is smaller than the {plan.window} window")
    k = model.cfg.num_classes
    total = np.zeros((k, h, w), dtype=np.float64)
    count = np.zeros((h, w), dtype=np.int64)
    win = plan.window
    for i in range(0, len(plan.positions), batch_size):
        chunk = plan.positions[i : i + batch_size]
        a = torch.from_numpy(np.stack([pre_scene[:, r : r + win, c : c + win] for r, c in chunk]))
        b = torch.from_numpy(np.stack([post_scene[:, r : r + win, c : c + win] for r, c in chunk]))
        out = model(a, b).numpy()
        for (r, c), lg in zip(chunk, out):
            total[:, r : r + win, c : c + win] += lg
            count[r : r + win, c : c + win] += 1
    if (count == 0).any():
        raise InvalidInputError("tiling plan leaves pixels uncovered")
    return total / count, count


def predict_scene(predictor: Predictor, pre_scene, post_scene, plan: TilingPlan | None = None):
    logits, _ = scene_logits(predictor, pre_scene, post_scene, plan)
    return logits_to_mask(logits)


def render_overlay(post_image, mask, spec: OverlaySpec | None = None) -> np.ndarray:
    """Alpha-blend palette colours over damage pixels of an (H, W, 3) uint8 image.

    Blended values are rounded half up; background pixels are copied.
    """
    spec = (spec or OverlaySpec()).validate()
    img = np.asarray(post_image)
    mask = np.asarray(mask)
    if img.ndim != 3 or img.shape[2] != 3 or img.shape[:2] != mask.shape:
        raise InvalidInputError(f"image {img.shape} and mask {mask.shape} do not match")
    known = {0, *spec.palette}
    bad = set(np.unique(mask).tolist()) - known
    if bad:
        raise InvalidInputError(f"mask holds unknown classes {sorted(bad)}")
    out = img.astype(np.uint8).copy()
    for cls, rgb in spec.palette.items():
        sel = mask == cls
        if sel.any():
            blend = spec.alpha * np.asarray(rgb, np.float64) + (1 - spec.alpha) * img[sel].astype(np.float64)
            out[sel] = np.clip(np.floor(blend + 0.5), 0, 255).astype(np.uint8)
    return out


def class_area_summary(mask, num_classes: int = NUM_CLASSES) -> str:
    mask = np.asarray(mask)
    n = mask.size
    lines = ["class\tpixels\tpercent"]
    for c in range(num_classes):
        k = int((mask == c).sum())
        lines.append(f"{DamageClass(c).label}\t{k}\t{100.0 * k / n:.4f}")
    return "\n".join(lines) + "\n"
