import zipfile
from dataclasses import replace

import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from typodamage.checkpoint import Checkpoint, load_checkpoint, read_config, save_checkpoint
from typodamage.errors import ConfigurationError, InvalidInputError
from typodamage.inference import (
    DEFAULT_PALETTE_HEX,
    OverlaySpec,
    class_area_summary,
    hex_to_rgb,
    logits_to_mask,
    make_plan,
    predict_scene,
    predict_tile,
    render_overlay,
    scene_logits,
)
from typodamage.model import ChangeNet, ModelConfig

CFG = ModelConfig.reduced(32)


@pytest.fixture(scope="module")
def model():
    return ChangeNet(CFG).eval()


def pair(side, seed=0, b=None):
    rng = np.random.default_rng(seed)
    shape = (3, side, side) if b is None else (3, b, side)
    return rng.uniform(-1, 1, shape).astype(np.float32), rng.uniform(-1, 1, shape).astype(np.float32)


# ---------------------------------------------------------------- checkpoints

def test_checkpoint_roundtrip(tmp_path, model):
    ckpt = Checkpoint.capture(model, 7, 0.25, split_seed=3)
    path = save_checkpoint(tmp_path / "c.zip", ckpt)
    back = load_checkpoint(path, expect=replace(CFG, seed=99))
    assert back.epoch == 7 and back.val_loss == 0.25 and back.meta == {"split_seed": 3}
    assert all(torch.equal(back.state[k], v) for k, v in ckpt.state.items())
    names = zipfile.ZipFile(path).namelist()
    assert "config.json" in names and "params/encoder.stages.0.block1.conv1.weight.npy" in names
    assert read_config(path) == CFG


def test_checkpoint_bytes_stable(tmp_path, model):
    ckpt = Checkpoint.capture(model, 1, 1.0)
    a = save_checkpoint(tmp_path / "a.zip", ckpt).read_bytes()
    b = save_checkpoint(tmp_path / "b.zip", ckpt).read_bytes()
    assert a == b


def test_checkpoint_config_mismatch(tmp_path, model):
    path = save_checkpoint(tmp_path / "c.zip", Checkpoint.capture(model, 0, 1.0))
    with pytest.raises(ConfigurationError, match="input_side"):
        load_checkpoint(path, expect=ModelConfig.reduced(64))


def test_checkpoint_missing_params(tmp_path, model):
    ckpt = Checkpoint.capture(model, 0, 1.0)
    ckpt.state.pop("head.weight")
    path = save_checkpoint(tmp_path / "c.zip", ckpt)
    with pytest.raises(ConfigurationError, match="head.weight"):
        load_checkpoint(path)


# ---------------------------------------------------------------- tile

def test_argmax_examples():
    logits = np.zeros((5, 3, 3))
    logits[3] = 1.0
    assert (logits_to_mask(logits) == 3).all()
    tie = np.zeros((5, 2, 2))
    tie[0] = tie[2] = 4.0
    assert (logits_to_mask(tie) == 0).all()


@given(st.integers(0, 2**32 - 1), st.floats(-50, 50), st.floats(0.1, 10))
def test_argmax_invariances(seed, shift, scale):
    logits = np.random.default_rng(seed).normal(size=(5, 4, 4))
    base = logits_to_mask(logits)
    assert np.array_equal(logits_to_mask(logits + shift), base)
    assert np.array_equal(logits_to_mask(logits * scale), base)


def test_predict_tile(model):
    pre, post = pair(32)
    mask = predict_tile(model, pre, post)
    assert mask.shape == (32, 32) and set(np.unique(mask)) <= set(range(5))
    assert np.array_equal(mask, predict_tile(Checkpoint.capture(model, 0, 0.0), pre, post))
    with pytest.raises(ConfigurationError):
        predict_tile(model, *pair(64))


# ---------------------------------------------------------------- scene

def test_plan_examples():
    plan = make_plan(768, 768, 512, 256)
    assert plan.positions == [(0, 0), (0, 256), (256, 0), (256, 256)]
    cover = np.zeros((768, 768), int)
    for r, c in plan.positions:
        cover[r : r + 512, c : c + 512] += 1
    assert cover.min() == 1 and cover.max() == 4
    assert set(np.unique(cover)) == {1, 2, 4}
    with pytest.raises(InvalidInputError, match="pad"):
        make_plan(400, 800, 512, 256)
    with pytest.raises(ConfigurationError):
        make_plan(600, 600, 512, 600)


@given(st.integers(8, 200), st.integers(8, 200), st.integers(1, 8), st.data())
def test_plan_covers_every_pixel(h, w, window, data):
    window = min(window, h, w)
    stride = data.draw(st.integers(1, window))
    plan = make_plan(h, w, window, stride)
    cover = np.zeros((h, w), int)
    for r, c in plan.positions:
        assert 0 <= r <= h - window and 0 <= c <= w - window
        cover[r : r + window, c : c + window] += 1
    assert cover.min() >= 1


def test_scene_equal_to_tile_when_window_sized(model):
    pre, post = pair(32, 1)
    plan = make_plan(32, 32, 32, 32)
    assert np.array_equal(predict_scene(model, pre, post, plan), predict_tile(model, pre, post))


def test_scene_mean_logits_oracle(model):
    pre, post = pair(48, 2)
    plan = make_plan(48, 48, 32, 16)
    logits, counts = scene_logits(model, pre, post, plan)
    total = np.zeros((5, 48, 48))
    n = np.zeros((48, 48))
    for r, c in plan.positions:
        with torch.no_grad():
            lg = model(torch.from_numpy(pre[:, r : r + 32, c : c + 32]),
                       torch.from_numpy(post[:, r : r + 32, c : c + 32])).numpy()
        total[:, r : r + 32, c : c + 32] += lg
        n[r : r + 32, c : c + 32] += 1
    assert np.array_equal(counts, n)
    assert np.allclose(logits, total / n, atol=1e-5)


def test_scene_errors(model):
    pre, post = pair(48)
    with pytest.raises(InvalidInputError):
        predict_scene(model, pre, post[:, :40])
    small = pair(16)
    with pytest.raises(InvalidInputError):
        predict_scene(model, *small)


# ---------------------------------------------------------------- overlay

def test_palette_constants():
    spec = OverlaySpec().validate()
    assert spec.alpha == 0.5
    assert len(set(spec.palette.values())) == 4
    assert spec.palette[2] == hex_to_rgb(DEFAULT_PALETTE_HEX[2]) == (0xE6, 0x9F, 0x00)


def test_overlay_examples():
    rng = np.random.default_rng(0)
    img = rng.integers(0, 256, (6, 6, 3), dtype=np.uint8)
    assert render_overlay(img, np.zeros((6, 6), int)).tobytes() == img.tobytes()
    mask = np.full((6, 6), 3)
    opaque = render_overlay(img, mask, OverlaySpec(alpha=1.0))
    assert (opaque == np.array(OverlaySpec().palette[3], np.uint8)).all()
    red = OverlaySpec(palette={1: (255, 0, 0), 2: (0, 255, 0), 3: (0, 0, 255), 4: (9, 9, 9)}, alpha=0.5)
    out = render_overlay(np.zeros((1, 1, 3), np.uint8), np.ones((1, 1), int), red)
    assert out[0, 0].tolist() == [128, 0, 0]


def test_overlay_errors():
    img = np.zeros((2, 2, 3), np.uint8)
    with pytest.raises(InvalidInputError):
        render_overlay(img, np.full((2, 2), 7))
    with pytest.raises(InvalidInputError):
        render_overlay(img, np.zeros((3, 2), int))
    with pytest.raises(ConfigurationError):
        render_overlay(img, np.zeros((2, 2), int), OverlaySpec(alpha=0.0))


@given(st.integers(0, 2**32 - 1), st.floats(0.01, 1.0))
def test_overlay_pure_and_background_untouched(seed, alpha):
    rng = np.random.default_rng(seed)
    img = rng.integers(0, 256, (5, 7, 3), dtype=np.uint8)
    mask = rng.integers(0, 5, (5, 7))
    a = render_overlay(img, mask, OverlaySpec(alpha=alpha))
    b = render_overlay(img, mask, OverlaySpec(alpha=alpha))
    assert a.tobytes() == b.tobytes() and a.shape == img.shape
    assert np.array_equal(a[mask == 0], img[mask == 0])


def test_area_summary():
    mask = np.array([[0, 0, 1, 4]])
    lines = class_area_summary(mask).splitlines()
    assert lines[0] == "class\tpixels\tpercent"
    assert lines[1] == "background\t2\t50.0000"
    assert lines[5] == "total_structural_collapse\t1\t25.0000"
