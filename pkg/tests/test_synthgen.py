import hashlib
import json
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from typodamage.errors import ConfigurationError, GenerationError
from typodamage.schema import validate_mask
from typodamage.synthgen import SceneSpec, generate, generate_dataset, generate_with_log, scene_seed


def test_no_buildings_is_identity():
    t = generate(SceneSpec(seed=3, n_buildings=0))
    assert np.array_equal(t.pre, t.post)
    assert not t.mask.any()


def test_same_seed_identical():
    a, b = generate(SceneSpec(seed=42)), generate(SceneSpec(seed=42))
    assert a.pre.tobytes() == b.pre.tobytes() and a.post.tobytes() == b.post.tobytes()
    assert a.mask.tobytes() == b.mask.tobytes()
    c = generate(SceneSpec(seed=43))
    assert c.pre.tobytes() != a.pre.tobytes()


@settings(max_examples=25)
@given(st.integers(0, 2**32 - 1))
def test_mask_classes_within_placement_log(seed):
    t, log = generate_with_log(SceneSpec(seed=seed))
    drawn = {b.damage for b in log if b.damage}
    present = set(np.unique(t.mask).tolist()) - {0}
    assert present <= drawn
    assert validate_mask(t.mask) == []


@settings(max_examples=25)
@given(st.integers(0, 2**32 - 1))
def test_labels_inside_footprints_and_non_overlapping(seed):
    t, log = generate_with_log(SceneSpec(seed=seed, n_buildings=8))
    cover = np.zeros_like(t.mask)
    for b in log:
        cover[b.row : b.row + b.height, b.col : b.col + b.width] += 1
        if b.damage:
            region = t.mask[b.row : b.row + b.height, b.col : b.col + b.width]
            assert set(np.unique(region).tolist()) <= {0, b.damage}
            assert (region == b.damage).any()
    assert cover.max() <= 1
    assert not t.mask[cover == 0].any()


@settings(max_examples=25)
@given(st.integers(0, 2**32 - 1))
def test_change_consistency(seed):
    spec = SceneSpec(seed=seed)
    t = generate(spec)
    diff = np.abs(t.post - t.pre).max(axis=0) * 255
    labelled = t.mask > 0
    assert (diff[labelled] > spec.noise).all()
    assert (diff[~labelled] < 3 * spec.noise).mean() >= 0.99


def test_partial_roof_damage_covers_at_most_half():
    for seed in range(40):
        t, log = generate_with_log(SceneSpec(seed=seed, class_mix={1: 1.0}, undamaged_fraction=0))
        for b in log:
            region = t.mask[b.row : b.row + b.height, b.col : b.col + b.width]
            assert (region == 1).sum() <= 0.5 * b.height * b.width


def test_full_footprint_classes():
    t, log = generate_with_log(SceneSpec(seed=1, class_mix={2: 0.5, 4: 0.5}, undamaged_fraction=0))
    for b in log:
        region = t.mask[b.row : b.row + b.height, b.col : b.col + b.width]
        assert (region == b.damage).all()


def test_class_histogram_matches_mix():
    counts = Counter()
    for i in range(200):
        _, log = generate_with_log(SceneSpec(seed=scene_seed(99, i), undamaged_fraction=0))
        counts.update(b.damage for b in log)
    total = sum(counts.values())
    for c in (1, 2, 3, 4):
        assert abs(counts[c] / total - 0.25) <= 0.05


def test_placement_failure():
    with pytest.raises(GenerationError, match="fewer or smaller"):
        generate(SceneSpec(side=40, n_buildings=30, min_building=12, max_building=14, max_retries=20))


def test_spec_validation():
    with pytest.raises(ConfigurationError):
        SceneSpec(class_mix={1: 0.5, 2: 0.4}).validate()
    with pytest.raises(ConfigurationError):
        SceneSpec(class_mix={5: 1.0}).validate()
    with pytest.raises(ConfigurationError):
        SceneSpec(max_building=200).validate()


def _tree_digest(root):
    h = hashlib.sha256()
    for p in sorted(root.rglob("*")):
        if p.is_file():
            h.update(str(p.relative_to(root)).encode())
            h.update(p.read_bytes())
    return h.hexdigest()


def test_generate_dataset_files_and_reproducibility(tmp_path):
    idx = generate_dataset(8, 5, tmp_path / "a")
    pngs = list((tmp_path / "a").rglob("*.png"))
    assert len(pngs) == 24
    assert (tmp_path / "a" / "manifest.txt").read_text().split() == [f"{i:05d}" for i in range(8)]
    prov = json.loads((tmp_path / "a" / "provenance.json").read_text())
    assert prov["base_seed"] == 5 and prov["spec"]["side"] == 128
    assert idx.ids == [f"{i:05d}" for i in range(8)]
    generate_dataset(8, 5, tmp_path / "b")
    assert _tree_digest(tmp_path / "a") == _tree_digest(tmp_path / "b")


def test_generate_dataset_needs_one(tmp_path):
    with pytest.raises(ConfigurationError):
        generate_dataset(0, 0, tmp_path)
