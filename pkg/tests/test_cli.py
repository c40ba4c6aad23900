import json
import os
import subprocess
import sys

import numpy as np
import pytest

from typodamage.cli import main
from typodamage.schema import read_image_u8, read_mask, write_image, write_mask
from typodamage.synthgen import SceneSpec, generate


def manifest(out):
    return json.loads((out / "run_manifest.json").read_text())


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    """Two quick runs on a 12-scene synthetic set with the reduced model at 64 px."""
    root = tmp_path_factory.mktemp("cli")
    data, out = root / "data", root / "train"
    assert main(["synth", "--out", str(data), "--n", "12", "--seed", "2", "--side", "64",
                 "--n-buildings", "3", "-q"]) == 0
    cfg = root / "cfg.yaml"
    cfg.write_text("model:\n  input_side: 64\naugment:\n  crop_side: 64\n")
    assert main(["train", str(data), "--out", str(out), "--preset", "reduced", "--config", str(cfg),
                 "--max-epochs", "2", "--seeds", "0", "1", "--batch-size", "4", "-q"]) == 0
    return root, data, out, cfg


def test_synth_layout(trained):
    _, data, _, _ = trained
    assert len(list(data.rglob("*.png"))) == 36
    m = manifest(data)
    assert m["status"] == "ok" and m["subcommand"] == "synth" and m["finished"]


def test_train_outputs(trained):
    _, _, out, _ = trained
    summary = json.loads((out / "summary.json").read_text())
    assert summary["n_runs"] == 2
    for name in ("metrics.csv", "history.csv", "curves_macro.png", "best_per_class.png",
                 "progression_seed0.png", "progression_seed1.png"):
        assert (out / "report" / name).exists()
    for seed in (0, 1):
        assert (out / "runs" / f"seed{seed}" / "checkpoint.zip").exists()
        assert (out / "runs" / f"seed{seed}" / "train_log.jsonl").exists()
    m = manifest(out)
    assert m["status"] == "ok" and m["seeds"] == [0, 1]
    assert m["config"]["train"]["max_epochs"] == 2 and m["config"]["train"]["lr0"] == 0.001
    assert m["config"]["model"]["input_side"] == 64


def test_eval_matches_training_report_and_is_byte_stable(trained):
    root, data, out, cfg = trained
    ckpt = out / "runs" / "seed1" / "checkpoint.zip"
    args = ["eval", str(data), "--checkpoint", str(ckpt), "--split", "val", "--preset", "reduced",
            "--config", str(cfg), "-q"]
    assert main(args + ["--out", str(root / "e1")]) == 0
    assert main(args + ["--out", str(root / "e2")]) == 0
    a = (root / "e1" / "metrics.csv").read_bytes()
    assert a == (root / "e2" / "metrics.csv").read_bytes()
    train_rows = [ln.split(",", 1)[1] for ln in (out / "report" / "metrics.csv").read_text().splitlines()
                  if ln.startswith("seed1,")]
    eval_rows = [ln.split(",", 1)[1] for ln in a.decode().splitlines()[1:]]
    assert eval_rows == train_rows
    for line in a.decode().splitlines()[1:]:
        assert all(0.0 <= float(v) <= 1.0 for v in line.split(",")[3:])


def test_eval_seed_mismatch(trained, capsys):
    root, data, out, cfg = trained
    rc = main(["eval", str(data), "--checkpoint", str(out / "runs" / "seed1" / "checkpoint.zip"),
               "--seed", "0", "--out", str(root / "bad"), "--preset", "reduced", "--config", str(cfg)])
    assert rc != 0
    assert "seed" in capsys.readouterr().err


def test_eval_dataset_mismatch(trained, tmp_path):
    root, _, out, cfg = trained
    main(["synth", "--out", str(tmp_path / "other"), "--n", "11", "--side", "64", "-q"])
    rc = main(["eval", str(tmp_path / "other"), "--checkpoint", str(out / "runs" / "seed0" / "checkpoint.zip"),
               "--out", str(tmp_path / "e"), "--preset", "reduced", "--config", str(cfg), "-q"])
    assert rc != 0
    assert not (tmp_path / "e" / "metrics.csv").exists()


def test_train_invalid_lr_names_field(tmp_path, capsys):
    rc = main(["train", str(tmp_path), "--out", str(tmp_path / "o"), "--lr0", "0"])
    assert rc != 0
    assert "lr0" in capsys.readouterr().err


def test_train_flags_cover_every_field():
    from dataclasses import fields

    from typodamage.cli import build_parser
    from typodamage.trainer import TrainConfig

    text = build_parser()._subparsers._group_actions[0].choices["train"].format_help()
    for f in fields(TrainConfig):
        assert "--" + f.name.replace("_", "-") in text


def test_infer_outputs(trained, tmp_path):
    _, data, out, _ = trained
    scene = generate(SceneSpec(seed=4, side=96, n_buildings=4))
    write_image(tmp_path / "pre.png", scene.pre)
    write_image(tmp_path / "post.png", scene.post)
    rc = main(["infer", str(tmp_path / "pre.png"), str(tmp_path / "post.png"), "--checkpoint",
               str(out / "runs" / "seed0" / "checkpoint.zip"), "--out", str(tmp_path / "o"),
               "--stride", "16", "--alpha", "0.7", "--name", "scene", "-q"])
    assert rc == 0
    mask = read_mask(tmp_path / "o" / "scene_mask.png")
    overlay = read_image_u8(tmp_path / "o" / "scene_overlay.png")
    assert mask.shape == (96, 96) and overlay.shape == (96, 96, 3)
    post = read_image_u8(tmp_path / "post.png")
    assert np.array_equal(overlay[mask == 0], post[mask == 0])
    summary = (tmp_path / "o" / "scene_summary.txt").read_text().splitlines()
    assert len(summary) == 6 and sum(int(ln.split("\t")[1]) for ln in summary[1:]) == 96 * 96
    assert manifest(tmp_path / "o")["status"] == "ok"


def test_infer_too_small_scene(trained, tmp_path):
    _, _, out, _ = trained
    img = np.zeros((32, 32, 3), np.uint8)
    write_image(tmp_path / "a.png", img)
    rc = main(["infer", str(tmp_path / "a.png"), str(tmp_path / "a.png"), "--checkpoint",
               str(out / "runs" / "seed0" / "checkpoint.zip"), "--out", str(tmp_path / "o"), "-q"])
    assert rc != 0
    assert manifest(tmp_path / "o")["status"] == "failed"


def _raw_scenes(root, shapes):
    for sub in ("pre", "post", "mask"):
        (root / sub).mkdir(parents=True)
    for i, side in enumerate(shapes):
        t = generate(SceneSpec(seed=i, side=side, n_buildings=5))
        write_image(root / "pre" / f"s{i}.png", t.pre)
        write_image(root / "post" / f"s{i}.png", t.post)
        write_mask(root / "mask" / f"s{i}.png", t.mask)


def test_prepare_tiles_and_stats(tmp_path, capsys):
    _raw_scenes(tmp_path / "raw", [130, 100])
    assert main(["prepare", str(tmp_path / "raw"), "--out", str(tmp_path / "a"), "--side", "64"]) == 0
    printed = capsys.readouterr().out
    assert printed.splitlines()[0].startswith("Damage category\tCount\tShare")
    tiles = sorted(p.stem for p in (tmp_path / "a" / "mask").glob("*.png"))
    assert tiles == ["s0_r000_c000", "s0_r000_c001", "s0_r001_c000", "s0_r001_c001", "s1_r000_c000"]
    stats = json.loads((tmp_path / "a" / "stats.json").read_text())
    assert stats["tiles"] == 5 and len(stats["counts"]) == 4


def test_prepare_rerun_identical(tmp_path):
    _raw_scenes(tmp_path / "raw", [128])
    for name in ("a", "b"):
        assert main(["prepare", str(tmp_path / "raw"), "--out", str(tmp_path / name), "--side", "64", "-q"]) == 0
    files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
    assert files == sorted(p.relative_to(tmp_path / "b") for p in (tmp_path / "b").rglob("*") if p.is_file())
    for rel in files:
        if rel.name != "run_manifest.json":
            assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes()


def test_prepare_empty_and_misaligned(tmp_path):
    (tmp_path / "empty").mkdir()
    assert main(["prepare", str(tmp_path / "empty"), "--out", str(tmp_path / "o"), "-q"]) != 0
    assert not (tmp_path / "o").exists()
    _raw_scenes(tmp_path / "raw", [128])
    write_mask(tmp_path / "raw" / "mask" / "s0.png", np.zeros((100, 128), int))
    assert main(["prepare", str(tmp_path / "raw"), "--out", str(tmp_path / "o2"), "--side", "64", "-q"]) != 0
    assert not (tmp_path / "o2").exists()
    assert not list(tmp_path.glob(".prepare-*"))


def test_env_override_reaches_cli(tmp_path):
    env = dict(os.environ, TYPODAMAGE_TRAIN__PATIENCE="0")
    proc = subprocess.run([sys.executable, "-m", "typodamage", "train", str(tmp_path), "--out",
                           str(tmp_path / "o")], capture_output=True, text=True, env=env)
    assert proc.returncode != 0 and "patience" in proc.stderr


def test_version_flag(capsys):
    with pytest.raises(SystemExit) as e:
        main(["--version"])
    assert e.value.code == 0
    assert "0.1.0" in capsys.readouterr().out
