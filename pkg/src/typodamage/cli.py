"""Command-line entry point: prepare, train, eval, infer, synth."""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import shutil
import sys
import tempfile
from datetime import datetime, timezone
from pathlib import Path
from typing import Optional, get_type_hints

import numpy as np

from . import __version__
from .checkpoint import load_checkpoint
from .config import ENV_PREFIX, ExperimentConfig, dump_config, load_config
from .datapipe import AugmentationPolicy, index_dataset, make_split, normalize, tile_scene
from .errors import ConfigurationError, GenerationError, InvalidInputError, NonFiniteLossError
from .inference import OverlaySpec, class_area_summary, make_plan, predict_scene, render_overlay
from .metrics import per_class_metrics
from .model import ChangeNet
from .reporting import export_report, write_metrics_csv
from .schema import (
    DamageClass,
    compute_class_weights,
    read_image,
    read_image_u8,
    read_mask,
    write_image,
    write_mask,
)
from .synthgen import SceneSpec, generate_dataset
from .trainer import (
    TrainConfig,
    Trainer,
    class_weights_for,
    count_instances,
    dataset_fingerprint,
    evaluate,
    full_split,
    run_multi,
)

log = logging.getLogger("typodamage")

MANIFEST_FILE = "run_manifest.json"
EXIT_USAGE = 2
EXIT_FAILURE = 1


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


class RunManifest:
    """Written before work starts and finalised on exit."""

    def __init__(self, out_dir: Path, subcommand: str, config: dict, inputs: dict, seeds=()):
        self.path = Path(out_dir) / MANIFEST_FILE
        self.data = {
            "subcommand": subcommand,
            "version": __version__,
            "config": config,
            "inputs": {k: str(v) for k, v in inputs.items()},
            "outputs": {},
            "seeds": list(seeds),
            "started": _now(),
            "finished": None,
            "status": "running",
        }
        self.write()

    def write(self):
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self.path.write_text(json.dumps(self.data, indent=2, sort_keys=True) + "\n", encoding="utf-8")

    def finish(self, status: str, outputs: Optional[dict] = None):
        if outputs:
            self.data["outputs"].update({k: str(v) for k, v in outputs.items()})
        self.data["finished"] = _now()
        self.data["status"] = status
        self.write()


def _train_flags(parser: argparse.ArgumentParser):
    hints = get_type_hints(TrainConfig)
    group = parser.add_argument_group("training (each flag sets the TrainConfig field of the same name)")
    for f in dataclasses.fields(TrainConfig):
        flag = "--" + f.name.replace("_", "-")
        if f.name == "seeds":
            group.add_argument(flag, "--seed", dest="seeds", type=int, nargs="+", default=None)
        elif hints[f.name] is bool:
            group.add_argument(flag, dest=f.name, default=None,
                               type=lambda s: s.lower() in ("1", "true", "yes", "on"))
        else:
            typ = float if f.name in ("grad_clip",) else hints[f.name]
            if typ not in (int, float, str):
                typ = str
            group.add_argument(flag, dest=f.name, type=typ, default=None)


def _cli_overrides(args) -> dict:
    train = {f.name: getattr(args, f.name) for f in dataclasses.fields(TrainConfig)
             if getattr(args, f.name, None) is not None}
    return {"train": train} if train else {}


def _resolve(args) -> ExperimentConfig:
    return load_config(args.config, args.preset, overrides=_cli_overrides(args))


# ---------------------------------------------------------------- synth

def cmd_synth(args) -> dict:
    out = Path(args.out)
    spec = SceneSpec(side=args.side, n_buildings=args.n_buildings)
    manifest = RunManifest(out, "synth", {"scene": dataclasses.asdict(spec)},
                           {"n": args.n}, [args.seed])
    index = generate_dataset(args.n, args.seed, out, spec)
    outputs = {"dataset": out, "triplets": len(index)}
    manifest.finish("ok", outputs)
    return outputs


# ---------------------------------------------------------------- prepare

def _scene_ids(raw: Path) -> list[str]:
    if not (raw / "mask").is_dir():
        return []
    return sorted(p.stem for p in (raw / "mask").glob("*.png"))


def prepare_dataset(raw, out, side: int = 512) -> dict:
    """Tile every ``raw/{pre,post,mask}/<scene>.png`` into ``out``.

    Output is staged in a temporary directory and moved into place only when
    complete.
    """
    raw, out = Path(raw), Path(out)
    scenes = _scene_ids(raw)
    if not scenes:
        raise InvalidInputError(f"{raw}: no scenes found under mask/")
    if out.exists() and any(out.iterdir()):
        raise InvalidInputError(f"{out} exists and is not empty")
    staging = Path(tempfile.mkdtemp(prefix=".prepare-", dir=out.parent if out.parent.exists() else None))
    try:
        for sub in ("pre", "post", "mask"):
            (staging / sub).mkdir()
        ids = []
        counts = {int(c): 0 for c in DamageClass if c}
        for scene in scenes:
            pre = read_image_u8(raw / "pre" / f"{scene}.png").transpose(2, 0, 1)
            post = read_image_u8(raw / "post" / f"{scene}.png").transpose(2, 0, 1)
            mask = read_mask(raw / "mask" / f"{scene}.png")
            try:
                tiles = tile_scene(pre, post, mask, side, scene)
            except InvalidInputError as e:
                raise InvalidInputError(f"scene {scene}: {e}") from e
            for t in tiles:
                write_image(staging / "pre" / f"{t.id}.png", t.pre.transpose(1, 2, 0).astype(np.uint8))
                write_image(staging / "post" / f"{t.id}.png", t.post.transpose(1, 2, 0).astype(np.uint8))
                write_mask(staging / "mask" / f"{t.id}.png", t.mask)
                for c, n in count_instances(t.mask).items():
                    counts[c] += n
                ids.append(t.id)
        if not ids:
            raise InvalidInputError(f"no scene in {raw} is at least {side}x{side}")
        (staging / "manifest.txt").write_text("\n".join(ids) + "\n", encoding="utf-8")
        stats = {"tiles": len(ids), "side": side, "counts": {DamageClass(c).label: n for c, n in counts.items()}}
        lines = ["Damage category\tCount\tShare (%)\tWeight (sqrt(1/f))"]
        if all(n > 0 for n in counts.values()):
            table = compute_class_weights(counts)
            stats["weights"] = {DamageClass(c).label: table.weights[c] for c in counts}
            for name, n, share, w in table.rows():
                lines.append(f"{name}\t{n}\t{share:.2f}\t{w:.2f}")
        else:
            total = sum(counts.values()) or 1
            for c, n in counts.items():
                lines.append(f"{DamageClass(c).label}\t{n}\t{100 * n / total:.2f}\t-")
        (staging / "stats.json").write_text(json.dumps(stats, indent=2, sort_keys=True) + "\n")
        (staging / "stats.txt").write_text("\n".join(lines) + "\n")
        if out.exists():
            out.rmdir()
        shutil.move(str(staging), str(out))
    except BaseException:
        shutil.rmtree(staging, ignore_errors=True)
        raise
    return stats


def cmd_prepare(args) -> dict:
    stats = prepare_dataset(args.raw, args.out, args.side)
    manifest = RunManifest(Path(args.out), "prepare", {"side": args.side}, {"raw": args.raw})
    manifest.finish("ok", {"dataset": args.out, "tiles": stats["tiles"]})
    print((Path(args.out) / "stats.txt").read_text(), end="")
    return stats


# ---------------------------------------------------------------- train

def cmd_train(args) -> dict:
    cfg = _resolve(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.yaml").write_text(dump_config(cfg), encoding="utf-8")
    manifest = RunManifest(out, "train", cfg.to_dict(), {"data": args.data}, cfg.train.seeds)
    index = index_dataset(args.data)
    results, summary = run_multi(cfg.train, cfg.model, index, cfg.augment, out, cfg.upsample)
    history = {r.run_id: r.log.records for r in results}
    files = export_report(summary, [r.report for r in results], history, out / "report")
    summary_doc = {
        "n_runs": summary.n_runs,
        "mean": summary.mean.to_dict(),
        "std": summary.std.to_dict(),
        "runs": [
            {"run_id": r.run_id, "best_epoch": r.log.best_epoch, "last_epoch": r.log.last_epoch,
             "stopped_early": r.log.stopped_early, "first_train_loss": r.log.records[0].train_loss,
             "last_train_loss": r.log.records[-1].train_loss, "report": r.report.to_dict()}
            for r in results
        ],
    }
    (out / "summary.json").write_text(json.dumps(summary_doc, indent=2, sort_keys=True) + "\n")
    outputs = {"summary": out / "summary.json", **{k: v for k, v in files.items()}}
    for r in results:
        outputs[f"checkpoint_{r.run_id}"] = out / "runs" / r.run_id / "checkpoint.zip"
    manifest.finish("ok", outputs)
    log.info("macro F1 %.4f +- %.4f over %d runs", summary.mean.macro["f1"],
             summary.std.macro["f1"], summary.n_runs)
    return summary_doc


# ---------------------------------------------------------------- eval

def cmd_eval(args) -> dict:
    ckpt = load_checkpoint(args.checkpoint)
    cfg = _resolve(args)
    index = index_dataset(args.data)
    fp = ckpt.meta.get("dataset_ids")
    if fp is not None and fp != dataset_fingerprint(index):
        raise ConfigurationError("dataset manifest does not match the one the checkpoint was trained on")
    seed = ckpt.meta.get("split_seed")
    if args.seeds:
        if seed is not None and args.seeds[0] != seed:
            raise ConfigurationError(f"seed {args.seeds[0]} differs from checkpoint split seed {seed}")
        seed = args.seeds[0]
    if seed is None:
        raise ConfigurationError("checkpoint carries no split seed; pass --seed")
    holdout = ckpt.meta.get("holdout", cfg.train.holdout)
    if holdout:
        split = make_split(index, seed, cfg.train.test_fraction, cfg.train.val_fraction)
    else:
        split = full_split(index, seed)
    ids = {"test": split.test_ids, "val": split.val_ids, "train": split.train_ids}[args.split]
    if not ids:
        raise ConfigurationError(f"split {args.split!r} is empty for this dataset")
    out = Path(args.out)
    manifest = RunManifest(out, "eval", cfg.to_dict(),
                           {"data": args.data, "checkpoint": args.checkpoint, "split": args.split}, [seed])
    model = ckpt.build_model()
    policy = dataclasses.replace(cfg.augment, crop_side=model.cfg.input_side)
    trainer = Trainer(model, cfg.train, index, split, class_weights_for(index, cfg.train), policy, seed)
    loss, cm = evaluate(model, trainer.val_batches(ids), trainer.loss_fn, model.cfg.num_classes)
    report = per_class_metrics(cm, ckpt.epoch, f"{args.split}-seed{seed}")
    write_metrics_csv(out / "metrics.csv", [report])
    doc = {"split": args.split, "loss": loss, "report": report.to_dict(), "confusion": cm.cells.tolist()}
    (out / "eval.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    manifest.finish("ok", {"metrics": out / "metrics.csv", "eval": out / "eval.json"})
    return doc


# ---------------------------------------------------------------- infer

def cmd_infer(args) -> dict:
    out = Path(args.out)
    if args.checkpoint:
        model = load_checkpoint(args.checkpoint).build_model()
    else:
        cfg = _resolve(args)
        log.warning("no checkpoint given: predicting with an untrained model")
        model = ChangeNet(cfg.model).eval()
    manifest = RunManifest(out, "infer", {"model": model.cfg.to_dict(), "stride": args.stride,
                                          "alpha": args.alpha},
                           {"pre": args.pre, "post": args.post, "checkpoint": args.checkpoint or ""})
    pre, post = read_image(args.pre), read_image(args.post)
    if pre.shape != post.shape:
        raise InvalidInputError(f"pre {pre.shape[1:]} and post {post.shape[1:]} differ in size")
    window = model.cfg.input_side
    stride = args.stride or window // 2
    plan = make_plan(pre.shape[1], pre.shape[2], window, stride)
    mask = predict_scene(model, normalize(pre), normalize(post), plan)
    name = args.name or Path(args.post).stem
    files = {"mask": out / f"{name}_mask.png", "overlay": out / f"{name}_overlay.png",
             "summary": out / f"{name}_summary.txt"}
    write_mask(files["mask"], mask)
    write_image(files["overlay"], render_overlay(read_image_u8(args.post), mask, OverlaySpec(alpha=args.alpha)))
    files["summary"].write_text(class_area_summary(mask), encoding="utf-8")
    manifest.finish("ok", files)
    return {k: str(v) for k, v in files.items()}


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="typodamage",
        description="Typology-based building damage segmentation from pre/post image pairs.",
        epilog=f"Config values can be overridden with {ENV_PREFIX}<SECTION>__<FIELD> variables.",
    )
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config=True):
        sp.add_argument("--out", required=True, help="output directory")
        sp.add_argument("-q", "--quiet", action="store_true")
        if config:
            sp.add_argument("--config", help="YAML experiment config")
            sp.add_argument("--preset", default="full", choices=["full", "reduced"])

    sp = sub.add_parser("synth", help="write a synthetic dataset")
    common(sp, config=False)
    sp.add_argument("--n", type=int, default=8)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--side", type=int, default=128)
    sp.add_argument("--n-buildings", type=int, default=6)
    sp.set_defaults(func=cmd_synth)

    sp = sub.add_parser("prepare", help="tile aligned scenes into a dataset")
    common(sp, config=False)
    sp.add_argument("raw", help="directory with pre/, post/, mask/ scene rasters")
    sp.add_argument("--side", type=int, default=512)
    sp.set_defaults(func=cmd_prepare)

    sp = sub.add_parser("train", help="train one model per seed and report")
    common(sp)
    sp.add_argument("data", help="dataset directory")
    _train_flags(sp)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("eval", help="score a checkpoint on a split")
    common(sp)
    sp.add_argument("data")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--split", choices=["test", "val", "train"], default="test")
    _train_flags(sp)
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("infer", help="predict a damage mask for an image pair")
    common(sp)
    sp.add_argument("pre")
    sp.add_argument("post")
    sp.add_argument("--checkpoint")
    sp.add_argument("--stride", type=int)
    sp.add_argument("--alpha", type=float, default=0.5)
    sp.add_argument("--name")
    sp.set_defaults(func=cmd_infer)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except (ConfigurationError, InvalidInputError, GenerationError) as e:
        _mark_failed(args, str(e))
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (NonFiniteLossError, OSError) as e:
        _mark_failed(args, str(e))
        print(f"error: {e}", file=sys.stderr)
        return EXIT_FAILURE
    return 0


def _mark_failed(args, message: str):
    path = Path(args.out) / MANIFEST_FILE
    if path.exists():
        data = json.loads(path.read_text())
        if data.get("status") == "running":
            data.update(status="failed", error=message, finished=_now())
            path.write_text(json.dumps(data, indent=2, sort_keys=True) + "\n")


if __name__ == "__main__":
    sys.exit(main())
