"""CSV tables and learning-curve figures for one or more training runs."""
from __future__ import annotations

import csv
import io
from pathlib import Path
from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .errors import InvalidInputError  # noqa: E402
from .metrics import METRIC_NAMES, MetricReport, RunSummary  # noqa: E402
from .schema import DamageClass  # noqa: E402

CSV_HEADER = ("run_id", "epoch", "class", "iou", "f1", "precision", "recall")
LOSS_HEADER = ("run_id", "epoch", "train_loss", "val_loss")
PNG_META = {"Software": None}


def _fmt(x: float) -> str:
    return f"{x:.6f}"


def report_rows(report: MetricReport, epoch="", run_id=None):
    run_id = report.run_id if run_id is None else run_id
    for c in sorted(report.per_class):
        vals = report.per_class[c]
        yield [run_id, epoch, DamageClass(c).label] + [_fmt(vals[m]) for m in METRIC_NAMES]
    yield [run_id, epoch, "macro"] + [_fmt(report.macro[m]) for m in METRIC_NAMES]


def _write_csv(path: Path, header, rows) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    path.write_text(buf.getvalue(), encoding="utf-8")


def write_metrics_csv(path, reports: Sequence[MetricReport], summary: RunSummary | None = None):
    rows = []
    for r in reports:
        rows.extend(report_rows(r, epoch=r.epoch))
    if summary is not None:
        rows.extend(report_rows(summary.mean, run_id="mean"))
        rows.extend(report_rows(summary.std, run_id="std"))
    _write_csv(Path(path), CSV_HEADER, rows)


def _series(records, cls, metric):
    return np.array([rec.report.value(cls, metric) for rec in records], dtype=np.float64)


def _band(history: Mapping[str, Sequence], cls, metric):
    """Mean and population std per epoch over the runs that reached it."""
    runs = [_series(recs, cls, metric) for recs in history.values()]
    n = max(len(r) for r in runs)
    mean, std = np.zeros(n), np.zeros(n)
    for e in range(n):
        vals = [r[e] for r in runs if len(r) > e]
        mean[e], std[e] = np.mean(vals), np.std(vals)
    return np.arange(n), mean, std


def _save(fig, path: Path):
    fig.savefig(path, dpi=100, metadata=PNG_META)
    plt.close(fig)


def plot_macro_curves(history, path: Path):
    fig, ax = plt.subplots(figsize=(7, 4.5))
    for m in METRIC_NAMES:
        x, mean, std = _band(history, "macro", m)
        ax.plot(x, mean, label=f"mean {m}")
        ax.fill_between(x, mean - std, mean + std, alpha=0.2)
    ax.set_xlabel("epoch")
    ax.set_ylabel("validation score")
    ax.set_ylim(0, 1)
    ax.legend(loc="lower right")
    ax.set_title(f"Macro validation metrics ({len(history)} runs, shaded = 1 std)")
    fig.tight_layout()
    _save(fig, path)


def plot_class_curves(history, metric: str, path: Path):
    classes = sorted(next(iter(history.values()))[0].report.per_class)
    fig, ax = plt.subplots(figsize=(7, 4.5))
    for c in classes:
        x, mean, std = _band(history, c, metric)
        ax.plot(x, mean, label=DamageClass(c).label)
        ax.fill_between(x, mean - std, mean + std, alpha=0.2)
    ax.set_xlabel("epoch")
    ax.set_ylabel(metric)
    ax.set_ylim(0, 1)
    ax.legend(loc="lower right", fontsize=8)
    fig.tight_layout()
    _save(fig, path)


def best_scores(records, cls, metric) -> float:
    return float(_series(records, cls, metric).max())


def plot_best_bars(history, path: Path):
    classes = sorted(next(iter(history.values()))[0].report.per_class)
    fig, axes = plt.subplots(1, len(METRIC_NAMES), figsize=(14, 4), sharey=True)
    for ax, m in zip(axes, METRIC_NAMES):
        best = np.array([[best_scores(recs, c, m) for c in classes] for recs in history.values()])
        ax.bar(
            range(len(classes)), best.mean(axis=0), yerr=best.std(axis=0), capsize=4,
            color=["#F0E442", "#E69F00", "#D55E00", "#CC79A7"][: len(classes)],
        )
        ax.set_xticks(range(len(classes)))
        ax.set_xticklabels([DamageClass(c).label.replace("_", "\n") for c in classes], fontsize=7)
        ax.set_title(f"best {m}")
        ax.set_ylim(0, 1)
    fig.tight_layout()
    _save(fig, path)


def plot_run_progression(run_id, records, path: Path):
    classes = sorted(records[0].report.per_class)
    epochs = [rec.epoch for rec in records]
    fig, axes = plt.subplots(1, len(METRIC_NAMES) + 1, figsize=(18, 3.8))
    for ax, m in zip(axes, METRIC_NAMES):
        for c in classes:
            ax.plot(epochs, _series(records, c, m), label=DamageClass(c).label)
        ax.plot(epochs, _series(records, "macro", m), "k--", label="macro")
        ax.set_title(m)
        ax.set_ylim(0, 1)
    axes[0].legend(fontsize=7)
    ax = axes[-1]
    ax.plot(epochs, [rec.train_loss for rec in records], label="train")
    ax.plot(epochs, [rec.val_loss for rec in records], label="validation")
    ax.set_title("loss")
    ax.legend(fontsize=7)
    fig.suptitle(f"run {run_id}")
    fig.tight_layout()
    _save(fig, path)


def export_report(summary: RunSummary, reports, history, out_dir) -> dict[str, Path]:
    """Write the metric table, per-epoch table and figure set into ``out_dir``.

    ``history`` maps run id to that run's per-epoch records; each record has
    ``epoch``, ``train_loss``, ``val_loss`` and ``report`` attributes.
    """
    if not history or any(len(r) == 0 for r in history.values()):
        raise InvalidInputError("history must hold at least one epoch per run")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    files = {
        "metrics": out / "metrics.csv",
        "history": out / "history.csv",
        "losses": out / "losses.csv",
        "macro_curves": out / "curves_macro.png",
        "f1_curves": out / "curves_class_f1.png",
        "iou_curves": out / "curves_class_iou.png",
        "best_bars": out / "best_per_class.png",
    }
    write_metrics_csv(files["metrics"], reports, summary)
    hist_rows, loss_rows = [], []
    for run_id, records in history.items():
        for rec in records:
            hist_rows.extend(report_rows(rec.report, epoch=rec.epoch, run_id=run_id))
            loss_rows.append([run_id, rec.epoch, _fmt(rec.train_loss), _fmt(rec.val_loss)])
    _write_csv(files["history"], CSV_HEADER, hist_rows)
    _write_csv(files["losses"], LOSS_HEADER, loss_rows)

    plot_macro_curves(history, files["macro_curves"])
    plot_class_curves(history, "f1", files["f1_curves"])
    plot_class_curves(history, "iou", files["iou_curves"])
    plot_best_bars(history, files["best_bars"])
    for run_id, records in history.items():
        key = f"progression_{run_id}"
        files[key] = out / f"{key}.png"
        plot_run_progression(run_id, records, files[key])
    return files
