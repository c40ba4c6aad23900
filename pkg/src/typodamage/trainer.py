"""Adam training loop with linear LR decay, early stopping and multi-seed runs."""
from __future__ import annotations

import hashlib
import json
import logging
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Iterable, Optional

import numpy as np
import torch
from scipy import ndimage
from torch.utils.data import DataLoader

from .checkpoint import Checkpoint, save_checkpoint
from .datapipe import (
    AugmentationPolicy,
    DatasetIndex,
    SplitPlan,
    TripletDataset,
    UpsampleRule,
    epoch_order,
    index_dataset,
    make_split,
    upsample_minority,
)
from .errors import ConfigurationError, InvalidInputError, NonFiniteLossError
from .losses import CompositeLoss
from .metrics import ConfusionMatrix, MetricReport, RunSummary, accumulate, aggregate_runs, per_class_metrics
from .model import ChangeNet, ModelConfig
from .schema import DAMAGE_CLASSES, REFERENCE_COUNTS, ClassWeightTable, compute_class_weights, read_mask

log = logging.getLogger(__name__)

WEIGHT_SOURCES = ("instances", "pixels", "reference", "uniform")


@dataclass
class TrainConfig:
    lr0: float = 0.001
    max_epochs: int = 300
    batch_size: int = 8
    patience: int = 20
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    seeds: list[int] = field(default_factory=lambda: [0, 1, 2, 3])
    device: str = "cpu"
    lr_floor: float = 0.0
    # improvements smaller than this do not reset the patience counter
    min_delta: float = 1e-6
    grad_clip: Optional[float] = None
    # False trains and validates on every triplet (overfit fixtures)
    holdout: bool = True
    test_fraction: float = 0.10
    val_fraction: float = 0.10
    upsample: bool = True
    weights_source: str = "instances"
    background_weight: float = 1.0
    dice_smoothing: float = 1.0
    num_workers: int = 0
    cache: bool = True

    def validate(self) -> "TrainConfig":
        if not self.lr0 > 0:
            raise ConfigurationError(f"lr0 must be > 0, got {self.lr0}")
        if self.patience < 1:
            raise ConfigurationError(f"patience must be >= 1, got {self.patience}")
        if self.batch_size < 1:
            raise ConfigurationError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.max_epochs < 1:
            raise ConfigurationError(f"max_epochs must be >= 1, got {self.max_epochs}")
        if not self.seeds:
            raise ConfigurationError("seeds must list at least one seed")
        if not 0 <= self.lr_floor < self.lr0:
            raise ConfigurationError(f"lr_floor must lie in [0, lr0), got {self.lr_floor}")
        if self.weights_source not in WEIGHT_SOURCES:
            raise ConfigurationError(f"weights_source must be one of {WEIGHT_SOURCES}")
        if self.grad_clip is not None and self.grad_clip <= 0:
            raise ConfigurationError("grad_clip must be positive when set")
        return self


def lr_at(epoch: int, cfg: TrainConfig) -> float:
    """Linear decay from ``lr0`` at epoch 0 towards ``lr_floor`` at ``max_epochs``."""
    if not 0 <= epoch < cfg.max_epochs:
        raise InvalidInputError(f"epoch {epoch} outside [0, {cfg.max_epochs})")
    return cfg.lr_floor + (cfg.lr0 - cfg.lr_floor) * (1.0 - epoch / cfg.max_epochs)


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    train_loss: float
    val_loss: float
    report: MetricReport
    wall_seconds: float = 0.0

    def to_json(self) -> str:
        d = {
            "epoch": self.epoch,
            "lr": self.lr,
            "train_loss": self.train_loss,
            "val_loss": self.val_loss,
            "val_metrics": self.report.to_dict(),
            "wall_seconds": round(self.wall_seconds, 3),
        }
        return json.dumps(d, sort_keys=True)

    @classmethod
    def from_json(cls, line: str) -> "EpochRecord":
        d = json.loads(line)
        return cls(d["epoch"], d["lr"], d["train_loss"], d["val_loss"],
                   MetricReport.from_dict(d["val_metrics"]), d["wall_seconds"])


@dataclass
class TrainLog:
    records: list[EpochRecord] = field(default_factory=list)
    best_epoch: int = -1
    stopped_early: bool = False
    run_id: str = ""

    @property
    def val_losses(self) -> list[float]:
        return [r.val_loss for r in self.records]

    @property
    def last_epoch(self) -> int:
        return self.records[-1].epoch if self.records else -1

    def write_jsonl(self, path) -> None:
        Path(path).write_text("".join(r.to_json() + "\n" for r in self.records), encoding="utf-8")

    @classmethod
    def read_jsonl(cls, path) -> "TrainLog":
        records = [EpochRecord.from_json(ln) for ln in Path(path).read_text().splitlines() if ln]
        best = int(np.argmin([r.val_loss for r in records])) if records else -1
        return cls(records, records[best].epoch if records else -1)


class EarlyStopping:
    """Patience counter over validation losses.

    ``update`` returns True when the loss improved on the best so far by more
    than ``min_delta``; ``should_stop`` turns True once ``patience``
    consecutive epochs have passed without such an improvement.
    """

    def __init__(self, patience: int, min_delta: float = 1e-6):
        self.patience = patience
        self.min_delta = min_delta
        self.best = float("inf")
        self.best_epoch = -1
        self.bad_epochs = 0

    def update(self, epoch: int, val_loss: float) -> bool:
        if val_loss < self.best - self.min_delta:
            self.best, self.best_epoch, self.bad_epochs = val_loss, epoch, 0
            return True
        self.bad_epochs += 1
        return False

    @property
    def should_stop(self) -> bool:
        return self.bad_epochs >= self.patience


def count_instances(mask: np.ndarray) -> dict[int, int]:
    """Connected components (8-neighbourhood) of each damage class."""
    out = {}
    for c in DAMAGE_CLASSES:
        _, n = ndimage.label(mask == c, structure=np.ones((3, 3)))
        out[int(c)] = int(n)
    return out


def dataset_class_counts(index: DatasetIndex, ids=None, unit: str = "instances") -> dict[int, int]:
    counts = {int(c): 0 for c in DAMAGE_CLASSES}
    for tid in ids if ids is not None else index.ids:
        mask = read_mask(index.root / "mask" / f"{tid}.png")
        if unit == "instances":
            part = count_instances(mask)
        else:
            part = {int(c): int((mask == c).sum()) for c in DAMAGE_CLASSES}
        for c, n in part.items():
            counts[c] += n
    return counts


def class_weights_for(index: Optional[DatasetIndex], cfg: TrainConfig) -> ClassWeightTable:
    if cfg.weights_source == "reference":
        counts = dict(REFERENCE_COUNTS)
    elif cfg.weights_source == "uniform":
        counts = {int(c): 1 for c in DAMAGE_CLASSES}
    else:
        counts = dataset_class_counts(index, unit=cfg.weights_source)
    return compute_class_weights(counts, background_weight=cfg.background_weight)


def make_optimizer(model, cfg: TrainConfig) -> torch.optim.Adam:
    return torch.optim.Adam(
        model.parameters(), lr=cfg.lr0, betas=(cfg.adam_beta1, cfg.adam_beta2), eps=cfg.adam_eps
    )


def train_epoch(model, batches: Iterable, loss_fn, optimizer, lr: float, epoch: int = 0,
                grad_clip: Optional[float] = None, device="cpu") -> float:
    """One pass over ``batches`` with Adam at learning rate ``lr``.

    Returns the mean composite loss over batches, each evaluated before its
    own update.
    """
    for group in optimizer.param_groups:
        group["lr"] = lr
    model.train()
    losses = []
    for i, batch in enumerate(batches):
        pre, post, mask = (batch[k].to(device) for k in ("pre", "post", "mask"))
        breakdown = loss_fn(model(pre, post), mask)
        if not torch.isfinite(breakdown.total):
            raise NonFiniteLossError(epoch, i, breakdown.as_dict())
        optimizer.zero_grad(set_to_none=True)
        breakdown.total.backward()
        if grad_clip is not None:
            torch.nn.utils.clip_grad_norm_(model.parameters(), grad_clip)
        optimizer.step()
        losses.append(float(breakdown.total.detach()))
    if not losses:
        raise InvalidInputError("train_epoch received no batches")
    return float(np.mean(losses))


@torch.no_grad()
def evaluate(model, batches: Iterable, loss_fn, num_classes: int = 5, device="cpu"):
    """Mean batch loss and the confusion matrix of argmax predictions."""
    model.eval()
    cm = ConfusionMatrix(num_classes)
    losses = []
    for batch in batches:
        pre, post, mask = (batch[k].to(device) for k in ("pre", "post", "mask"))
        logits = model(pre, post)
        losses.append(float(loss_fn(logits, mask).total))
        cm = accumulate(cm, logits.argmax(dim=1).cpu().numpy(), mask.cpu().numpy())
    if not losses:
        raise ConfigurationError("validation set is empty")
    return float(np.mean(losses)), cm


class Trainer:
    """Owns one model for one run; ``fit`` is the only writer of its weights."""

    def __init__(self, model: ChangeNet, cfg: TrainConfig, index: DatasetIndex, split: SplitPlan,
                 weights: ClassWeightTable, policy: Optional[AugmentationPolicy] = None,
                 run_seed: int = 0, run_id: str = "", rule: UpsampleRule = UpsampleRule()):
        self.model = model.to(cfg.device)
        self.cfg = cfg.validate()
        self.index = index
        self.split = split
        self.run_seed = run_seed
        self.run_id = run_id or f"seed{run_seed}"
        self.policy = (policy or AugmentationPolicy(crop_side=model.cfg.input_side)).validate()
        self.loss_fn = CompositeLoss(weights, cfg.dice_smoothing)
        self.optimizer = make_optimizer(model, cfg)
        train_ids = split.train_ids
        self.train_list = (
            upsample_minority(train_ids, index.present_classes, rule) if cfg.upsample else list(train_ids)
        )
        self._val_items = None

    def _loader(self, dataset):
        return DataLoader(dataset, batch_size=self.cfg.batch_size, shuffle=False,
                          num_workers=self.cfg.num_workers)

    def train_batches(self, epoch: int):
        items = epoch_order(self.train_list, self.run_seed, epoch)
        return self._loader(TripletDataset(self.index.root, items, "train", self.policy,
                                           cache=self.cfg.cache))

    def val_batches(self, ids=None):
        if ids is None:
            if self._val_items is None:
                self._val_items = TripletDataset.validation_items(
                    self.index.root, self.split.val_ids, self.policy.crop_side)
            items = self._val_items
        else:
            items = TripletDataset.validation_items(self.index.root, ids, self.policy.crop_side)
        return self._loader(TripletDataset(self.index.root, items, "val", self.policy,
                                           cache=self.cfg.cache))

    def train_epoch(self, epoch: int) -> float:
        return train_epoch(self.model, self.train_batches(epoch), self.loss_fn, self.optimizer,
                           lr_at(epoch, self.cfg), epoch, self.cfg.grad_clip, self.cfg.device)

    def validate(self, epoch: int) -> tuple[float, ConfusionMatrix]:
        return evaluate(self.model, self.val_batches(), self.loss_fn,
                        self.model.cfg.num_classes, self.cfg.device)

    def fit(self, on_epoch: Optional[Callable[[EpochRecord], None]] = None):
        """Train until ``max_epochs`` or early stop; return (best checkpoint, log)."""
        if not self.split.val_ids:
            raise ConfigurationError("validation split is empty")
        stopper = EarlyStopping(self.cfg.patience, self.cfg.min_delta)
        tlog = TrainLog(run_id=self.run_id)
        best = None
        for epoch in range(self.cfg.max_epochs):
            t0 = time.perf_counter()
            train_loss = self.train_epoch(epoch)
            val_loss, cm = self.validate(epoch)
            report = per_class_metrics(cm, epoch, self.run_id)
            rec = EpochRecord(epoch, lr_at(epoch, self.cfg), train_loss, val_loss, report,
                              time.perf_counter() - t0)
            tlog.records.append(rec)
            if stopper.update(epoch, val_loss):
                best = Checkpoint.capture(self.model, epoch, val_loss, run_id=self.run_id,
                                          split_seed=self.split.seed)
            if on_epoch is not None:
                on_epoch(rec)
            log.info("%s epoch %d lr %.2e train %.4f val %.4f macro-f1 %.3f", self.run_id, epoch,
                     rec.lr, train_loss, val_loss, report.macro["f1"])
            if stopper.should_stop:
                tlog.stopped_early = True
                break
        tlog.best_epoch = stopper.best_epoch
        return best, tlog


def full_split(index: DatasetIndex, seed: int) -> SplitPlan:
    """Every id in both train and val; used when ``holdout`` is off."""
    return SplitPlan(int(seed), [], list(index.ids), list(index.ids))


def plan_for(index: DatasetIndex, seed: int, cfg: TrainConfig) -> SplitPlan:
    if cfg.holdout:
        return make_split(index, seed, cfg.test_fraction, cfg.val_fraction)
    return full_split(index, seed)


@dataclass
class RunResult:
    run_id: str
    seed: int
    split: SplitPlan
    log: TrainLog
    checkpoint: Checkpoint
    report: MetricReport


def run_multi(cfg: TrainConfig, model_cfg: ModelConfig, dataset, policy: Optional[AugmentationPolicy] = None,
              out_dir=None, rule: UpsampleRule = UpsampleRule()):
    """Train one model per seed and aggregate the best-checkpoint validation scores.

    Returns ``(results, summary)``; when ``out_dir`` is given, each run's
    checkpoint, split and JSONL log are written under ``out_dir/runs/<run_id>``.
    """
    cfg.validate()
    index = dataset if isinstance(dataset, DatasetIndex) else index_dataset(dataset)
    weights = class_weights_for(index, cfg)
    results = []
    for seed in cfg.seeds:
        run_id = f"seed{seed}"
        split = plan_for(index, seed, cfg)
        model = ChangeNet(replace(model_cfg, seed=seed))
        trainer = Trainer(model, cfg, index, split, weights, policy, seed, run_id, rule)
        run_dir = Path(out_dir) / "runs" / run_id if out_dir is not None else None
        sink = None
        if run_dir is not None:
            run_dir.mkdir(parents=True, exist_ok=True)
            (run_dir / "split.json").write_text(json.dumps(asdict(split), indent=2) + "\n")
            log_path = run_dir / "train_log.jsonl"
            log_path.write_text("")

            def sink(rec, path=log_path):
                with open(path, "a", encoding="utf-8") as fh:
                    fh.write(rec.to_json() + "\n")

        best, tlog = trainer.fit(on_epoch=sink)
        best.meta.update(dataset_ids=dataset_fingerprint(index), holdout=cfg.holdout)
        trainer.model.load_state_dict(best.state)
        val_loss, cm = trainer.validate(best.epoch)
        report = per_class_metrics(cm, best.epoch, run_id)
        if run_dir is not None:
            save_checkpoint(run_dir / "checkpoint.zip", best)
        results.append(RunResult(run_id, seed, split, tlog, best, report))
    summary = aggregate_runs([r.report for r in results])
    return results, summary


def dataset_fingerprint(index: DatasetIndex) -> str:
    return hashlib.sha256("\n".join(index.ids).encode()).hexdigest()[:16]
