"""Weighted cross-entropy training with Adam, per-epoch LR schedules and checkpoints."""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Mapping, Optional, Sequence, Union

import numpy as np

from . import tensor as T
from .checkpoint import Checkpoint, save_checkpoint
from .data import (NUM_CLASSES, AugmentationSpec, NormalizationSpec, PatchDataset, SplitPlan,
                   augment, augment_rng, batch_order, load_images, normalize_batch)
from .evaluation import EvalReport, evaluate, read_confusion_csv, write_confusion_csv
from .model import ModelSpec, Network, build, get_spec
from .tensor import Tensor

log = logging.getLogger(__name__)


class NumericError(ArithmeticError):
    """Non-finite loss or gradient; carries the epoch/batch where it happened."""


# ---------------------------------------------------------------------------
# Loss
# ---------------------------------------------------------------------------


def class_weights(class_counts: Sequence[int]) -> np.ndarray:
    """Inverse-frequency weights ``N / (C * N_c)``; frequency-weighted mean is 1."""
    counts = np.asarray(class_counts, dtype=np.float64)
    if counts.ndim != 1 or not len(counts):
        raise ValueError("class_counts must be a non-empty 1-D sequence")
    if (counts <= 0).any():
        missing = [i for i, n in enumerate(counts) if n <= 0]
        raise ValueError(f"class counts must all be positive; classes {missing} are empty")
    return counts.sum() / (len(counts) * counts)


def weighted_cross_entropy(logits: Tensor, labels, weights) -> Tensor:
    """``-(1/N) * sum_i w[y_i] * log softmax(logits_i)[y_i]`` via log-sum-exp."""
    labels = np.asarray(labels, dtype=np.int64)
    n = logits.shape[0]
    if labels.shape != (n,):
        raise ValueError(f"expected {n} labels, got shape {labels.shape}")
    k = logits.shape[1]
    if n and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"labels must lie in 0..{k - 1}")
    w = np.asarray(weights, dtype=logits.dtype)[labels]
    picked = T.pick(T.log_softmax(logits, axis=1), labels)
    return -T.tsum(picked * Tensor(w)) / n


# ---------------------------------------------------------------------------
# Optimizer
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray], state: AdamState,
              lr: float, betas: tuple = (0.9, 0.999), eps: float = 1e-8,
              weight_decay: float = 1e-4) -> None:
    """One bias-corrected Adam update, in place.

    Weight decay is decoupled: parameters shrink by ``lr * weight_decay`` before
    the moment update.  Parameters without a gradient are left untouched.
    """
    for name, g in grads.items():
        if g is not None and not np.isfinite(g).all():
            raise NumericError(f"non-finite gradient for parameter {name}")
    state.step += 1
    b1, b2 = betas
    c1 = 1 - b1 ** state.step
    c2 = 1 - b2 ** state.step
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        v = state.v[name]
        if m.shape != p.shape:
            raise ValueError(f"optimizer state for {name} has shape {m.shape}, parameter has {p.shape}")
        if weight_decay:
            p -= (lr * weight_decay) * p
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * (g * g)
        p -= lr * (m / c1) / (np.sqrt(v / c2) + eps)


# ---------------------------------------------------------------------------
# Learning-rate schedules
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SchedulerSpec:
    kind: str = "exponential"
    gamma: float = 0.9
    step_period: int = 10
    milestones: tuple = (30, 45)

    def __post_init__(self):
        if self.kind not in ("step", "multistep", "exponential"):
            raise ValueError(f"unknown scheduler kind {self.kind!r}")
        if not 0 < self.gamma <= 1:
            raise ValueError(f"gamma must lie in (0, 1], got {self.gamma}")
        if self.step_period < 1:
            raise ValueError("step_period must be >= 1")
        if any(b <= a for a, b in zip(self.milestones, self.milestones[1:])):
            raise ValueError(f"milestones must be strictly increasing: {self.milestones}")


def _decays(schedule: SchedulerSpec, epoch: int) -> int:
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    if schedule.kind == "exponential":
        return epoch
    if schedule.kind == "step":
        return epoch // schedule.step_period
    return sum(1 for m in schedule.milestones if m <= epoch)


def lr_exact(schedule: SchedulerSpec, base_lr: float, epoch: int) -> Fraction:
    """The schedule in exact rational arithmetic over the given float inputs."""
    return Fraction(base_lr) * Fraction(schedule.gamma) ** _decays(schedule, epoch)


def lr_at(schedule: SchedulerSpec, base_lr: float, epoch: int) -> float:
    """Learning rate for a 0-based epoch, correctly rounded to float."""
    return float(lr_exact(schedule, base_lr, epoch))


# ---------------------------------------------------------------------------
# Configuration and logs
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 16
    epochs: int = 60
    lr: float = 0.001
    optimizer: str = "adam"
    weight_decay: float = 0.0001
    betas: tuple = (0.9, 0.999)
    adam_eps: float = 1e-8
    scheduler: SchedulerSpec = SchedulerSpec()
    seed: int = 0
    checkpoint_epochs: tuple = (20, 25, 30, 35)
    augmentation: AugmentationSpec = AugmentationSpec()
    normalization: NormalizationSpec = NormalizationSpec()
    resize: Optional[int] = None

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if not self.lr > 0:
            raise ValueError("lr must be > 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.optimizer != "adam":
            raise ValueError(f"only the adam optimizer is supported, got {self.optimizer!r}")


def config_digest(model_name: str, config: TrainConfig) -> bytes:
    blob = json.dumps({"model": model_name, "config": asdict(config)}, sort_keys=True, default=list)
    return hashlib.sha256(blob.encode()).digest()


@dataclass
class EpochLog:
    epoch: int
    lr: float
    train_loss: float
    train_f1: float
    val_loss: float
    val_f1: float
    confusion: np.ndarray

    def row(self) -> list:
        return [self.epoch, repr(self.lr), repr(self.train_loss), repr(self.train_f1),
                repr(self.val_loss), repr(self.val_f1)]


LOG_HEADER = ["epoch", "lr", "train_loss", "train_f1", "val_loss", "val_f1"]


def write_epoch_logs(logs: Sequence[EpochLog], path: Union[str, Path], confusion_dir=None) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(LOG_HEADER)
        for entry in logs:
            w.writerow(entry.row())
    if confusion_dir is not None:
        confusion_dir = Path(confusion_dir)
        confusion_dir.mkdir(parents=True, exist_ok=True)
        for entry in logs:
            write_confusion_csv(entry.confusion, confusion_dir / f"epoch_{entry.epoch:03d}.csv")


def read_epoch_logs(path: Union[str, Path]) -> list[dict]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != LOG_HEADER:
            raise ValueError(f"{path}: unexpected header {reader.fieldnames}")
        return [{k: (int(v) if k == "epoch" else float(v)) for k, v in row.items()} for row in reader]


def _previous_logs(out: Path, upto: int) -> list[EpochLog]:
    """Epoch logs already on disk for epochs ``<= upto`` (used when resuming)."""
    path = out / "epoch_log.csv"
    if not path.is_file():
        return []
    logs = []
    for row in read_epoch_logs(path):
        if row["epoch"] > upto:
            break
        cm_path = out / "confusion" / f"epoch_{row['epoch']:03d}.csv"
        cm = read_confusion_csv(cm_path) if cm_path.is_file() else np.zeros((NUM_CLASSES, NUM_CLASSES), np.int64)
        logs.append(EpochLog(row["epoch"], row["lr"], row["train_loss"], row["train_f1"],
                             row["val_loss"], row["val_f1"], cm))
    return logs


@dataclass
class TrainResult:
    logs: list
    checkpoints: list
    fold: Optional[int] = None
    network: Optional[Network] = None

    @property
    def final(self) -> Checkpoint:
        return self.checkpoints[-1]


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------


def fold_seed(seed: int, fold: Optional[int]) -> int:
    if fold is None:
        return seed
    return int(np.random.SeedSequence([seed, fold]).generate_state(1)[0])


def _snapshot(net: Network, opt: AdamState, spec: ModelSpec, epoch: int, run_seed: int,
              fold: Optional[int], weights: np.ndarray, digest: bytes) -> Checkpoint:
    tensors = {k: v.copy() for k, v in net.state().items()}
    for name, m in opt.m.items():
        tensors[f"adam_m/{name}"] = m.copy()
        tensors[f"adam_v/{name}"] = opt.v[name].copy()
    tensors["class_weights"] = np.asarray(weights, dtype=np.float32)
    meta = {"adam_step": opt.step, "seed": run_seed, "next_epoch": epoch,
            "fold": -1 if fold is None else fold}
    return Checkpoint(spec.name, epoch, tensors, meta, digest)


def _restore(ckpt: Checkpoint, net: Network, opt: AdamState) -> None:
    ckpt.load_into(net)
    opt.step = int(ckpt.meta["adam_step"])
    for key, arr in ckpt.tensors.items():
        if key.startswith("adam_m/"):
            opt.m[key[7:]] = arr.copy()
        elif key.startswith("adam_v/"):
            opt.v[key[7:]] = arr.copy()


def _augmented_batch(images: np.ndarray, idx: np.ndarray, aug: AugmentationSpec,
                     seed: int, epoch: int) -> np.ndarray:
    return np.stack([augment(images[i], aug, augment_rng(seed, epoch, int(i))) for i in idx])


def train(spec: Union[ModelSpec, str], dataset: PatchDataset,
          split: Union[SplitPlan, tuple], config: TrainConfig = TrainConfig(),
          fold: Optional[int] = None, out_dir: Union[str, Path, None] = None,
          images: Optional[np.ndarray] = None, resume: Optional[Checkpoint] = None) -> TrainResult:
    """Train one model on the training part of ``split``; validate on the rest.

    ``images`` may carry pre-decoded ``N x 3 x H x W`` uint8 data aligned with
    ``dataset``.  Checkpoints are kept in memory and, with ``out_dir``, written
    to disk together with the epoch log.
    """
    if isinstance(spec, str):
        spec = get_spec(spec)
    if isinstance(split, SplitPlan):
        train_idx, val_idx = split.train_val(fold)
    else:
        train_idx, val_idx = (np.asarray(s, dtype=np.int64) for s in split)
    if not len(train_idx):
        raise ValueError("training subset is empty")
    if images is None:
        images = load_images(dataset, config.resize)
    labels = dataset.labels
    weights = class_weights(np.bincount(labels[train_idx], minlength=NUM_CLASSES))
    run_seed = fold_seed(config.seed, fold)
    digest = config_digest(spec.name, config)

    net = build(spec, seed=run_seed)
    opt = AdamState()
    start = 0
    if resume is not None:
        if resume.config_digest != digest:
            raise ValueError("cannot resume: checkpoint was written under a different configuration")
        if resume.meta.get("fold", -1) != (-1 if fold is None else fold):
            raise ValueError(f"cannot resume: checkpoint belongs to fold {resume.meta.get('fold')}")
        _restore(resume, net, opt)
        start = resume.epoch

    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    params = dict(net.named_parameters())
    ckpt_epochs = set(config.checkpoint_epochs) | {config.epochs}
    logs: list[EpochLog] = _previous_logs(out, start) if (out is not None and start) else []
    checkpoints: list[Checkpoint] = []
    tag = "" if fold is None else f"fold {fold}: "

    for epoch in range(start, config.epochs):
        lr = lr_at(config.scheduler, config.lr, epoch)
        loss_sum, preds, seen = 0.0, [], []
        for b, idx in enumerate(batch_order(len(train_idx), config.batch_size, run_seed, epoch)):
            rec = train_idx[idx]
            x = normalize_batch(_augmented_batch(images, rec, config.augmentation, run_seed, epoch),
                                config.normalization)
            logits = net(Tensor(x), "train")
            loss = weighted_cross_entropy(logits, labels[rec], weights)
            value = float(loss.item())
            if not math.isfinite(value):
                raise NumericError(f"non-finite loss at epoch {epoch + 1}, batch {b}")
            net.zero_grad()
            loss.backward()
            try:
                adam_step({k: p.data for k, p in params.items()}, {k: p.grad for k, p in params.items()},
                          opt, lr, config.betas, config.adam_eps, config.weight_decay)
            except NumericError as exc:
                raise NumericError(f"{exc} at epoch {epoch + 1}, batch {b}") from None
            loss_sum += value * len(rec)
            preds.append(logits.data.argmax(axis=1))
            seen.append(labels[rec])

        train_report = EvalReport.from_predictions(np.concatenate(seen), np.concatenate(preds))
        if len(val_idx):
            val = evaluate(net, images[val_idx], labels[val_idx], weights, config.batch_size)
            val_loss, val_f1, cm = val.mean_loss, val.macro_f1, val.confusion
        else:
            val_loss, val_f1, cm = float("nan"), float("nan"), np.zeros((NUM_CLASSES, NUM_CLASSES), np.int64)
        entry = EpochLog(epoch + 1, lr, loss_sum / len(train_idx), train_report.macro_f1, val_loss, val_f1, cm)
        logs.append(entry)
        log.info("%sepoch %d lr=%.3g train_loss=%.4f train_f1=%.3f val_loss=%.4f val_f1=%.3f",
                 tag, entry.epoch, lr, entry.train_loss, entry.train_f1, val_loss, val_f1)

        if epoch + 1 in ckpt_epochs:
            ckpt = _snapshot(net, opt, spec, epoch + 1, run_seed, fold, weights, digest)
            checkpoints.append(ckpt)
            if out is not None:
                save_checkpoint(out / checkpoint_name(epoch + 1), ckpt)

    if out is not None:
        write_epoch_logs(logs, out / "epoch_log.csv", out / "confusion")
    return TrainResult(logs, checkpoints, fold, net)


def checkpoint_name(epoch: int) -> str:
    return f"epoch_{epoch:03d}.gplb"


def _train_fold(args) -> TrainResult:
    spec, dataset, plan, config, fold, out_dir, images = args
    res = train(spec, dataset, plan, config, fold, out_dir, images)
    res.network = None
    return res


def train_cv(spec: Union[ModelSpec, str], dataset: PatchDataset, k: int = 5,
             config: TrainConfig = TrainConfig(), out_dir: Union[str, Path, None] = None,
             jobs: int = 1, plan: Optional[SplitPlan] = None,
             images: Optional[np.ndarray] = None) -> list[TrainResult]:
    """Stratified k-fold training; fold f validates on fold f and trains on the rest.

    Folds share no state, so ``jobs > 1`` runs them in worker processes with
    results identical to a serial run.
    """
    from .data import split_kfold

    if plan is None:
        plan = split_kfold(dataset, k, config.seed)
    if plan.k != k:
        raise ValueError(f"split plan has {plan.k} folds, expected {k}")
    if images is None:
        images = load_images(dataset, config.resize)
    out = Path(out_dir) if out_dir is not None else None
    tasks = [(spec, dataset, plan, config, f, None if out is None else out / f"fold_{f}", images)
             for f in range(k)]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_train_fold, tasks))
    else:
        results = [_train_fold(t) for t in tasks]
    return results
