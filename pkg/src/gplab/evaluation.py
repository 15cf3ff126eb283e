"""Confusion matrices, F1/MCC, logit-ensemble inference and prediction export."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

from . import tensor as T
from .data import CLASS_INDEX, CLASS_NAMES, NUM_CLASSES, NormalizationSpec, normalize_batch
from .model import Network


def confusion(true_labels, predicted_labels, num_classes: int = NUM_CLASSES) -> np.ndarray:
    """``cm[t, p]`` counts samples of true class t predicted as p."""
    t = np.asarray(true_labels, dtype=np.int64).ravel()
    p = np.asarray(predicted_labels, dtype=np.int64).ravel()
    if t.shape != p.shape:
        raise ValueError(f"label arrays differ in length: {t.size} vs {p.size}")
    for name, arr in (("true", t), ("predicted", p)):
        if arr.size and (arr.min() < 0 or arr.max() >= num_classes):
            raise ValueError(f"{name} label out of range 0..{num_classes - 1}")
    return np.bincount(t * num_classes + p, minlength=num_classes ** 2).reshape(num_classes, num_classes)


def _ratio(num: np.ndarray, den: np.ndarray) -> np.ndarray:
    num = num.astype(np.float64)
    out = np.zeros_like(num)
    np.divide(num, den, out=out, where=den > 0)
    return out


def per_class_f1(cm: np.ndarray) -> np.ndarray:
    cm = np.asarray(cm)
    tp = np.diag(cm)
    precision = _ratio(tp, cm.sum(axis=0))
    recall = _ratio(tp, cm.sum(axis=1))
    return _ratio(2 * precision * recall, precision + recall)


def macro_f1(cm: np.ndarray) -> float:
    """Unweighted mean of per-class F1; any 0/0 counts as 0."""
    return float(per_class_f1(cm).mean())


def micro_f1(cm: np.ndarray) -> float:
    cm = np.asarray(cm)
    total = cm.sum()
    return float(np.trace(cm) / total) if total else 0.0


def weighted_f1(cm: np.ndarray) -> float:
    cm = np.asarray(cm)
    support = cm.sum(axis=1)
    if not support.sum():
        return 0.0
    return float((per_class_f1(cm) * support).sum() / support.sum())


def mcc(cm: np.ndarray) -> float:
    """Gorodkin's multiclass R_K; a zero denominator yields 0."""
    cm = np.asarray(cm, dtype=np.float64)
    s = cm.sum()
    c = np.trace(cm)
    t = cm.sum(axis=1)
    p = cm.sum(axis=0)
    denom = (s * s - (p * p).sum()) * (s * s - (t * t).sum())
    if denom <= 0:
        return 0.0
    return float((c * s - (p * t).sum()) / np.sqrt(denom))


@dataclass
class EvalReport:
    confusion: np.ndarray
    per_class_f1: np.ndarray
    macro_f1: float
    mcc: float
    mean_loss: float
    micro_f1: float = 0.0
    weighted_f1: float = 0.0

    @classmethod
    def from_predictions(cls, true_labels, predicted_labels, mean_loss: float = float("nan")) -> "EvalReport":
        cm = confusion(true_labels, predicted_labels)
        return cls.from_confusion(cm, mean_loss)

    @classmethod
    def from_confusion(cls, cm: np.ndarray, mean_loss: float = float("nan")) -> "EvalReport":
        return cls(cm, per_class_f1(cm), macro_f1(cm), mcc(cm), float(mean_loss), micro_f1(cm), weighted_f1(cm))

    @property
    def n_samples(self) -> int:
        return int(self.confusion.sum())

    def to_text(self) -> str:
        lines = [
            f"n_samples={self.n_samples}",
            f"macro_f1={self.macro_f1!r}",
            f"micro_f1={self.micro_f1!r}",
            f"weighted_f1={self.weighted_f1!r}",
            f"mcc={self.mcc!r}",
            f"mean_loss={self.mean_loss!r}",
        ]
        lines += [f"f1_{name}={float(v)!r}" for name, v in zip(CLASS_NAMES, self.per_class_f1)]
        return "\n".join(lines) + "\n"

    def save(self, directory: Union[str, Path], stem: str = "report") -> tuple[Path, Path]:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        txt = directory / f"{stem}.txt"
        txt.write_text(self.to_text(), newline="\n")
        cm_path = directory / f"{stem}_confusion.csv"
        write_confusion_csv(self.confusion, cm_path)
        return txt, cm_path


def read_report(path: Union[str, Path]) -> dict[str, float]:
    out = {}
    for line in Path(path).read_text().splitlines():
        if line.strip():
            key, value = line.split("=", 1)
            out[key] = float(value)
    return out


def write_confusion_csv(cm: np.ndarray, path: Union[str, Path]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["true\\pred", *CLASS_NAMES])
        for name, row in zip(CLASS_NAMES, np.asarray(cm)):
            w.writerow([name, *(int(v) for v in row)])


def read_confusion_csv(path: Union[str, Path]) -> np.ndarray:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))[1:]
    return np.array([[int(v) for v in r[1:]] for r in rows], dtype=np.int64)


# ---------------------------------------------------------------------------
# Inference
# ---------------------------------------------------------------------------


def softmax_np(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def weighted_ce_np(logits: np.ndarray, labels, weights) -> float:
    """Sum over samples of ``-w_y log softmax(logits)_y`` (no averaging)."""
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    w = np.asarray(weights, dtype=np.float64)[labels]
    return float(-(w * logp[np.arange(len(labels)), labels]).sum())


def _registry(net: Network) -> list:
    return [(net.spec.name, None)] + net.registry()


@dataclass
class EnsembleSpec:
    """Fold members sharing one architecture; combined as mean logits then softmax."""

    members: list
    class_weights: Optional[np.ndarray] = None

    def __post_init__(self):
        if not self.members:
            raise ValueError("an ensemble needs at least one member")
        ref = _registry(self.members[0])
        for i, m in enumerate(self.members[1:], 1):
            if _registry(m) != ref:
                raise ValueError(f"ensemble member {i} ({m.spec.name}) has a different parameter registry "
                                 f"than member 0 ({self.members[0].spec.name})")

    @classmethod
    def from_checkpoints(cls, paths: Sequence[Union[str, Path]]) -> "EnsembleSpec":
        from .checkpoint import load_checkpoint

        members, weights = [], None
        for p in paths:
            ckpt = load_checkpoint(p)
            members.append(ckpt.network())
            if weights is None:
                weights = ckpt.class_weights
        return cls(members, weights)


def ensemble_logits(members: Sequence[Network], images: np.ndarray, batch_size: int = 16,
                    norm: NormalizationSpec = NormalizationSpec()) -> np.ndarray:
    """Eval-mode logits averaged over members (float64), one normalized mini-batch at a time."""
    n = len(images)
    out = np.zeros((n, members[0].spec.head_classes), dtype=np.float64)
    with T.no_grad():
        for start in range(0, n, batch_size):
            x = normalize_batch(np.asarray(images[start:start + batch_size], dtype=np.float32), norm)
            xt = T.Tensor(x)
            stacked = np.stack([m(xt, "eval").data.astype(np.float64) for m in members])
            out[start:start + batch_size] = stacked.mean(axis=0)
    return out


def ensemble_predict(spec: Union[EnsembleSpec, Sequence[Network]], images: np.ndarray,
                     batch_size: int = 16) -> tuple[np.ndarray, np.ndarray]:
    """Return softmax of the mean member logits and the argmax labels (ties -> lowest index)."""
    if not isinstance(spec, EnsembleSpec):
        spec = EnsembleSpec(list(spec))
    logits = ensemble_logits(spec.members, images, batch_size)
    return softmax_np(logits), logits.argmax(axis=1)


def predict(net: Network, images: np.ndarray, batch_size: int = 16) -> tuple[np.ndarray, np.ndarray]:
    """Single-model probabilities and labels."""
    logits = ensemble_logits([net], images, batch_size)
    return softmax_np(logits), logits.argmax(axis=1)


def evaluate(model: Union[Network, EnsembleSpec, Sequence[Network]], images: np.ndarray, labels,
             weights=None, batch_size: int = 16) -> EvalReport:
    """Deterministic eval-mode report; no augmentation, per-batch normalization."""
    if len(images) == 0:
        raise ValueError("cannot evaluate an empty subset")
    if isinstance(model, Network):
        members = [model]
    elif isinstance(model, EnsembleSpec):
        members = model.members
        if weights is None:
            weights = model.class_weights
    else:
        members = list(model)
    logits = ensemble_logits(members, images, batch_size)
    labels = np.asarray(labels, dtype=np.int64)
    if weights is None:
        weights = np.ones(NUM_CLASSES)
    loss = weighted_ce_np(logits, labels, weights) / len(labels)
    return EvalReport.from_predictions(labels, logits.argmax(axis=1), loss)


def export_predictions(ids: Sequence[str], predicted_labels, path: Union[str, Path]) -> Path:
    """CSV with header ``image,prediction`` and class names, rows in input order."""
    predicted_labels = list(np.asarray(predicted_labels, dtype=np.int64).ravel())
    if len(ids) != len(predicted_labels):
        raise ValueError(f"{len(ids)} ids but {len(predicted_labels)} predictions")
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["image", "prediction"])
        for i, lab in zip(ids, predicted_labels):
            w.writerow([i, CLASS_NAMES[lab]])
    return path


def read_predictions(path: Union[str, Path]) -> tuple[list[str], np.ndarray]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header != ["image", "prediction"]:
            raise ValueError(f"{path}: unexpected header {header}")
        rows = list(reader)
    return [r[0] for r in rows], np.array([CLASS_INDEX[r[1]] for r in rows], dtype=np.int64)
