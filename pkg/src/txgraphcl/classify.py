"""Classifier head over a frozen encoder, prediction and precision/recall/F1."""
from __future__ import annotations

import csv
import json
import logging
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .contrastive import Encoder, parameter_checksum
from .structgae import DTYPE, as_tensor

log = logging.getLogger(__name__)


class AbsentClassWarning(UserWarning):
    """A class has no training sample; the head can still predict it."""


@dataclass
class FinetuneConfig:
    hidden: int = 64
    epochs: int = 100
    lr: float = 1e-2
    batch_size: int = 32
    seed: int = 0


class ClassifierHead(nn.Module):
    def __init__(self, in_dim: int, n_classes: int, hidden: int = 64):
        super().__init__()
        self.net = nn.Sequential(
            nn.Linear(in_dim, hidden, dtype=DTYPE), nn.ReLU(), nn.Linear(hidden, n_classes, dtype=DTYPE)
        )
        self.n_classes = n_classes

    def forward(self, h):
        return self.net(h)


@dataclass
class Classifier:
    """A frozen encoder with a trainable head.  ``classes[i]`` names output ``i``."""

    encoder: Encoder
    head: ClassifierHead
    classes: tuple[str, ...]
    warnings: list[str] = field(default_factory=list)
    losses: list[float] = field(default_factory=list)

    def scores(self, X) -> np.ndarray:
        with torch.no_grad():
            return F.softmax(self.head(self.encoder(as_tensor(X))), dim=-1).numpy()


def finetune(encoder: Encoder, X, y: Sequence[int], classes: Sequence[str],
             config: FinetuneConfig | None = None) -> Classifier:
    """Fit a head on encoder outputs by cross-entropy; the encoder stays untouched.

    ``y`` holds class indices into ``classes``.
    """
    config = config or FinetuneConfig()
    y = np.asarray(y, dtype=np.int64)
    X = as_tensor(X)
    if X.shape[0] != len(y) or len(y) == 0:
        raise ValueError("need one label per sample and at least one sample")
    if y.min() < 0 or y.max() >= len(classes):
        raise ValueError("label index out of range")
    notes = []
    for i, name in enumerate(classes):
        if not np.any(y == i):
            msg = f"class {name!r} has no training sample"
            warnings.warn(msg, AbsentClassWarning, stacklevel=2)
            notes.append(msg)
    before = parameter_checksum(encoder)
    for p in encoder.parameters():
        p.requires_grad_(False)
    with torch.no_grad():
        H = encoder(X)
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(config.seed)
        head = ClassifierHead(H.shape[1], len(classes), config.hidden)
    opt = torch.optim.Adam(head.parameters(), lr=config.lr)
    target = torch.as_tensor(y)
    rng = np.random.default_rng(config.seed)
    losses = []
    for _ in range(config.epochs):
        order = rng.permutation(len(y))
        total = 0.0
        for start in range(0, len(order), config.batch_size):
            idx = torch.as_tensor(order[start:start + config.batch_size])
            loss = F.cross_entropy(head(H[idx]), target[idx])
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
        losses.append(total / len(y))
    if parameter_checksum(encoder) != before:
        raise RuntimeError("encoder parameters changed during fine-tuning")
    return Classifier(encoder, head, tuple(classes), notes, losses)


def predict(clf: Classifier, X) -> tuple[np.ndarray, np.ndarray]:
    """Class indices and per-class scores.  Ties go to the lowest index."""
    scores = clf.scores(X)
    return np.argmax(scores, axis=1), scores  # argmax returns the first maximum


@dataclass
class MetricsReport:
    classes: tuple[str, ...]
    precision: np.ndarray
    recall: np.ndarray
    f1: np.ndarray
    support: np.ndarray
    confusion: np.ndarray  # rows true, columns predicted
    averaging: str
    avg_precision: float
    avg_recall: float
    avg_f1: float
    zero_division: list[str] = field(default_factory=list)

    def to_json(self) -> dict:
        return {
            "averaging": self.averaging,
            "precision": self.avg_precision,
            "recall": self.avg_recall,
            "f1": self.avg_f1,
            "per_class": {c: {"precision": float(self.precision[i]), "recall": float(self.recall[i]),
                              "f1": float(self.f1[i]), "support": int(self.support[i])}
                          for i, c in enumerate(self.classes)},
            "confusion": self.confusion.tolist(),
            "zero_division": list(self.zero_division),
        }


def f1_score(precision: float, recall: float) -> float:
    """Harmonic mean; 0 when both are 0."""
    if precision + recall == 0:
        return 0.0
    return 2 * precision * recall / (precision + recall)


def _ratio(num: int, den: int, what: str, flags: list[str]) -> float:
    if den == 0:
        flags.append(what)
        return 0.0
    return num / den


def confusion_matrix(y_true, y_pred, n_classes: int) -> np.ndarray:
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(cm, (np.asarray(y_true), np.asarray(y_pred)), 1)
    return cm


def metrics(y_true, y_pred, classes: Sequence[str] | None = None, averaging: str = "macro",
            positive: int = 1) -> MetricsReport:
    """Precision, recall and F1 per class plus a binary or macro average.

    ``averaging="binary"`` reports the ``positive`` class; ``"macro"`` the
    unweighted mean over classes.  Zero denominators yield 0 and are listed
    in ``zero_division``.
    """
    y_true = np.asarray(y_true, dtype=np.int64)
    y_pred = np.asarray(y_pred, dtype=np.int64)
    if y_true.shape != y_pred.shape or y_true.ndim != 1:
        raise ValueError("y_true and y_pred must be 1-D and of equal length")
    if len(y_true) == 0:
        raise ValueError("metrics of an empty prediction set are undefined")
    if averaging not in ("binary", "macro"):
        raise ValueError(f"unknown averaging {averaging!r}")
    k = max(int(y_true.max()), int(y_pred.max())) + 1
    if classes is None:
        classes = tuple(str(i) for i in range(max(k, 2)))
    classes = tuple(classes)
    if k > len(classes):
        raise ValueError("label index beyond the class list")
    n = len(classes)
    cm = confusion_matrix(y_true, y_pred, n)
    flags: list[str] = []
    P, R, F1 = np.zeros(n), np.zeros(n), np.zeros(n)
    for i in range(n):
        tp = int(cm[i, i])
        P[i] = _ratio(tp, int(cm[:, i].sum()), f"precision[{classes[i]}]", flags)
        R[i] = _ratio(tp, int(cm[i, :].sum()), f"recall[{classes[i]}]", flags)
        F1[i] = f1_score(P[i], R[i])
    support = cm.sum(axis=1)
    if averaging == "binary":
        ap, ar, af = float(P[positive]), float(R[positive]), float(F1[positive])
    else:
        ap, ar, af = float(P.mean()), float(R.mean()), float(F1.mean())
    return MetricsReport(classes, P, R, F1, support, cm, averaging, ap, ar, af, flags)


def write_predictions(path: str | Path, addresses: Sequence[str], y_true, y_pred,
                      scores: np.ndarray, classes: Sequence[str]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["address", "true_label", "pred_label", *[f"score_{c}" for c in classes]])
        for a, t, p, s in zip(addresses, y_true, y_pred, scores):
            w.writerow([a, classes[t], classes[p], *[repr(float(v)) for v in s]])


def write_metrics(path: str | Path, report: MetricsReport) -> None:
    Path(path).write_text(json.dumps(report.to_json(), indent=2, sort_keys=True) + "\n")
