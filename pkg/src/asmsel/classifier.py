"""
Segment-level scene classifier with per-utterance majority voting.

The reference model is multinomial logistic regression on masked-mean-pooled
segments.  Anything exposing ``score_segments(segments, lengths) -> (n, C)``
posteriors can stand in for it.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Protocol, Sequence

import numpy as np
from scipy.special import log_softmax, softmax

from .errors import ContractError
from .selection import SegmentBatch

logger = logging.getLogger(__name__)


class SegmentScorer(Protocol):
    n_classes: int

    def score_segments(self, segments: np.ndarray, lengths: np.ndarray) -> np.ndarray: ...


def pool_segment(segment: np.ndarray, pad_mask: np.ndarray) -> np.ndarray:
    """Mean over the real (unpadded) frames of one segment."""
    mask = np.asarray(pad_mask, dtype=bool)
    if not mask.any():
        raise ContractError("segment has no real frames")
    return np.asarray(segment, dtype=np.float64)[mask].mean(axis=0)


def pool_segments(segments: np.ndarray, lengths: np.ndarray) -> np.ndarray:
    lengths = np.asarray(lengths)
    if np.any(lengths < 1):
        raise ContractError("segment has no real frames")
    mask = np.arange(segments.shape[1])[None, :] < lengths[:, None]
    return (segments * mask[..., None]).sum(axis=1) / lengths[:, None]


@dataclass
class SoftmaxClassifier:
    weights: np.ndarray  # (C, F)
    bias: np.ndarray     # (C,)
    mean: np.ndarray     # (F,) feature standardization
    scale: np.ndarray    # (F,)
    classes: list[str] = field(default_factory=list)
    loss_history: list[float] = field(default_factory=list, compare=False)

    kind = "softmax-linear"

    @property
    def n_classes(self) -> int:
        return self.weights.shape[0]

    def posteriors(self, pooled: np.ndarray) -> np.ndarray:
        z = (pooled - self.mean) / self.scale
        return softmax(z @ self.weights.T + self.bias, axis=1)

    def score_segments(self, segments, lengths) -> np.ndarray:
        return self.posteriors(pool_segments(np.asarray(segments, dtype=np.float64), lengths))


def loss_and_grad(W: np.ndarray, b: np.ndarray, X: np.ndarray, y: np.ndarray, l2: float = 0.0):
    """Mean cross-entropy plus ``l2/2 * |W|^2`` and its gradients."""
    logits = X @ W.T + b
    logp = log_softmax(logits, axis=1)
    n = len(y)
    loss = -logp[np.arange(n), y].mean() + 0.5 * l2 * np.sum(W * W)
    delta = np.exp(logp)
    delta[np.arange(n), y] -= 1.0
    delta /= n
    return loss, delta.T @ X + l2 * W, delta.sum(axis=0)


def _pooled_training_set(batches: Sequence[SegmentBatch]):
    X, y = [], []
    for batch in batches:
        if batch.label is None:
            raise ContractError(f"{batch.utterance_id}: training batch without a label")
        if len(batch):
            X.append(pool_segments(batch.segments, batch.lengths))
            y.append(np.full(len(batch), batch.label, dtype=np.int64))
    if not X:
        raise ContractError("no training segments")
    return np.vstack(X), np.concatenate(y)


def train_classifier(batches: Sequence[SegmentBatch], n_classes: int, epochs: int = 30,
                     lr: float = 0.5, seed: int = 0, batch_size: int = 256, l2: float = 1e-4,
                     classes: Sequence[str] | None = None) -> SoftmaxClassifier:
    """Mini-batch gradient descent on segment-level cross-entropy.

    Every segment inherits its utterance's label.  Features are standardized
    with the training mean and standard deviation, which are stored in the
    model.
    """
    X, y = _pooled_training_set(batches)
    counts = np.bincount(y, minlength=n_classes)
    if len(counts) > n_classes:
        raise ContractError(f"label {len(counts) - 1} outside {n_classes} classes")
    if np.any(counts == 0):
        raise ContractError(f"class {int(np.flatnonzero(counts == 0)[0])} has no training segments")

    mean = X.mean(axis=0)
    scale = X.std(axis=0)
    scale[scale < 1e-8] = 1.0
    Z = (X - mean) / scale
    rng = np.random.default_rng(seed)
    W = np.zeros((n_classes, X.shape[1]))
    b = np.zeros(n_classes)
    history = []
    for epoch in range(epochs):
        order = rng.permutation(len(y))
        total = 0.0
        for i in range(0, len(y), batch_size):
            idx = order[i:i + batch_size]
            loss, gW, gb = loss_and_grad(W, b, Z[idx], y[idx], l2)
            W -= lr * gW
            b -= lr * gb
            total += loss * len(idx)
        history.append(total / len(y))
    logger.info("classifier: %d segments, %d epochs, final loss %.4f", len(y), epochs, history[-1])
    names = list(classes) if classes is not None else [str(c) for c in range(n_classes)]
    return SoftmaxClassifier(W, b, mean, scale, names, history)


def majority_vote(posteriors: np.ndarray) -> tuple[int, np.ndarray]:
    """Modal per-segment argmax class.

    Ties between equally voted classes go to the larger summed posterior,
    then to the lower class id.
    """
    post = np.asarray(posteriors, dtype=np.float64)
    if post.ndim != 2 or post.shape[0] == 0:
        raise ContractError("cannot vote over an empty batch")
    seg_labels = post.argmax(axis=1)
    votes = np.bincount(seg_labels, minlength=post.shape[1])
    tied = np.flatnonzero(votes == votes.max())
    if len(tied) == 1:
        return int(tied[0]), seg_labels
    # exactly rounded sums, so equal posterior multisets tie regardless of order
    mass = np.array([math.fsum(col) for col in post[:, tied].T])
    return int(tied[np.argmax(mass)]), seg_labels


def classify_utterance(batch: SegmentBatch, model: SegmentScorer) -> tuple[int, np.ndarray]:
    if len(batch) == 0:
        raise ContractError(f"{batch.utterance_id}: no segments to classify")
    return majority_vote(model.score_segments(batch.segments, batch.lengths))


@dataclass
class EvalReport:
    accuracy: float
    per_class: np.ndarray
    confusion: np.ndarray  # rows: true class, cols: predicted
    predictions: list[int]
    classes: list[str]

    def to_text(self, title: str = "") -> str:
        lines = [title] if title else []
        n = int(self.confusion.sum())
        lines.append(f"overall accuracy: {self.accuracy:.4f} ({int(np.trace(self.confusion))}/{n})")
        lines.append("")
        width = max(8, max(len(c) for c in self.classes))
        lines.append(f"{'class':<{width}}  {'n':>5}  accuracy")
        for c, name in enumerate(self.classes):
            cnt = int(self.confusion[c].sum())
            acc = "n/a" if cnt == 0 else f"{self.per_class[c]:.4f}"
            lines.append(f"{name:<{width}}  {cnt:>5}  {acc}")
        lines.append("")
        lines.append("confusion (rows true, cols predicted):")
        for c, name in enumerate(self.classes):
            lines.append(f"{name:<{width}}  " + " ".join(f"{v:>5d}" for v in self.confusion[c]))
        return "\n".join(lines) + "\n"

    def to_csv(self) -> str:
        rows = ["class,n,correct,accuracy"]
        for c, name in enumerate(self.classes):
            cnt = int(self.confusion[c].sum())
            acc = "" if cnt == 0 else f"{self.per_class[c]:.6f}"
            rows.append(f"{name},{cnt},{int(self.confusion[c, c])},{acc}")
        rows.append(f"ALL,{int(self.confusion.sum())},{int(np.trace(self.confusion))},{self.accuracy:.6f}")
        return "\n".join(rows) + "\n"


def confusion_report(true: Sequence[int], pred: Sequence[int], classes: Sequence[str]) -> EvalReport:
    C = len(classes)
    conf = np.zeros((C, C), dtype=np.int64)
    np.add.at(conf, (np.asarray(true, dtype=np.int64), np.asarray(pred, dtype=np.int64)), 1)
    support = conf.sum(axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        per_class = np.where(support > 0, np.diag(conf) / np.maximum(support, 1), np.nan)
    return EvalReport(float(np.trace(conf) / conf.sum()), per_class, conf, list(pred), list(classes))


def evaluate(batches: Sequence[SegmentBatch], model: SegmentScorer,
             labels: Sequence[int] | None = None, classes: Sequence[str] | None = None) -> EvalReport:
    """Utterance-level accuracy, per-class accuracy and confusion matrix."""
    if labels is None:
        labels = [b.label for b in batches]
    if len(labels) != len(batches) or any(l is None for l in labels):
        raise ContractError("every evaluated utterance needs exactly one label")
    if not batches:
        raise ContractError("nothing to evaluate")
    names = list(classes) if classes is not None else getattr(model, "classes", None)
    if not names:
        names = [str(c) for c in range(model.n_classes)]
    if max(labels) >= len(names):
        raise ContractError(f"label {max(labels)} outside {len(names)} classes")
    pred = [classify_utterance(b, model)[0] for b in batches]
    return confusion_report(labels, pred, names)
