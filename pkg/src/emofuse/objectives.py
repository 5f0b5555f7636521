"""Training objectives and the evaluation metric.

Class-weighted cross entropy, the bidirectional text-prompt contrastive loss
over batch video-text pairs, their weighted combination, and macro F1 over
the 8 expression classes.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .dataio import CLASS_NAMES, N_CLASSES
from .errors import ContractError, LabelError, ParameterError, ShapeMismatchError
from .tensor import Tensor

PROMPT_TEMPLATE = "A face expressing {}"
DEFAULT_TAU = 0.07
DEFAULT_LAMBDA = 0.1


@dataclass
class TextBank:
    """One prompt embedding per class, in manifest class order."""

    prompts: tuple[str, ...]
    embeddings: np.ndarray  # raw 8 x text_dim
    normalized: np.ndarray  # unit rows

    @classmethod
    def from_embeddings(cls, embeddings: np.ndarray,
                        class_names: tuple[str, ...] = CLASS_NAMES) -> "TextBank":
        embeddings = np.asarray(embeddings, dtype=np.float32)
        if embeddings.ndim != 2 or embeddings.shape[0] != N_CLASSES:
            raise ShapeMismatchError(
                f"text bank must be {N_CLASSES} x D, got shape {embeddings.shape}")
        norms = np.linalg.norm(embeddings, axis=1, keepdims=True)
        if (norms <= 0).any():
            raise ParameterError("text bank contains a zero embedding")
        prompts = tuple(PROMPT_TEMPLATE.format(name) for name in class_names)
        return cls(prompts, embeddings, (embeddings / norms).astype(np.float32))


@dataclass
class LossReport:
    l_cls: float
    l_con: float
    l_total: float
    lam: float
    total: Tensor  # graph node; backward through this


@dataclass
class MetricsReport:
    per_class_f1: np.ndarray
    macro_f1: float
    confusion: np.ndarray  # rows = ground truth, cols = prediction

    def to_json(self) -> str:
        return json.dumps({
            "macro_f1": self.macro_f1,
            "per_class_f1": [float(x) for x in self.per_class_f1],
            "confusion": self.confusion.astype(int).tolist(),
        }, indent=1)


def weighted_cross_entropy(logits: Tensor, labels: np.ndarray, weights: np.ndarray,
                           denom: float | None = None) -> Tensor:
    """Batch mean of w[y]*(-log softmax(logits)[y]), normalized by sum of w[y]."""
    return T.weighted_cross_entropy_op(logits, labels, weights, denom)


def _exclusion_mask(labels: np.ndarray) -> np.ndarray:
    """Off-diagonal same-label pairs are removed from both denominators."""
    labels = np.asarray(labels)
    same = labels[:, None] == labels[None, :]
    return same & ~np.eye(len(labels), dtype=bool)


def contrastive_loss(v: Tensor, labels: np.ndarray, bank: TextBank, tau: float) -> Tensor:
    """Symmetric InfoNCE between projected visuals and their label prompts.

    Rows of ``v`` must be unit-norm; similarities are cosine / tau over the
    BxB batch pair matrix with diagonal positives.
    """
    if tau <= 0:
        raise ParameterError(f"temperature must be positive, got {tau}")
    labels = np.asarray(labels)
    if v.ndim != 2 or labels.shape != (v.shape[0],):
        raise ShapeMismatchError(f"v {v.shape} vs labels {labels.shape}")
    if labels.min() < 0 or labels.max() >= N_CLASSES:
        raise LabelError(f"labels outside [0, {N_CLASSES})")
    norms = np.linalg.norm(v.data, axis=1)
    if np.abs(norms - 1.0).max() > 1e-4:
        raise ContractError(
            f"contrastive_loss expects unit rows; worst norm {norms[np.abs(norms - 1).argmax()]:.6f}")
    texts = bank.normalized[labels].astype(v.data.dtype)
    if texts.shape[1] != v.shape[1]:
        raise ShapeMismatchError(f"v dim {v.shape[1]} vs text dim {texts.shape[1]}")
    sim = T.scale(T.matmul(v, T.tensor(texts.T, dtype=v.data.dtype)), 1.0 / tau)
    return T.masked_infonce_op(sim, _exclusion_mask(labels))


def combined_loss(logits: Tensor, labels: np.ndarray, v: Tensor, bank: TextBank,
                  weights: np.ndarray, lam: float = DEFAULT_LAMBDA,
                  tau: float = DEFAULT_TAU) -> LossReport:
    """l_total = l_cls + lam * l_con, as one differentiable node."""
    l_cls = weighted_cross_entropy(logits, labels, weights)
    l_con = contrastive_loss(v, labels, bank, tau)
    total = T.add(l_cls, T.scale(l_con, lam))
    return LossReport(l_cls=float(l_cls.data), l_con=float(l_con.data),
                      l_total=float(total.data), lam=lam, total=total)


def macro_f1(predictions: np.ndarray, labels: np.ndarray) -> MetricsReport:
    """Unweighted mean of per-class F1 over all 8 classes.

    A class absent from both predictions and labels contributes F1 = 0 (the
    zero-denominator convention).
    """
    predictions = np.asarray(predictions)
    labels = np.asarray(labels)
    if predictions.shape != labels.shape or predictions.ndim != 1 or len(labels) < 1:
        raise ShapeMismatchError(
            f"predictions {predictions.shape} vs labels {labels.shape}")
    for name, ids in (("predictions", predictions), ("labels", labels)):
        if ids.min() < 0 or ids.max() >= N_CLASSES:
            raise LabelError(f"{name} contain ids outside [0, {N_CLASSES})")
    confusion = np.zeros((N_CLASSES, N_CLASSES), dtype=np.int64)
    np.add.at(confusion, (labels, predictions), 1)
    f1 = np.zeros(N_CLASSES)
    for c in range(N_CLASSES):
        tp = confusion[c, c]
        fp = confusion[:, c].sum() - tp
        fn = confusion[c, :].sum() - tp
        denom = 2 * tp + fp + fn
        f1[c] = 0.0 if denom == 0 else 2.0 * tp / denom
    return MetricsReport(per_class_f1=f1, macro_f1=float(f1.mean()), confusion=confusion)
