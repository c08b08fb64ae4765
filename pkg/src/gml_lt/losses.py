"""Softmax variants and the CE / balanced-softmax CE / geometric mean losses.

Every loss returns ``(loss, dloss_dlogits)``; gradients are analytic.  The
count re-weighting ``N_j exp(o_j) / sum_c N_c exp(o_c)`` is applied as a
``log N_j`` shift of the logits before a max-stabilized softmax.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

PBAR_FLOOR = 1e-12

LOSS_KINDS = ("ce", "bsce", "gml", "gml_unweighted")


def softmax(logits) -> np.ndarray:
    o = np.asarray(logits, dtype=np.float64)
    z = o - o.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(logits) -> np.ndarray:
    o = np.asarray(logits, dtype=np.float64)
    z = o - o.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def _log_counts(counts, num_classes: int) -> np.ndarray:
    n = np.asarray(counts, dtype=np.float64)
    if n.shape != (num_classes,):
        raise ValueError(f"expected {num_classes} class counts, got shape {n.shape}")
    if np.any(n <= 0):
        raise ValueError("re-weighting needs every class count >= 1")
    return np.log(n)


def reweighted_softmax(logits, counts) -> np.ndarray:
    """Rows of ``N_j exp(o_j) / sum_c N_c exp(o_c)``."""
    o = np.asarray(logits, dtype=np.float64)
    return softmax(o + _log_counts(counts, o.shape[-1]))


def _check_labels(labels, batch: int, num_classes: int) -> np.ndarray:
    y = np.asarray(labels)
    if y.shape != (batch,):
        raise ValueError(f"expected {batch} labels, got shape {y.shape}")
    if batch == 0:
        raise ValueError("empty batch")
    if not np.issubdtype(y.dtype, np.integer) or y.min() < 0 or y.max() >= num_classes:
        raise ValueError(f"labels must be integers in [0, {num_classes})")
    return y.astype(np.int64)


@dataclass(frozen=True)
class ClassBatchAverages:
    """Mean true-class probability per class present in the batch."""

    p_bar: dict[int, float]

    @property
    def present_classes(self) -> tuple[int, ...]:
        return tuple(self.p_bar)


def gml_loss_and_grad(logits, labels, counts=None, reweight: bool = True):
    """Geometric mean loss ``-(1/K) sum_c log pbar_c`` over the K present classes.

    ``pbar_c`` is the in-batch mean of the true-class probability for class c.
    With ``reweight`` the probabilities come from :func:`reweighted_softmax`
    using the training-set ``counts``; otherwise from a plain softmax.

    Returns ``(loss, dloss_dlogits, ClassBatchAverages)``.
    """
    o = np.asarray(logits, dtype=np.float64)
    if o.ndim != 2:
        raise ValueError(f"logits must be 2-D, got shape {o.shape}")
    b, c = o.shape
    y = _check_labels(labels, b, c)
    p = reweighted_softmax(o, counts) if reweight else softmax(o)
    rows = np.arange(b)
    p_true = p[rows, y]

    n_in_batch = np.bincount(y, minlength=c)
    present = np.flatnonzero(n_in_batch)
    k = present.size
    pbar = np.bincount(y, weights=p_true, minlength=c)[present] / n_in_batch[present]
    clamped = pbar < PBAR_FLOOR
    loss = -np.mean(np.log(np.maximum(pbar, PBAR_FLOOR)))

    # d loss / d p_true[i] = -1 / (K * n_c * pbar_c) for sample i of class c
    coef = np.zeros(c)
    coef[present] = np.where(clamped, 0.0, -1.0 / (k * n_in_batch[present] * np.maximum(pbar, PBAR_FLOOR)))
    dp_true = coef[y]
    # d p_y / d o_j = p_y (delta_yj - p_j); the log-count shift is a constant
    grad = -(dp_true * p_true)[:, None] * p
    grad[rows, y] += dp_true * p_true

    averages = ClassBatchAverages({int(cls): float(v) for cls, v in zip(present, pbar)})
    return float(loss), grad, averages


def ce_loss_and_grad(logits, labels):
    """Mean cross entropy and ``(softmax - onehot) / B``."""
    o = np.asarray(logits, dtype=np.float64)
    b, c = o.shape
    y = _check_labels(labels, b, c)
    logp = log_softmax(o)
    rows = np.arange(b)
    loss = -logp[rows, y].mean()
    grad = np.exp(logp)
    grad[rows, y] -= 1.0
    return float(loss), grad / b


def bsce_loss_and_grad(logits, labels, counts):
    """Balanced softmax cross entropy: CE on logits shifted by ``log N_j``."""
    o = np.asarray(logits, dtype=np.float64)
    if o.ndim != 2:
        raise ValueError(f"logits must be 2-D, got shape {o.shape}")
    return ce_loss_and_grad(o + _log_counts(counts, o.shape[1]), labels)


def loss_and_grad(kind: str, logits, labels, counts=None):
    """Dispatch on a loss name from :data:`LOSS_KINDS`; returns ``(loss, grad)``."""
    if kind == "ce":
        return ce_loss_and_grad(logits, labels)
    if kind == "bsce":
        return bsce_loss_and_grad(logits, labels, counts)
    if kind == "gml":
        loss, grad, _ = gml_loss_and_grad(logits, labels, counts, reweight=True)
        return loss, grad
    if kind == "gml_unweighted":
        loss, grad, _ = gml_loss_and_grad(logits, labels, counts, reweight=False)
        return loss, grad
    raise ValueError(f"unknown loss kind {kind!r}; expected one of {LOSS_KINDS}")
