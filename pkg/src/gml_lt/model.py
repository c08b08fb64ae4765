"""One-hidden-layer ReLU backbone with linear classification heads.

Forward and backward passes are written out by hand in float64.  The
fine-tuning stage keeps the backbone fixed, re-initializes the classifier,
and keeps the pre-trained classifier around as ``old_head``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .dataset import ClassCounts
from .errors import InvalidStateError

HEADS = ("old", "new")


def _frozen_array(a, ndim: int, name: str) -> np.ndarray:
    a = np.array(a, dtype=np.float64, copy=True)
    if a.ndim != ndim:
        raise ValueError(f"{name} must be {ndim}-D, got shape {a.shape}")
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class MlpBackbone:
    """``relu(w1 @ x + b1)``, or the identity when ``passthrough`` is set."""

    w1: np.ndarray | None
    b1: np.ndarray | None
    passthrough: bool = False
    input_dim: int | None = None

    def __post_init__(self):
        if self.passthrough:
            if self.w1 is not None or self.b1 is not None:
                raise ValueError("passthrough backbone has no parameters")
            if self.input_dim is None or self.input_dim < 1:
                raise ValueError("passthrough backbone needs input_dim")
            return
        w1 = _frozen_array(self.w1, 2, "w1")
        b1 = _frozen_array(self.b1, 1, "b1")
        if b1.shape[0] != w1.shape[0]:
            raise ValueError(f"b1 has {b1.shape[0]} entries, w1 has {w1.shape[0]} rows")
        object.__setattr__(self, "w1", w1)
        object.__setattr__(self, "b1", b1)
        object.__setattr__(self, "input_dim", w1.shape[1])

    @classmethod
    def identity(cls, dim: int) -> "MlpBackbone":
        return cls(None, None, passthrough=True, input_dim=dim)

    @property
    def output_dim(self) -> int:
        return self.input_dim if self.passthrough else self.w1.shape[0]


@dataclass(frozen=True, eq=False)
class LinearHead:
    w: np.ndarray  # C x H
    b: np.ndarray  # C

    def __post_init__(self):
        w = _frozen_array(self.w, 2, "head w")
        b = _frozen_array(self.b, 1, "head b")
        if b.shape[0] != w.shape[0]:
            raise ValueError(f"head bias has {b.shape[0]} entries, weight has {w.shape[0]} rows")
        object.__setattr__(self, "w", w)
        object.__setattr__(self, "b", b)

    @property
    def num_classes(self) -> int:
        return self.w.shape[0]


@dataclass(frozen=True, eq=False)
class ModelBundle:
    backbone: MlpBackbone
    new_head: LinearHead
    old_head: LinearHead | None = None
    class_counts: ClassCounts | None = None

    def __post_init__(self):
        for head in (self.new_head, self.old_head):
            if head is not None and head.w.shape[1] != self.backbone.output_dim:
                raise ValueError(
                    f"head expects {head.w.shape[1]} inputs, backbone emits {self.backbone.output_dim}"
                )
        if self.old_head is not None and self.old_head.num_classes != self.new_head.num_classes:
            raise ValueError("old and new heads disagree on the class count")

    @property
    def num_classes(self) -> int:
        return self.new_head.num_classes

    def head(self, which: str) -> LinearHead:
        if which == "new":
            return self.new_head
        if which == "old":
            if self.old_head is None:
                raise InvalidStateError("bundle has no old head (not produced by fine-tuning)")
            return self.old_head
        raise ValueError(f"head must be one of {HEADS}, got {which!r}")


def init_backbone(input_dim: int, hidden_dim: int, seed) -> MlpBackbone:
    if input_dim < 1 or hidden_dim < 1:
        raise ValueError("backbone dimensions must be >= 1")
    rng = np.random.default_rng(seed)
    bound = 1.0 / math.sqrt(input_dim)
    return MlpBackbone(rng.uniform(-bound, bound, (hidden_dim, input_dim)), np.zeros(hidden_dim))


def init_head(num_classes: int, hidden_dim: int, seed) -> LinearHead:
    """Weights ~ U(-1/sqrt(H), 1/sqrt(H)), zero bias."""
    if num_classes < 1 or hidden_dim < 1:
        raise ValueError("head dimensions must be >= 1")
    rng = np.random.default_rng(seed)
    bound = 1.0 / math.sqrt(hidden_dim)
    return LinearHead(rng.uniform(-bound, bound, (num_classes, hidden_dim)), np.zeros(num_classes))


def _check_features(backbone: MlpBackbone, features) -> np.ndarray:
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != backbone.input_dim:
        raise ValueError(f"expected features of shape (B, {backbone.input_dim}), got {x.shape}")
    return x


def _hidden(backbone: MlpBackbone, x: np.ndarray) -> tuple[np.ndarray, np.ndarray | None]:
    if backbone.passthrough:
        return x, None
    pre = x @ backbone.w1.T + backbone.b1
    return np.maximum(pre, 0.0), pre


def embed(backbone: MlpBackbone, features) -> np.ndarray:
    return _hidden(backbone, _check_features(backbone, features))[0]


def forward(bundle: ModelBundle, head: str, features) -> np.ndarray:
    """Logits (B x C) of the selected head."""
    h = bundle.head(head)
    z, _ = _hidden(bundle.backbone, _check_features(bundle.backbone, features))
    return z @ h.w.T + h.b


def backward(
    bundle: ModelBundle,
    head: str,
    features,
    logit_grad,
    freeze_backbone: bool = True,
) -> dict[str, np.ndarray]:
    """Chain rule from ``d loss / d logits`` back to the parameters.

    Returns a dict with keys ``w`` and ``b`` for the head and, unless the
    backbone is frozen (or a passthrough), ``w1`` and ``b1``.
    """
    h = bundle.head(head)
    x = _check_features(bundle.backbone, features)
    g = np.asarray(logit_grad, dtype=np.float64)
    if g.shape != (x.shape[0], h.num_classes):
        raise ValueError(f"logit_grad shape {g.shape} does not match ({x.shape[0]}, {h.num_classes})")
    z, pre = _hidden(bundle.backbone, x)
    grads = {"w": g.T @ z, "b": g.sum(axis=0)}
    if freeze_backbone or bundle.backbone.passthrough:
        return grads
    dpre = (g @ h.w) * (pre > 0)
    grads["w1"] = dpre.T @ x
    grads["b1"] = dpre.sum(axis=0)
    return grads
