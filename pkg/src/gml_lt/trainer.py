"""SGD training, the pre-train / freeze-and-re-train pipeline, and checkpoints."""
from __future__ import annotations

import dataclasses
import json
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .dataset import STRATEGIES, ClassCounts, LabeledFeatureSet, count_classes, make_batches
from .errors import (
    CorruptFileError,
    DimensionMismatchError,
    InvalidStateError,
    MalformedHeaderError,
    TruncatedPayloadError,
    VersionError,
)
from .losses import LOSS_KINDS, loss_and_grad
from .model import LinearHead, MlpBackbone, ModelBundle, backward, forward, init_backbone, init_head

CHECKPOINT_MAGIC = b"LTCK"
CHECKPOINT_VERSION = 1
_CK_HEADER = struct.Struct("<4sHI")
STAGES = ("pretrained", "finetuned")

EpochCallback = Callable[[int, float, float], None]


@dataclass(frozen=True)
class TrainConfig:
    """Optimizer and stage settings.

    Defaults are the classifier re-training values: 40 epochs, batch 128,
    lr 0.05 multiplied by 0.2 at epoch 10, momentum 0.9, weight decay 5e-4.
    """

    epochs: int = 40
    batch_size: int = 128
    initial_lr: float = 0.05
    lr_decay_factor: float = 0.2
    lr_decay_epoch: int = 10
    momentum: float = 0.9
    weight_decay: float = 5e-4
    seed: int = 0
    loss_kind: str = "gml"
    sampler: str = "shuffled"
    freeze_backbone: bool = True

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if not self.initial_lr > 0:
            raise ValueError("initial_lr must be > 0")
        if not 0 < self.lr_decay_factor <= 1:
            raise ValueError("lr_decay_factor must lie in (0, 1]")
        if self.lr_decay_epoch < 0:
            raise ValueError("lr_decay_epoch must be >= 0")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be >= 0")
        if self.loss_kind not in LOSS_KINDS:
            raise ValueError(f"loss_kind must be one of {LOSS_KINDS}, got {self.loss_kind!r}")
        if self.sampler not in STRATEGIES:
            raise ValueError(f"sampler must be one of {STRATEGIES}, got {self.sampler!r}")

    @classmethod
    def pretraining(cls, **overrides) -> "TrainConfig":
        """Same schedule, but plain CE on the whole network."""
        return cls(**{"loss_kind": "ce", "freeze_backbone": False, **overrides})

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)


@dataclass
class SgdState:
    velocity: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def zeros_like(cls, params: dict[str, np.ndarray]) -> "SgdState":
        return cls({k: np.zeros_like(v, dtype=np.float64) for k, v in params.items()})


@dataclass(frozen=True, eq=False)
class Checkpoint:
    bundle: ModelBundle
    config: TrainConfig
    stage: str
    class_counts: ClassCounts
    version: int = CHECKPOINT_VERSION

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ValueError(f"stage must be one of {STAGES}")


def lr_at_epoch(config: TrainConfig, epoch: int) -> float:
    if not 0 <= epoch < config.epochs:
        raise ValueError(f"epoch {epoch} outside [0, {config.epochs})")
    if epoch >= config.lr_decay_epoch:
        return config.initial_lr * config.lr_decay_factor
    return config.initial_lr


def sgd_update(params, grads, state: SgdState, lr: float, momentum: float, weight_decay: float):
    """One momentum step with coupled weight decay.

    ``v <- momentum * v + (g + weight_decay * p)``; ``p <- p - lr * v``.
    Only parameters that have a gradient are touched.  Returns new
    ``(params, state)``; the inputs are not modified.
    """
    new_params = dict(params)
    new_velocity = dict(state.velocity)
    for name, g in grads.items():
        p = np.asarray(params[name], dtype=np.float64)
        g = np.asarray(g, dtype=np.float64)
        if g.shape != p.shape:
            raise ValueError(f"gradient for {name} has shape {g.shape}, parameter has {p.shape}")
        v = new_velocity.get(name)
        if v is None:
            v = np.zeros_like(p)
        elif v.shape != p.shape:
            raise ValueError(f"velocity for {name} has shape {v.shape}, parameter has {p.shape}")
        v = momentum * v + (g + weight_decay * p)
        new_velocity[name] = v
        new_params[name] = p - lr * v
    return new_params, SgdState(new_velocity)


def _bundle_params(bundle: ModelBundle) -> dict[str, np.ndarray]:
    params = {"w": bundle.new_head.w, "b": bundle.new_head.b}
    if not bundle.backbone.passthrough:
        params["w1"] = bundle.backbone.w1
        params["b1"] = bundle.backbone.b1
    return params


def _rebuild(bundle: ModelBundle, params, frozen: bool) -> ModelBundle:
    backbone = bundle.backbone
    if not frozen and not backbone.passthrough:
        backbone = MlpBackbone(params["w1"], params["b1"])
    return dataclasses.replace(bundle, backbone=backbone, new_head=LinearHead(params["w"], params["b"]))


def _train(
    bundle: ModelBundle,
    dataset: LabeledFeatureSet,
    config: TrainConfig,
    counts: ClassCounts,
    stream: int,
    on_epoch: EpochCallback | None,
) -> ModelBundle:
    frozen = config.freeze_backbone or bundle.backbone.passthrough
    params = _bundle_params(bundle)
    if frozen:
        params = {"w": params["w"], "b": params["b"]}
    state = SgdState.zeros_like(params)
    x, y = dataset.features, dataset.labels
    for epoch in range(config.epochs):
        lr = lr_at_epoch(config, epoch)
        total = 0.0
        for idx in make_batches(dataset, config.batch_size, config.sampler, [config.seed, stream, epoch]):
            xb, yb = x[idx], y[idx]
            logits = forward(bundle, "new", xb)
            loss, g = loss_and_grad(config.loss_kind, logits, yb, counts)
            grads = backward(bundle, "new", xb, g, freeze_backbone=frozen)
            params, state = sgd_update(params, grads, state, lr, config.momentum, config.weight_decay)
            bundle = _rebuild(bundle, params, frozen)
            total += loss * len(idx)
        if on_epoch is not None:
            on_epoch(epoch, lr, total / len(dataset))
    return bundle


def pretrain(
    dataset: LabeledFeatureSet,
    config: TrainConfig,
    hidden_dim: int | None = 32,
    on_epoch: EpochCallback | None = None,
) -> Checkpoint:
    """Train backbone and head from a random start.

    ``hidden_dim=None`` uses a passthrough backbone (a linear model on the
    raw features).  Any loss kind is accepted, so training from scratch with
    GML goes through here too.
    """
    counts = count_classes(dataset)
    if hidden_dim is None:
        backbone = MlpBackbone.identity(dataset.dim)
    else:
        backbone = init_backbone(dataset.dim, hidden_dim, [config.seed, 10])
    head = init_head(dataset.num_classes, backbone.output_dim, [config.seed, 11])
    bundle = ModelBundle(backbone, head, None, counts)
    bundle = _train(bundle, dataset, config, counts, 12, on_epoch)
    return Checkpoint(bundle, config, "pretrained", counts)


def finetune(
    pretrained: Checkpoint,
    dataset: LabeledFeatureSet,
    config: TrainConfig,
    on_epoch: EpochCallback | None = None,
) -> Checkpoint:
    """Freeze the backbone, keep the old head, train a fresh head."""
    if pretrained.stage != "pretrained":
        raise InvalidStateError(f"fine-tuning needs a pretrained checkpoint, got stage {pretrained.stage!r}")
    if not config.freeze_backbone:
        raise ValueError("fine-tuning always freezes the backbone; set freeze_backbone=True")
    src = pretrained.bundle
    if dataset.dim != src.backbone.input_dim or dataset.num_classes != src.num_classes:
        raise ValueError("dataset does not match the pretrained model's input/class dimensions")
    counts = count_classes(dataset)
    head = init_head(dataset.num_classes, src.backbone.output_dim, [config.seed, 20])
    bundle = ModelBundle(src.backbone, head, src.new_head, counts)
    bundle = _train(bundle, dataset, config, counts, 21, on_epoch)
    return Checkpoint(bundle, config, "finetuned", counts)


def format_epoch(epoch: int, lr: float, loss: float) -> str:
    return f"epoch={epoch} lr={lr!r} loss={loss!r}"


# --- checkpoint files -------------------------------------------------------


def _tensor_table(bundle: ModelBundle) -> list[tuple[str, np.ndarray]]:
    table = []
    if not bundle.backbone.passthrough:
        table += [("backbone.w1", bundle.backbone.w1), ("backbone.b1", bundle.backbone.b1)]
    table += [("new_head.w", bundle.new_head.w), ("new_head.b", bundle.new_head.b)]
    if bundle.old_head is not None:
        table += [("old_head.w", bundle.old_head.w), ("old_head.b", bundle.old_head.b)]
    return table


def save_checkpoint(path: str | Path, ckpt: Checkpoint) -> None:
    table = _tensor_table(ckpt.bundle)
    meta = {
        "stage": ckpt.stage,
        "config": dataclasses.asdict(ckpt.config),
        "class_counts": list(ckpt.class_counts),
        "bundle_counts": None if ckpt.bundle.class_counts is None else list(ckpt.bundle.class_counts),
        "passthrough": ckpt.bundle.backbone.passthrough,
        "input_dim": ckpt.bundle.backbone.input_dim,
        "tensors": [[name, list(a.shape)] for name, a in table],
    }
    meta_bytes = json.dumps(meta, sort_keys=True).encode()
    body = meta_bytes + b"".join(np.ascontiguousarray(a, dtype="<f8").tobytes() for _, a in table)
    with open(path, "wb") as fh:
        fh.write(_CK_HEADER.pack(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, len(meta_bytes)))
        fh.write(body)
        fh.write(struct.pack("<I", zlib.crc32(body)))


def load_checkpoint(path: str | Path) -> Checkpoint:
    data = Path(path).read_bytes()
    if len(data) < _CK_HEADER.size:
        raise MalformedHeaderError(f"{path}: too short to be a checkpoint")
    magic, version, meta_len = _CK_HEADER.unpack_from(data)
    if magic != CHECKPOINT_MAGIC:
        raise MalformedHeaderError(f"{path}: bad magic {magic!r}")
    if version > CHECKPOINT_VERSION:
        raise VersionError(f"{path}: checkpoint version {version} is newer than {CHECKPOINT_VERSION}")
    if version < 1:
        raise MalformedHeaderError(f"{path}: invalid version {version}")
    body = data[_CK_HEADER.size : -4]
    if len(data) < _CK_HEADER.size + meta_len + 4:
        raise TruncatedPayloadError(f"{path}: truncated checkpoint")
    (crc,) = struct.unpack("<I", data[-4:])
    try:
        meta = json.loads(body[:meta_len])
    except ValueError as exc:
        if zlib.crc32(body) != crc:
            raise CorruptFileError(f"{path}: checksum mismatch") from exc
        raise MalformedHeaderError(f"{path}: unreadable metadata") from exc
    need = meta_len + sum(8 * int(np.prod(shape)) for _, shape in meta["tensors"])
    if len(body) < need:
        raise TruncatedPayloadError(f"{path}: expected {need} payload bytes, found {len(body)}")
    if len(body) > need:
        raise DimensionMismatchError(f"{path}: {len(body) - need} unexpected trailing bytes")
    if zlib.crc32(body) != crc:
        raise CorruptFileError(f"{path}: checksum mismatch")

    tensors = {}
    off = meta_len
    for name, shape in meta["tensors"]:
        n = int(np.prod(shape))
        tensors[name] = np.frombuffer(body, dtype="<f8", count=n, offset=off).reshape(shape).astype(np.float64)
        off += 8 * n
    if meta["passthrough"]:
        backbone = MlpBackbone.identity(meta["input_dim"])
    else:
        backbone = MlpBackbone(tensors["backbone.w1"], tensors["backbone.b1"])
    old = None
    if "old_head.w" in tensors:
        old = LinearHead(tensors["old_head.w"], tensors["old_head.b"])
    bundle_counts = meta.get("bundle_counts")
    bundle = ModelBundle(
        backbone,
        LinearHead(tensors["new_head.w"], tensors["new_head.b"]),
        old,
        None if bundle_counts is None else ClassCounts(tuple(bundle_counts)),
    )
    return Checkpoint(bundle, TrainConfig(**meta["config"]), meta["stage"], ClassCounts(tuple(meta["class_counts"])), version)
