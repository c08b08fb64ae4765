"""Synthetic long-tailed datasets, feature files and mini-batch sampling.

Two profile constructions are provided: the exponential decay used for
CIFAR-LT style benchmarks and a Pareto-shaped decay used for the
ImageNet-LT / Places-LT style benchmarks.  Gaussian class clusters stand in
for images.
"""
from __future__ import annotations

import csv
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from .errors import (
    DimensionMismatchError,
    MalformedHeaderError,
    TruncatedPayloadError,
    VersionError,
)

FEATURE_MAGIC = b"LTFS"
FEATURE_VERSION = 1
_HEADER = struct.Struct("<4sHQII")

STRATEGIES = ("shuffled", "class-balanced")


def _readonly(a: np.ndarray) -> np.ndarray:
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class LongTailProfile:
    """Per-class training counts, class 0 most frequent."""

    per_class_count: tuple[int, ...]
    kind: str = "custom"
    params: dict[str, Any] = field(default_factory=dict, compare=False)

    def __post_init__(self):
        counts = tuple(int(c) for c in self.per_class_count)
        if not counts:
            raise ValueError("profile needs at least one class")
        if min(counts) < 1:
            raise ValueError("every class needs at least one sample")
        if any(b > a for a, b in zip(counts, counts[1:])):
            raise ValueError("profile must be non-increasing")
        object.__setattr__(self, "per_class_count", counts)

    @property
    def num_classes(self) -> int:
        return len(self.per_class_count)

    @property
    def total(self) -> int:
        return sum(self.per_class_count)

    @property
    def imbalance_ratio(self) -> float:
        return self.per_class_count[0] / self.per_class_count[-1]

    def __len__(self):
        return len(self.per_class_count)

    def __getitem__(self, i):
        return self.per_class_count[i]

    def __iter__(self):
        return iter(self.per_class_count)


@dataclass(frozen=True)
class ClassCounts:
    """Training-set class frequencies (may contain zeros)."""

    counts: tuple[int, ...]

    def __post_init__(self):
        counts = tuple(int(c) for c in self.counts)
        if any(c < 0 for c in counts):
            raise ValueError("class counts must be non-negative")
        object.__setattr__(self, "counts", counts)

    def __len__(self):
        return len(self.counts)

    def __getitem__(self, i):
        return self.counts[i]

    def __iter__(self):
        return iter(self.counts)

    def __array__(self, dtype=None, copy=None):
        return np.asarray(self.counts, dtype=dtype if dtype is not None else np.int64)

    @property
    def total(self) -> int:
        return sum(self.counts)


@dataclass(frozen=True, eq=False)
class LabeledFeatureSet:
    """N x D features with integer labels in [0, num_classes)."""

    features: np.ndarray
    labels: np.ndarray
    num_classes: int
    metadata: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        x = np.array(self.features, dtype=np.float64, copy=True)
        y = np.array(self.labels, dtype=np.int64, copy=True)
        if x.ndim != 2:
            raise ValueError(f"features must be 2-D, got shape {x.shape}")
        if y.ndim != 1 or y.shape[0] != x.shape[0]:
            raise ValueError(
                f"{x.shape[0]} feature rows but {y.shape[0] if y.ndim == 1 else y.shape} labels"
            )
        if self.num_classes < 1:
            raise ValueError("num_classes must be >= 1")
        if y.size and (y.min() < 0 or y.max() >= self.num_classes):
            raise ValueError(f"labels must lie in [0, {self.num_classes})")
        object.__setattr__(self, "features", _readonly(x))
        object.__setattr__(self, "labels", _readonly(y))
        object.__setattr__(self, "num_classes", int(self.num_classes))

    def __len__(self):
        return self.labels.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def __eq__(self, other):
        if not isinstance(other, LabeledFeatureSet):
            return NotImplemented
        return (
            self.num_classes == other.num_classes
            and np.array_equal(self.labels, other.labels)
            and self.features.shape == other.features.shape
            and self.features.tobytes() == other.features.tobytes()
        )

    __hash__ = None


def exponential_profile(num_classes: int, head_count: int, imbalance_ratio: float) -> LongTailProfile:
    """Counts ``floor(head_count * ratio**(-i/(C-1)))``, clamped below at 1.

    >>> exponential_profile(3, 100, 100).per_class_count
    (100, 10, 1)
    """
    if num_classes < 1:
        raise ValueError("num_classes must be >= 1")
    if head_count < 1:
        raise ValueError("head_count must be >= 1")
    if not imbalance_ratio >= 1:
        raise ValueError(f"imbalance_ratio must be >= 1, got {imbalance_ratio}")
    counts = [head_count]
    for i in range(1, num_classes):
        raw = head_count * imbalance_ratio ** (-i / (num_classes - 1))
        counts.append(max(1, math.floor(raw)))
    params = {"head_count": head_count, "imbalance_ratio": float(imbalance_ratio)}
    return LongTailProfile(tuple(counts), kind="exponential", params=params)


def pareto_profile(
    num_classes: int, max_count: int, alpha: float, min_count: int = 1
) -> LongTailProfile:
    """Pareto-shaped decay ``max_count * (1 + i*s)**(-alpha)``.

    The scale ``s`` is picked so the last class lands on ``min_count``; it is
    stored in ``params["scale"]``.
    """
    if num_classes < 1:
        raise ValueError("num_classes must be >= 1")
    if max_count < 1:
        raise ValueError("max_count must be >= 1")
    if not alpha > 0:
        raise ValueError(f"alpha must be > 0, got {alpha}")
    if not 1 <= min_count <= max_count:
        raise ValueError("min_count must lie in [1, max_count]")
    if num_classes == 1:
        scale = 0.0
    else:
        scale = ((max_count / min_count) ** (1.0 / alpha) - 1.0) / (num_classes - 1)
    counts = [max_count]
    for i in range(1, num_classes):
        raw = max_count * (1.0 + i * scale) ** (-alpha)
        counts.append(min(counts[-1], max(1, math.floor(raw + 0.5))))
    params = {"max_count": max_count, "alpha": float(alpha), "min_count": min_count, "scale": scale}
    return LongTailProfile(tuple(counts), kind="pareto", params=params)


def uniform_profile(num_classes: int, count: int) -> LongTailProfile:
    return LongTailProfile((count,) * num_classes, kind="uniform", params={"count": count})


def class_means(num_classes: int, dim: int, separation: float, seed: int) -> np.ndarray:
    """Seeded cluster centres with pairwise distance ``separation``.

    With ``num_classes <= dim`` the centres are scaled orthonormal vectors, so
    every pair is exactly ``separation`` apart.  Otherwise they are random
    unit directions on the same sphere and the distance holds only on average.
    """
    rng = np.random.default_rng([seed, 0])
    radius = separation / math.sqrt(2.0)
    g = rng.standard_normal((dim, num_classes))
    if num_classes <= dim:
        q, r = np.linalg.qr(g)
        # Fix column signs so the result does not depend on LAPACK conventions.
        q = q * np.where(np.diag(r) < 0, -1.0, 1.0)
        return radius * q.T
    return radius * (g / np.linalg.norm(g, axis=0)).T


def synthesize_gaussian(
    profile: LongTailProfile | Sequence[int],
    dim: int,
    separation: float,
    seed: int,
    *,
    stream: int = 0,
) -> LabeledFeatureSet:
    """Draw ``profile[c]`` unit-variance Gaussian samples around each class mean.

    Class means depend only on ``seed``; ``stream`` selects an independent
    noise stream so a train and a test split can share the same means.
    Labels come out grouped by class.  Features are rounded to float32 so
    that the binary file round trip is exact.
    """
    if dim < 1:
        raise ValueError("dim must be >= 1")
    if not separation > 0:
        raise ValueError("separation must be > 0")
    if not isinstance(profile, LongTailProfile):
        profile = LongTailProfile(tuple(profile))
    num_classes = profile.num_classes
    means = class_means(num_classes, dim, separation, seed)
    rng = np.random.default_rng([seed, 1, stream])
    blocks = [means[c] + rng.standard_normal((n, dim)) for c, n in enumerate(profile)]
    x = np.concatenate(blocks).astype(np.float32).astype(np.float64)
    y = np.repeat(np.arange(num_classes), profile.per_class_count)
    meta = {
        "profile": list(profile.per_class_count),
        "profile_kind": profile.kind,
        "profile_params": dict(profile.params),
        "dim": dim,
        "separation": float(separation),
        "seed": seed,
        "stream": stream,
        "means": means.tolist(),
    }
    return LabeledFeatureSet(x, y, num_classes, meta)


def count_classes(dataset: LabeledFeatureSet) -> ClassCounts:
    if len(dataset) == 0:
        raise ValueError("dataset is empty")
    return ClassCounts(tuple(np.bincount(dataset.labels, minlength=dataset.num_classes).tolist()))


def write_features(path: str | Path, dataset: LabeledFeatureSet) -> None:
    n, d = dataset.features.shape
    header = _HEADER.pack(FEATURE_MAGIC, FEATURE_VERSION, n, d, dataset.num_classes)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(dataset.features.astype("<f4").tobytes())
        fh.write(dataset.labels.astype("<u4").tobytes())


def read_features(path: str | Path) -> LabeledFeatureSet:
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size:
        raise MalformedHeaderError(f"{path}: file shorter than the {_HEADER.size}-byte header")
    magic, version, n, d, c = _HEADER.unpack_from(data)
    if magic != FEATURE_MAGIC:
        raise MalformedHeaderError(f"{path}: bad magic {magic!r}")
    if version > FEATURE_VERSION:
        raise VersionError(f"{path}: feature file version {version} is newer than {FEATURE_VERSION}")
    if version < 1 or d < 1 or c < 1:
        raise MalformedHeaderError(f"{path}: invalid header (version={version}, D={d}, C={c})")
    expected = _HEADER.size + n * d * 4 + n * 4
    if len(data) < expected:
        raise TruncatedPayloadError(
            f"{path}: header declares N={n}, D={d} ({expected} bytes) but file has {len(data)}"
        )
    if len(data) > expected:
        raise DimensionMismatchError(
            f"{path}: {len(data) - expected} trailing bytes beyond declared N={n}, D={d}"
        )
    off = _HEADER.size
    x = np.frombuffer(data, dtype="<f4", count=n * d, offset=off).reshape(n, d)
    y = np.frombuffer(data, dtype="<u4", count=n, offset=off + n * d * 4)
    if n and int(y.max()) >= c:
        raise DimensionMismatchError(f"{path}: label {int(y.max())} outside [0, {c})")
    return LabeledFeatureSet(x.astype(np.float64), y.astype(np.int64), c)


def write_features_csv(path: str | Path, dataset: LabeledFeatureSet) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([f"f{j}" for j in range(dataset.dim)] + ["label"])
        for row, label in zip(dataset.features, dataset.labels):
            w.writerow([repr(float(v)) for v in row] + [int(label)])


def read_features_csv(path: str | Path, num_classes: int | None = None) -> LabeledFeatureSet:
    """Load a ``f0,...,f{D-1},label`` CSV.  ``num_classes`` defaults to max label + 1."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise MalformedHeaderError(f"{path}: empty CSV")
    header = rows[0]
    d = len(header) - 1
    if d < 1 or header != [f"f{j}" for j in range(d)] + ["label"]:
        raise MalformedHeaderError(f"{path}: header must be f0,...,f{{D-1}},label")
    x = np.empty((len(rows) - 1, d))
    y = np.empty(len(rows) - 1, dtype=np.int64)
    for i, row in enumerate(rows[1:]):
        if len(row) != d + 1:
            raise DimensionMismatchError(f"{path}: row {i + 2} has {len(row)} fields, expected {d + 1}")
        x[i] = [float(v) for v in row[:d]]
        y[i] = int(row[d])
    if num_classes is None:
        num_classes = int(y.max()) + 1 if y.size else 1
    return LabeledFeatureSet(x, y, num_classes)


def make_batches(
    dataset: LabeledFeatureSet,
    batch_size: int,
    strategy: str = "shuffled",
    seed: int | Sequence[int] = 0,
) -> list[np.ndarray]:
    """Index batches for one epoch.

    ``shuffled`` splits a seeded permutation into consecutive chunks (the short
    last chunk is kept).  ``class-balanced`` draws N indices with replacement by
    first picking a class uniformly among the non-empty ones, then a member of
    that class uniformly, in the same chunk sizes.
    """
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    n = len(dataset)
    if n == 0:
        raise ValueError("cannot batch an empty dataset")
    rng = np.random.default_rng(seed)
    if strategy == "shuffled":
        order = rng.permutation(n)
    elif strategy == "class-balanced":
        members = [np.flatnonzero(dataset.labels == c) for c in range(dataset.num_classes)]
        members = [m for m in members if m.size]
        picks = rng.integers(0, len(members), size=n)
        order = np.empty(n, dtype=np.int64)
        for k, m in enumerate(members):
            where = np.flatnonzero(picks == k)
            order[where] = m[rng.integers(0, m.size, size=where.size)]
    else:
        raise ValueError(f"unknown batching strategy {strategy!r}; expected one of {STRATEGIES}")
    return [order[i : i + batch_size] for i in range(0, n, batch_size)]
