"""Feature stores, synthetic embeddings, shot sampling and membership splits."""

from __future__ import annotations

import enum
import hashlib
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple, Optional, Sequence, Union

import numpy as np
from loguru import logger

from .errors import (
    CapacityError,
    ConfigurationError,
    EmptyDatasetError,
    FormatError,
    ValidationError,
)

STORE_MAGIC = b"MIAF"
STORE_VERSION = 1
# magic, version u32, n u64, d u32, C u32, K u32
STORE_HEADER = struct.Struct("<4sIQIII")

_MASK64 = (1 << 64) - 1


def _splitmix64(value: int) -> int:
    z = (value + 0x9E3779B97F4A7C15) & _MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return z ^ (z >> 31)


def derive_seed(seed: int, tag: str, *indices: int) -> int:
    """Seed for a sub-task, independent of the order sub-tasks run in."""
    tag_key = int.from_bytes(hashlib.blake2b(tag.encode("utf-8"), digest_size=8).digest(), "little")
    state = _splitmix64((int(seed) & _MASK64) ^ tag_key)
    for index in indices:
        state = _splitmix64(state ^ (int(index) & _MASK64))
    return state


def mix64(values: np.ndarray, key: int) -> np.ndarray:
    """Vectorised splitmix64 of ``values`` keyed by ``key`` (uint64 in, uint64 out)."""
    z = np.asarray(values, dtype=np.uint64) ^ np.uint64(key & _MASK64)
    with np.errstate(over="ignore"):
        z = z + np.uint64(0x9E3779B97F4A7C15)
        z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
        z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    return z ^ (z >> np.uint64(31))


@dataclass(frozen=True, eq=False)
class FeatureDataset:
    """Labeled embeddings, optionally with ``K`` precomputed augmented views per row.

    Sample ids are row indices.
    """

    features: np.ndarray
    labels: np.ndarray
    num_classes: int
    views: Optional[np.ndarray] = None

    def __post_init__(self) -> None:
        features = np.ascontiguousarray(self.features, dtype=np.float64)
        labels = np.ascontiguousarray(self.labels, dtype=np.int64)
        if features.ndim != 2:
            raise ValidationError(f"features must be a 2-d matrix, got shape {features.shape}")
        if features.shape[0] == 0:
            raise EmptyDatasetError("dataset has no samples")
        if labels.shape != (features.shape[0],):
            raise ValidationError(
                f"expected {features.shape[0]} labels, got shape {labels.shape}"
            )
        if self.num_classes < 1:
            raise ValidationError(f"class count must be positive, got {self.num_classes}")
        bad = np.flatnonzero((labels < 0) | (labels >= self.num_classes))
        if bad.size:
            raise ValidationError(
                f"label {labels[bad[0]]} outside [0, {self.num_classes})", row=int(bad[0])
            )
        _check_finite(features)
        views = self.views
        if views is not None:
            views = np.ascontiguousarray(views, dtype=np.float64)
            if views.ndim != 3 or views.shape[0] != features.shape[0] or views.shape[2] != features.shape[1]:
                raise ValidationError(
                    f"views must have shape (n, K, d) = ({features.shape[0]}, K, {features.shape[1]}),"
                    f" got {views.shape}"
                )
            if views.shape[1] == 0:
                views = None
            else:
                _check_finite(views.reshape(views.shape[0], -1))
        missing = np.setdiff1d(np.arange(self.num_classes), labels)
        if missing.size:
            raise ValidationError(f"class {missing[0]} has no samples")
        object.__setattr__(self, "features", features)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "views", views)

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    @property
    def num_views(self) -> int:
        return 0 if self.views is None else self.views.shape[1]

    @property
    def sample_ids(self) -> np.ndarray:
        return np.arange(self.n)

    def class_ids(self, label: int, among: Optional[np.ndarray] = None) -> np.ndarray:
        ids = self.sample_ids if among is None else np.asarray(among, dtype=np.int64)
        return ids[self.labels[ids] == label]

    def query_rows(self, ids: np.ndarray, with_views: bool = True) -> np.ndarray:
        """Rows for ``ids`` as an ``(len(ids), 1 + K, d)`` tensor, original row first."""
        ids = np.asarray(ids, dtype=np.int64)
        rows = self.features[ids][:, None, :]
        if with_views and self.views is not None:
            rows = np.concatenate([rows, self.views[ids]], axis=1)
        return rows

    def training_rows(self, ids: np.ndarray, with_views: bool = False) -> tuple[np.ndarray, np.ndarray]:
        """Features and labels used to fit a head on ``ids``; views become extra rows."""
        ids = np.asarray(ids, dtype=np.int64)
        if not with_views or self.views is None:
            return self.features[ids], self.labels[ids]
        rows = self.query_rows(ids).reshape(-1, self.dim)
        labels = np.repeat(self.labels[ids], 1 + self.num_views)
        return rows, labels


def _check_finite(matrix: np.ndarray) -> None:
    finite = np.isfinite(matrix).all(axis=1)
    if not finite.all():
        row = int(np.flatnonzero(~finite)[0])
        raise ValidationError("non-finite feature value", row=row)


def load_feature_store(path: Union[str, Path]) -> FeatureDataset:
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < STORE_HEADER.size:
        raise FormatError(f"{path}: truncated header")
    magic, version, n, d, num_classes, k = STORE_HEADER.unpack_from(raw)
    if magic != STORE_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}, expected {STORE_MAGIC!r}")
    if version != STORE_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    if n == 0:
        raise EmptyDatasetError(f"{path}: store holds no samples")
    expected = STORE_HEADER.size + 2 * n + 4 * n * (1 + k) * d
    if len(raw) != expected:
        raise FormatError(f"{path}: expected {expected} bytes, found {len(raw)}")
    offset = STORE_HEADER.size
    labels = np.frombuffer(raw, dtype="<u2", count=n, offset=offset).astype(np.int64)
    offset += 2 * n
    rows = np.frombuffer(raw, dtype="<f4", count=n * (1 + k) * d, offset=offset)
    rows = rows.reshape(n, 1 + k, d).astype(np.float64)
    dataset = FeatureDataset(
        features=rows[:, 0, :],
        labels=labels,
        num_classes=num_classes,
        views=rows[:, 1:, :] if k else None,
    )
    logger.info(f"Loaded feature store {path}: n={n}, d={d}, C={num_classes}, K={k}")
    return dataset


def save_feature_store(dataset: FeatureDataset, path: Union[str, Path]) -> Path:
    path = Path(path)
    if dataset.num_classes > np.iinfo(np.uint16).max + 1:
        raise CapacityError(f"the store format holds at most 65536 classes, got {dataset.num_classes}")
    header = STORE_HEADER.pack(
        STORE_MAGIC, STORE_VERSION, dataset.n, dataset.dim, dataset.num_classes, dataset.num_views
    )
    rows = dataset.query_rows(dataset.sample_ids).astype("<f4")
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, mode="wb") as fp:
        fp.write(header)
        fp.write(dataset.labels.astype("<u2").tobytes())
        fp.write(rows.tobytes())
    return path


def synth_gaussian(
    num_classes: int,
    dim: int,
    per_class: int,
    separation: float,
    seed: int,
    views: int = 0,
    view_noise: float = 0.1,
) -> FeatureDataset:
    """Isotropic Gaussian classes with mean ``separation * e_(c mod dim)``.

    Values are rounded to float32 so a saved store reloads to an identical dataset.
    """
    if num_classes < 2:
        raise ConfigurationError(f"need at least 2 classes, got {num_classes}")
    if dim < 1 or per_class < 1:
        raise ConfigurationError(f"dim and per_class must be positive, got {dim}, {per_class}")
    if separation < 0:
        raise ConfigurationError(f"separation must be nonnegative, got {separation}")
    if views < 0 or view_noise < 0:
        raise ConfigurationError("views and view_noise must be nonnegative")
    rng = np.random.default_rng(seed)
    labels = np.repeat(np.arange(num_classes), per_class)
    means = np.zeros((num_classes, dim))
    means[np.arange(num_classes), np.arange(num_classes) % dim] = separation
    features = rng.standard_normal((labels.size, dim)) + means[labels]
    augmented = None
    if views:
        augmented = features[:, None, :] + view_noise * rng.standard_normal((labels.size, views, dim))
        augmented = augmented.astype(np.float32).astype(np.float64)
    logger.debug(f"Synthesised {labels.size} samples ({num_classes} classes, d={dim}, K={views})")
    return FeatureDataset(
        features=features.astype(np.float32).astype(np.float64),
        labels=labels,
        num_classes=num_classes,
        views=augmented,
    )


@dataclass(frozen=True)
class ShotSpec:
    shots: int
    num_classes: int

    def __post_init__(self) -> None:
        if self.shots < 1:
            raise ConfigurationError(f"shots must be at least 1, got {self.shots}")
        if self.num_classes < 1:
            raise ConfigurationError(f"class count must be positive, got {self.num_classes}")

    @property
    def size(self) -> int:
        return self.shots * self.num_classes

    def check_pool(self, pool_size: int) -> None:
        if self.size > pool_size:
            raise CapacityError(
                f"{self.num_classes} classes x {self.shots} shots = {self.size} exceeds pool size {pool_size}"
            )


def sample_shots(
    pool: FeatureDataset,
    spec: ShotSpec,
    seed: int,
    among: Optional[np.ndarray] = None,
) -> np.ndarray:
    """Exactly ``spec.shots`` ids per class, without replacement, sorted."""
    candidates = pool.sample_ids if among is None else np.asarray(among, dtype=np.int64)
    spec.check_pool(candidates.size)
    rng = np.random.default_rng(seed)
    chosen = []
    for label in range(spec.num_classes):
        ids = pool.class_ids(label, among=candidates)
        if ids.size < spec.shots:
            raise CapacityError(
                f"class {label} has {ids.size} samples, {spec.shots} shots requested"
            )
        chosen.append(rng.choice(ids, size=spec.shots, replace=False))
    return np.sort(np.concatenate(chosen))


class SplitProtocol(str, enum.Enum):
    BALANCED = "balanced"
    EFFICIENT = "efficient"


@dataclass(frozen=True, eq=False)
class SplitPlan:
    """Membership design: which pool samples train the target and each shadow."""

    pool_ids: np.ndarray
    target_members: np.ndarray
    shadow_members: np.ndarray
    protocol: SplitProtocol

    @property
    def num_shadows(self) -> int:
        return self.shadow_members.shape[0]

    def model_rows(self) -> np.ndarray:
        """Target row stacked on the shadow rows, ``(M + 1, pool)``."""
        return np.vstack([self.target_members[None, :], self.shadow_members])

    def members_of(self, row: int) -> np.ndarray:
        return self.pool_ids[self.model_rows()[row]]


def make_shadow_splits(
    pool_ids: Sequence[int],
    num_shadows: int,
    protocol: Union[SplitProtocol, str],
    seed: int,
    labels: Optional[np.ndarray] = None,
    shots: Optional[int] = None,
) -> SplitPlan:
    """Build a :class:`SplitPlan` over ``pool_ids``.

    Under the balanced protocol ``labels`` (aligned with ``pool_ids``) select
    ``shots`` target members per class, defaulting to half of each class.
    """
    protocol = SplitProtocol(protocol)
    pool_ids = np.asarray(pool_ids, dtype=np.int64)
    n = pool_ids.size
    if num_shadows < 0:
        raise ConfigurationError(f"shadow count must be nonnegative, got {num_shadows}")
    rng = np.random.default_rng(seed)

    if protocol is SplitProtocol.EFFICIENT:
        rows = rng.random((num_shadows + 1, n)) < 0.5
        return SplitPlan(pool_ids, rows[0], rows[1:], protocol)

    if num_shadows % 2:
        raise ConfigurationError(f"balanced protocol needs an even shadow count, got {num_shadows}")
    if labels is None:
        labels = np.zeros(n, dtype=np.int64)
    labels = np.asarray(labels, dtype=np.int64)
    target = np.zeros(n, dtype=bool)
    for label in np.unique(labels):
        positions = np.flatnonzero(labels == label)
        take = positions.size // 2 if shots is None else shots
        if take > positions.size:
            raise CapacityError(f"class {label} has {positions.size} pool samples, {take} shots requested")
        target[rng.choice(positions, size=take, replace=False)] = True

    shadows = np.zeros((num_shadows, n), dtype=bool)
    if num_shadows:
        # per sample: a seeded permutation of [0, M), the first M/2 entries train on it
        order = np.argsort(rng.random((n, num_shadows)), axis=1)
        shadows[order[:, : num_shadows // 2], np.arange(n)[:, None]] = True
    return SplitPlan(pool_ids, target, shadows, protocol)


class HpoSplit(NamedTuple):
    train_ids: np.ndarray
    val_ids: np.ndarray
    stratified: bool


def _allocate(counts: np.ndarray, k: int) -> np.ndarray:
    """Largest-remainder split of ``k`` across groups proportionally to ``counts``."""
    total = int(counts.sum())
    base = (k * counts) // total
    remainder = (k * counts) % total
    extra = k - int(base.sum())
    order = np.lexsort((np.arange(counts.size), -remainder))
    base[order[:extra]] += 1
    return base


def _stratified_take(
    ids: np.ndarray, labels: np.ndarray, k: int, rng: np.random.Generator
) -> tuple[np.ndarray, np.ndarray, bool]:
    classes, counts = np.unique(labels, return_counts=True)
    if counts.min() < 2:
        perm = rng.permutation(ids.size)
        return np.sort(ids[perm[:k]]), np.sort(ids[perm[k:]]), False
    quota = _allocate(counts, k)
    taken, rest = [], []
    for label, q in zip(classes, quota):
        members = rng.permutation(ids[labels == label])
        taken.append(members[:q])
        rest.append(members[q:])
    return np.sort(np.concatenate(taken)), np.sort(np.concatenate(rest)), True


def hpo_split(train_ids: Sequence[int], labels: np.ndarray, seed: int) -> HpoSplit:
    """Half of ``train_ids``, then 70/30 train/validation, class-stratified where feasible.

    ``labels`` is aligned with ``train_ids``. Validation size is
    ``floor(0.3 * half)`` but at least one sample.
    """
    train_ids = np.asarray(train_ids, dtype=np.int64)
    labels = np.asarray(labels, dtype=np.int64)
    if train_ids.size < 10:
        raise CapacityError(f"need at least 10 training ids for HPO, got {train_ids.size}")
    rng = np.random.default_rng(seed)
    lookup = dict(zip(train_ids.tolist(), labels.tolist()))

    half, _, stratified_half = _stratified_take(train_ids, labels, train_ids.size // 2, rng)
    half_labels = np.array([lookup[i] for i in half.tolist()], dtype=np.int64)
    n_val = max(1, (3 * half.size) // 10)
    val, train, stratified_val = _stratified_take(half, half_labels, n_val, rng)
    stratified = stratified_half and stratified_val
    if not stratified:
        logger.warning("HPO split fell back to unstratified sampling (a class has fewer than 2 samples)")
    return HpoSplit(train, val, stratified)
