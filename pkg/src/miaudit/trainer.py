"""Softmax linear heads: SGD training, distillation with loss trajectories, HPO."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
import struct
from dataclasses import dataclass
from functools import partial
from pathlib import Path
from typing import Callable, NamedTuple, Optional, Union

import numpy as np
from hyperopt import STATUS_OK, Trials, fmin, hp, rand, tpe
from hyperopt.pyll import scope as ho_scope
from loguru import logger
from scipy.special import log_softmax, softmax

from .data import FeatureDataset, ShotSpec, derive_seed, hpo_split, mix64
from .errors import ConfigurationError, DivergenceError, FormatError, ValidationError

HEAD_MAGIC = b"MIAH"
HEAD_VERSION = 1
HEAD_HEADER = struct.Struct("<4sIII")

EPOCH_RANGE = (1, 200)
BATCH_RANGE = (10, 1000)
LEARNING_RATE_RANGE = (1e-7, 1e-2)
DEFAULT_DISTILL_EPOCHS = 10


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 100
    batch_size: int = 32
    learning_rate: float = 1e-3
    l2: float = 0.0

    def __post_init__(self) -> None:
        if not EPOCH_RANGE[0] <= self.epochs <= EPOCH_RANGE[1]:
            raise ConfigurationError(f"epochs must lie in {list(EPOCH_RANGE)}, got {self.epochs}")
        if not BATCH_RANGE[0] <= self.batch_size <= BATCH_RANGE[1]:
            raise ConfigurationError(f"batch_size must lie in {list(BATCH_RANGE)}, got {self.batch_size}")
        if not LEARNING_RATE_RANGE[0] <= self.learning_rate <= LEARNING_RATE_RANGE[1]:
            raise ConfigurationError(
                f"learning_rate must lie in {list(LEARNING_RATE_RANGE)}, got {self.learning_rate}"
            )
        if not self.l2 >= 0:
            raise ConfigurationError(f"l2 must be nonnegative, got {self.l2}")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def digest(self) -> int:
        text = json.dumps(self.to_dict(), sort_keys=True)
        return int.from_bytes(hashlib.blake2b(text.encode("utf-8"), digest_size=8).digest(), "little")


@dataclass(frozen=True)
class SearchRanges:
    epochs: tuple[int, int] = EPOCH_RANGE
    batch_size: tuple[int, int] = BATCH_RANGE
    learning_rate: tuple[float, float] = LEARNING_RATE_RANGE
    l2: float = 0.0

    def __post_init__(self) -> None:
        for name, (low, high), (lo_bound, hi_bound) in (
            ("epochs", self.epochs, EPOCH_RANGE),
            ("batch_size", self.batch_size, BATCH_RANGE),
            ("learning_rate", self.learning_rate, LEARNING_RATE_RANGE),
        ):
            if not lo_bound <= low <= high <= hi_bound:
                raise ConfigurationError(
                    f"{name} range [{low}, {high}] must lie within [{lo_bound}, {hi_bound}]"
                )


@dataclass(frozen=True, eq=False)
class LinearHead:
    """Softmax regression ``softmax(W x + b)`` with ``W`` of shape ``(C, d)``."""

    weights: np.ndarray
    bias: np.ndarray
    config_hash: int = 0
    seed: int = 0

    @classmethod
    def zeros(cls, dim: int, num_classes: int, config_hash: int = 0, seed: int = 0) -> LinearHead:
        return cls(np.zeros((num_classes, dim)), np.zeros(num_classes), config_hash, seed)

    @property
    def dim(self) -> int:
        return self.weights.shape[1]

    @property
    def num_classes(self) -> int:
        return self.weights.shape[0]

    @property
    def num_params(self) -> int:
        return self.num_classes * (self.dim + 1)

    def logits(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-1] != self.dim:
            raise ValidationError(f"feature dimension {x.shape[-1]} does not match head dimension {self.dim}")
        return x @ self.weights.T + self.bias

    def params(self) -> np.ndarray:
        """Flattened ``[W | b]``: class ``c`` owns entries ``c*(d+1) .. c*(d+1)+d``."""
        return np.hstack([self.weights, self.bias[:, None]]).ravel()

    @classmethod
    def from_params(cls, params: np.ndarray, dim: int, num_classes: int) -> LinearHead:
        block = np.asarray(params, dtype=np.float64).reshape(num_classes, dim + 1)
        return cls(block[:, :dim].copy(), block[:, dim].copy())


def predict_posteriors(head: LinearHead, x: np.ndarray) -> np.ndarray:
    return softmax(head.logits(x), axis=-1)


def accuracy(head: LinearHead, features: np.ndarray, labels: np.ndarray) -> float:
    if len(labels) == 0:
        return float("nan")
    return float(np.mean(np.argmax(head.logits(features), axis=1) == labels))


EpochCallback = Callable[[int, LinearHead], None]


def _fit(
    features: np.ndarray,
    targets: np.ndarray,
    config: TrainConfig,
    seed: int,
    sample_ids: Optional[np.ndarray] = None,
    on_epoch: Optional[EpochCallback] = None,
) -> LinearHead:
    """Mini-batch SGD on soft-target cross-entropy plus ``(l2/2)||W||^2`` from a zero head.

    Each epoch orders samples by a keyed hash of their id, so dropping one
    sample leaves the relative order of the others untouched.
    """
    features = np.asarray(features, dtype=np.float64)
    n, dim = features.shape
    num_classes = targets.shape[1]
    ids = np.arange(n) if sample_ids is None else np.asarray(sample_ids, dtype=np.int64)
    weights = np.zeros((num_classes, dim))
    bias = np.zeros(num_classes)
    lr, l2 = config.learning_rate, config.l2
    step = 0
    for epoch in range(config.epochs):
        order = np.argsort(mix64(ids, derive_seed(seed, "shuffle", epoch)), kind="stable")
        for start in range(0, n, config.batch_size):
            batch = order[start : start + config.batch_size]
            x, t = features[batch], targets[batch]
            log_p = log_softmax(x @ weights.T + bias, axis=1)
            loss = -np.sum(t * log_p) / batch.size + 0.5 * l2 * np.sum(weights * weights)
            if not np.isfinite(loss):
                raise DivergenceError("non-finite training loss", step=step)
            residual = (np.exp(log_p) - t) / batch.size
            weights = weights - lr * (residual.T @ x + l2 * weights)
            bias = bias - lr * residual.sum(axis=0)
            step += 1
        if on_epoch is not None:
            on_epoch(epoch, LinearHead(weights, bias))
    return LinearHead(weights, bias, config.digest(), seed)


def train_head(
    features: np.ndarray,
    labels: np.ndarray,
    config: TrainConfig,
    seed: int,
    num_classes: Optional[int] = None,
    sample_ids: Optional[np.ndarray] = None,
) -> LinearHead:
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size == 0:
        raise ValidationError("cannot train on an empty dataset")
    if num_classes is None:
        num_classes = int(labels.max()) + 1
    targets = np.eye(num_classes)[labels]
    return _fit(features, targets, config, seed, sample_ids=sample_ids)


class Distillation(NamedTuple):
    student: LinearHead
    trajectories: np.ndarray
    probe_ids: np.ndarray
    kl_history: np.ndarray


def _cross_entropy(head: LinearHead, features: np.ndarray, labels: np.ndarray) -> np.ndarray:
    log_p = log_softmax(head.logits(features), axis=1)
    return -log_p[np.arange(labels.size), labels]


def distill(
    teacher: LinearHead,
    dataset: FeatureDataset,
    distill_ids: np.ndarray,
    probe_ids: np.ndarray,
    distill_epochs: int = DEFAULT_DISTILL_EPOCHS,
    config: Optional[TrainConfig] = None,
    seed: int = 0,
) -> Distillation:
    """Distill ``teacher`` into a zero-initialised student by KL on ``distill_ids``.

    ``trajectories[i]`` holds the student's hard-label loss on ``probe_ids[i]``
    after every epoch followed by the teacher's own loss.
    """
    distill_ids = np.asarray(distill_ids, dtype=np.int64)
    probe_ids = np.asarray(probe_ids, dtype=np.int64)
    if distill_ids.size == 0:
        raise ConfigurationError("distillation set is empty")
    if distill_epochs < 1:
        raise ConfigurationError(f"distill_epochs must be at least 1, got {distill_epochs}")
    config = dataclasses.replace(config or TrainConfig(), epochs=distill_epochs)

    x_distill = dataset.features[distill_ids]
    soft = predict_posteriors(teacher, x_distill)
    log_soft = np.log(np.clip(soft, 1e-300, None))
    x_probe = dataset.features[probe_ids]
    y_probe = dataset.labels[probe_ids]
    columns, kl = [], []

    def record(epoch: int, student: LinearHead) -> None:
        columns.append(_cross_entropy(student, x_probe, y_probe))
        log_p = log_softmax(student.logits(x_distill), axis=1)
        kl.append(float(np.mean(np.sum(soft * (log_soft - log_p), axis=1))))

    student = _fit(x_distill, soft, config, seed, sample_ids=distill_ids, on_epoch=record)
    columns.append(_cross_entropy(teacher, x_probe, y_probe))
    return Distillation(student, np.column_stack(columns), probe_ids, np.array(kl))


def save_head(head: LinearHead, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, mode="wb") as fp:
        fp.write(HEAD_HEADER.pack(HEAD_MAGIC, HEAD_VERSION, head.dim, head.num_classes))
        fp.write(np.ascontiguousarray(head.weights, dtype="<f8").tobytes())
        fp.write(np.ascontiguousarray(head.bias, dtype="<f8").tobytes())
        fp.write(struct.pack("<Q", head.config_hash & ((1 << 64) - 1)))
    return path


def load_head(path: Union[str, Path]) -> LinearHead:
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < HEAD_HEADER.size:
        raise FormatError(f"{path}: truncated header")
    magic, version, dim, num_classes = HEAD_HEADER.unpack_from(raw)
    if magic != HEAD_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}, expected {HEAD_MAGIC!r}")
    if version != HEAD_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    expected = HEAD_HEADER.size + 8 * num_classes * (dim + 1) + 8
    if len(raw) != expected:
        raise FormatError(f"{path}: expected {expected} bytes, found {len(raw)}")
    offset = HEAD_HEADER.size
    weights = np.frombuffer(raw, dtype="<f8", count=num_classes * dim, offset=offset)
    offset += 8 * num_classes * dim
    bias = np.frombuffer(raw, dtype="<f8", count=num_classes, offset=offset)
    offset += 8 * num_classes
    (config_hash,) = struct.unpack_from("<Q", raw, offset)
    return LinearHead(weights.reshape(num_classes, dim).copy(), bias.copy(), config_hash)


def _search_space(ranges: SearchRanges) -> dict:
    return {
        "epochs": ho_scope.int(hp.quniform("epochs", ranges.epochs[0], ranges.epochs[1], 1)),
        "batch_size": ho_scope.int(hp.quniform("batch_size", ranges.batch_size[0], ranges.batch_size[1], 1)),
        "learning_rate": hp.loguniform(
            "learning_rate", math.log(ranges.learning_rate[0]), math.log(ranges.learning_rate[1])
        ),
    }


def _clip(value: float, bounds: tuple) -> float:
    return min(max(value, bounds[0]), bounds[1])


def hpo_search(
    pool: FeatureDataset,
    spec: ShotSpec,
    train_ids: np.ndarray,
    ranges: Optional[SearchRanges] = None,
    trials: int = 20,
    strategy: str = "tpe",
    seed: int = 0,
) -> TrainConfig:
    """Pick the config with the best validation accuracy on :func:`hpo_split` of ``train_ids``.

    Ties go to the earliest trial.
    """
    if trials < 1:
        raise ConfigurationError(f"trials must be at least 1, got {trials}")
    if strategy == "tpe":
        algo = partial(tpe.suggest, n_startup_jobs=math.ceil(trials / 4), gamma=0.25)
    elif strategy == "random":
        algo = rand.suggest
    else:
        raise ConfigurationError(f"unknown HPO strategy {strategy!r}, expected 'tpe' or 'random'")
    ranges = ranges or SearchRanges()
    train_ids = np.asarray(train_ids, dtype=np.int64)
    spec.check_pool(pool.n)
    split = hpo_split(train_ids, pool.labels[train_ids], derive_seed(seed, "hpo-split"))
    x_train, y_train = pool.features[split.train_ids], pool.labels[split.train_ids]
    x_val, y_val = pool.features[split.val_ids], pool.labels[split.val_ids]
    evaluated: list[tuple[TrainConfig, float]] = []

    def objective(params: dict) -> dict:
        config = TrainConfig(
            epochs=int(_clip(int(params["epochs"]), ranges.epochs)),
            batch_size=int(_clip(int(params["batch_size"]), ranges.batch_size)),
            learning_rate=float(_clip(float(params["learning_rate"]), ranges.learning_rate)),
            l2=ranges.l2,
        )
        head = train_head(
            x_train, y_train, config, derive_seed(seed, "hpo-trial", len(evaluated)),
            num_classes=pool.num_classes, sample_ids=split.train_ids,
        )
        score = accuracy(head, x_val, y_val)
        logger.debug(f"HPO trial {len(evaluated)} ({spec.shots} shots): {config} -> val accuracy {score:.4f}")
        evaluated.append((config, score))
        return {"loss": -score, "status": STATUS_OK}

    fmin(
        objective,
        _search_space(ranges),
        algo=algo,
        max_evals=trials,
        trials=Trials(),
        rstate=np.random.default_rng(seed),
        show_progressbar=False,
    )
    best_index = max(range(len(evaluated)), key=lambda i: (evaluated[i][1], -i))
    best, best_score = evaluated[best_index]
    logger.info(f"HPO ({strategy}, {trials} trials) picked trial {best_index}: {best} (val accuracy {best_score:.4f})")
    return best
