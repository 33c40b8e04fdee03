"""ROC curves, TPR at fixed FPR, repeat aggregation and shot-scaling trends."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, NamedTuple, Sequence, Union

import numpy as np
import scipy.stats
from loguru import logger

from .attacks import AttackScoreSet
from .errors import ConfigurationError


@dataclass(frozen=True, eq=False)
class RocCurve:
    """Vertices of an empirical ROC curve, from ``(0, 0)`` to ``(1, 1)``."""

    fpr: np.ndarray
    tpr: np.ndarray

    def points(self) -> list[tuple[float, float]]:
        return [(float(f), float(t)) for f, t in zip(self.fpr, self.tpr)]

    def auc(self) -> float:
        widths = np.diff(self.fpr)
        heights = 0.5 * (self.tpr[1:] + self.tpr[:-1])
        return float(np.sum(widths * heights))


ScoreInput = Union[AttackScoreSet, tuple]


def _unpack(scores: ScoreInput) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(scores, AttackScoreSet):
        values, members = scores.scores, scores.is_member
    else:
        values, members = scores
    values = np.asarray(values, dtype=np.float64)
    members = np.asarray(members, dtype=bool)
    positives = int(members.sum())
    if positives == 0 or positives == members.size:
        raise ConfigurationError("ROC needs at least one member and one non-member")
    return values, members


def roc_curve(scores: ScoreInput) -> RocCurve:
    """Sweep every distinct score as a threshold, highest first; ``score >= t`` means member.

    Accepts an :class:`AttackScoreSet` or a ``(scores, is_member)`` pair.
    """
    values, members = _unpack(scores)
    order = np.argsort(-values, kind="stable")
    values, members = values[order], members[order]
    # last index of every run of equal scores
    ends = np.r_[np.flatnonzero(np.diff(values) != 0), values.size - 1]
    tp = np.cumsum(members)[ends]
    fp = np.cumsum(~members)[ends]
    fpr = np.r_[0.0, fp / (~members).sum()]
    tpr = np.r_[0.0, tp / members.sum()]
    return RocCurve(fpr, tpr)


def auc(scores: ScoreInput) -> float:
    return roc_curve(scores).auc()


class TprAtFpr(NamedTuple):
    tpr: float
    coarse: bool


def tpr_at_fpr(scores: ScoreInput, fpr_target: float) -> TprAtFpr:
    """Largest TPR among thresholds whose FPR does not exceed ``fpr_target``.

    ``coarse`` is set when there are fewer than ``1 / fpr_target`` non-members.
    """
    if not 0 < fpr_target < 1:
        raise ConfigurationError(f"fpr target must lie in (0, 1), got {fpr_target}")
    curve = roc_curve(scores)
    _, members = _unpack(scores)
    negatives = int((~members).sum())
    coarse = negatives < 1.0 / fpr_target
    if coarse:
        logger.warning(
            f"{negatives} non-members cannot resolve FPR {fpr_target}; TPR there is a step estimate"
        )
    return TprAtFpr(float(curve.tpr[curve.fpr <= fpr_target].max()), coarse)


def iqr(values: Sequence[float]) -> float:
    values = np.asarray(values, dtype=np.float64)
    if values.size == 0:
        raise ConfigurationError("IQR of an empty list")
    low, high = np.percentile(values, [25, 75], method="linear")
    return float(high - low)


@dataclass(frozen=True, eq=False)
class RepeatSummary:
    fpr_targets: tuple[float, ...]
    values: np.ndarray
    median: np.ndarray
    iqr: np.ndarray

    @property
    def n_repeats(self) -> int:
        return self.values.shape[0]


def aggregate_repeats(per_repeat_tprs: Sequence[Sequence[float]], fpr_targets: Sequence[float]) -> RepeatSummary:
    """Median and IQR across repeats; ``per_repeat_tprs[r][k]`` is TPR at ``fpr_targets[k]``."""
    values = np.asarray(per_repeat_tprs, dtype=np.float64).reshape(-1, len(fpr_targets))
    if values.shape[0] == 0:
        raise ConfigurationError("need at least one repeat to aggregate")
    spread = np.array([iqr(values[:, k]) for k in range(values.shape[1])])
    return RepeatSummary(tuple(float(f) for f in fpr_targets), values, np.median(values, axis=0), spread)


class ShotTrend(NamedTuple):
    shots: tuple[int, ...]
    medians: tuple[float, ...]
    spearman: float
    inversions: int


def shot_trend(medians_by_shot: Mapping[int, float]) -> ShotTrend:
    """Rank correlation of shots against median TPR and the count of adjacent increases."""
    if len(medians_by_shot) < 3:
        raise ConfigurationError(f"shot trend needs at least 3 shot levels, got {len(medians_by_shot)}")
    shots = tuple(sorted(medians_by_shot))
    medians = tuple(float(medians_by_shot[s]) for s in shots)
    rho = scipy.stats.spearmanr(shots, medians).statistic
    if not np.isfinite(rho):
        rho = 0.0
    inversions = sum(1 for a, b in zip(medians, medians[1:]) if b > a)
    return ShotTrend(shots, medians, float(rho), inversions)
