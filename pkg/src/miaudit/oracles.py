"""Slow reference implementations the test suite checks the fast paths against."""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np
from scipy.special import logsumexp
from scipy.stats import norm

from .data import FeatureDataset
from .errors import CapacityError, DomainError
from .evaluation import RocCurve
from .trainer import TrainConfig, train_head

LOO_MAX_SAMPLES = 256


def brute_force_roc(scores: Sequence[float], is_member: Sequence[bool]) -> RocCurve:
    """Count TP/FP from scratch at every distinct threshold."""
    scores = [float(s) for s in scores]
    members = [bool(m) for m in is_member]
    positives = sum(members)
    negatives = len(members) - positives
    points = [(0.0, 0.0)]
    for threshold in sorted(set(scores), reverse=True):
        tp = sum(1 for s, m in zip(scores, members) if m and s >= threshold)
        fp = sum(1 for s, m in zip(scores, members) if not m and s >= threshold)
        points.append((fp / negatives, tp / positives))
    fpr, tpr = zip(*points)
    return RocCurve(np.array(fpr), np.array(tpr))


def _own_loss(head, features: np.ndarray, labels: np.ndarray) -> np.ndarray:
    logits = features @ head.weights.T + head.bias
    return logsumexp(logits, axis=1) - logits[np.arange(labels.size), labels]


def loo_retrain_oracle(
    dataset: FeatureDataset,
    train_ids: Sequence[int],
    config: TrainConfig,
    seed: int,
    probe_ids: Sequence[int],
) -> np.ndarray:
    """Loss change of each probe when the head is retrained without it.

    Retraining keeps the config, seed and id-keyed shuffle, so the removed
    record is the only difference between the two runs.
    """
    train_ids = np.asarray(train_ids, dtype=np.int64)
    probe_ids = np.asarray(probe_ids, dtype=np.int64)
    if train_ids.size > LOO_MAX_SAMPLES:
        raise CapacityError(f"leave-one-out oracle handles at most {LOO_MAX_SAMPLES} samples, got {train_ids.size}")
    outside = np.setdiff1d(probe_ids, train_ids)
    if outside.size:
        raise DomainError(f"probe {outside[0]} is not in the training set")

    def fit(ids: np.ndarray):
        return train_head(
            dataset.features[ids], dataset.labels[ids], config, seed,
            num_classes=dataset.num_classes, sample_ids=ids,
        )

    full = fit(train_ids)
    x_probe, y_probe = dataset.features[probe_ids], dataset.labels[probe_ids]
    with_probe = _own_loss(full, x_probe, y_probe)
    deltas = np.empty(probe_ids.size)
    for k, probe in enumerate(probe_ids):
        reduced = fit(train_ids[train_ids != probe])
        deltas[k] = _own_loss(reduced, x_probe[k : k + 1], y_probe[k : k + 1])[0] - with_probe[k]
    return deltas


def gaussian_analytic_tpr(mu_in: float, mu_out: float, sigma: float, fpr_target: float) -> float:
    """TPR of the optimal threshold test between two equal-variance Gaussians."""
    if not sigma > 0:
        raise DomainError(f"sigma must be positive, got {sigma}")
    return float(norm.cdf(norm.ppf(fpr_target) + (mu_in - mu_out) / sigma))


def mann_whitney_auc(scores: Sequence[float], is_member: Sequence[bool]) -> float:
    """Share of (member, non-member) pairs ranked correctly, ties counting half."""
    pos = [s for s, m in zip(scores, is_member) if m]
    neg = [s for s, m in zip(scores, is_member) if not m]
    wins = sum(1.0 if p > q else 0.5 if p == q else 0.0 for p in pos for q in neg)
    return wins / (len(pos) * len(neg)) if pos and neg else math.nan
