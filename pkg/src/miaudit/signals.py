"""Per-sample membership signals for linear heads: losses, confidences, gradients, Hessians.

Parameter vectors follow :meth:`LinearHead.params`, i.e. the rows of ``[W | b]``
laid end to end, so ``P = C * (d + 1)``.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from functools import cached_property
from typing import Optional

import numpy as np
import scipy.linalg
from loguru import logger
from scipy.special import log_softmax, softmax

from .errors import CapacityError, ConfigurationError, SingularityError, ValidationError
from .trainer import LinearHead

LOGIT_EPS = 1e-7
DEFAULT_DAMPING = 1e-3
MAX_HESSIAN_PARAMS = 20000
_CHUNK = 256


@dataclass(frozen=True)
class SignalRecord:
    sample_id: int
    loss: float
    confidence: float
    logit_confidence: float
    posterior: np.ndarray


def _augment(x: np.ndarray) -> np.ndarray:
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    return np.hstack([x, np.ones((x.shape[0], 1))])


def sample_loss(head: LinearHead, x: np.ndarray, y) -> np.ndarray:
    """Cross-entropy ``-ln softmax(Wx + b)[y]``; batched when ``x`` is a matrix."""
    log_p = log_softmax(head.logits(x), axis=-1)
    y = np.asarray(y, dtype=np.int64)
    if np.any((y < 0) | (y >= head.num_classes)):
        raise ValidationError(f"label outside [0, {head.num_classes})")
    if log_p.ndim == 1:
        return float(max(-log_p[y], 0.0))
    return np.maximum(-log_p[np.arange(y.size), y], 0.0)


def true_class_confidence(head: LinearHead, x: np.ndarray, y) -> np.ndarray:
    posterior = softmax(head.logits(x), axis=-1)
    y = np.asarray(y, dtype=np.int64)
    if posterior.ndim == 1:
        return float(posterior[y])
    return posterior[np.arange(y.size), y]


def logit_scale(p, eps: float = LOGIT_EPS):
    """``ln(p / (1 - p))`` with ``p`` clamped to ``[eps, 1 - eps]``."""
    p = np.clip(np.asarray(p, dtype=np.float64), eps, 1.0 - eps)
    scaled = np.log(p) - np.log1p(-p)
    return float(scaled) if scaled.ndim == 0 else scaled


def signal_records(
    head: LinearHead, features: np.ndarray, labels: np.ndarray, sample_ids: Optional[np.ndarray] = None
) -> list[SignalRecord]:
    labels = np.asarray(labels, dtype=np.int64)
    ids = np.arange(labels.size) if sample_ids is None else np.asarray(sample_ids)
    posterior = softmax(head.logits(features), axis=1)
    losses = sample_loss(head, features, labels)
    confidence = posterior[np.arange(labels.size), labels]
    scaled = logit_scale(confidence)
    return [
        SignalRecord(int(i), float(l), float(c), float(s), row)
        for i, l, c, s, row in zip(ids, losses, confidence, np.atleast_1d(scaled), posterior)
    ]


def weight_mask(head: LinearHead) -> np.ndarray:
    return np.tile(np.r_[np.ones(head.dim), 0.0], head.num_classes)


def loss_gradient(head: LinearHead, x: np.ndarray, y, l2: float = 0.0) -> np.ndarray:
    """``d loss / d [W | b]`` flattened: ``(p - e_y) (x) [x; 1]`` plus ``l2 * W``.

    Returns shape ``(P,)`` for one sample, ``(n, P)`` for a batch.
    """
    single = np.ndim(x) == 1
    xt = _augment(x)
    y = np.atleast_1d(np.asarray(y, dtype=np.int64))
    residual = softmax(head.logits(xt[:, :-1]), axis=1)
    residual[np.arange(y.size), y] -= 1.0
    grads = (residual[:, :, None] * xt[:, None, :]).reshape(y.size, head.num_params)
    if l2:
        grads = grads + l2 * head.params() * weight_mask(head)
    return grads[0] if single else grads


def hessian_sum(head: LinearHead, features: np.ndarray) -> np.ndarray:
    num_params = head.num_params
    total = np.zeros((num_params, num_params))
    xt_all = _augment(features)
    for start in range(0, xt_all.shape[0], _CHUNK):
        xt = xt_all[start : start + _CHUNK]
        p = softmax(head.logits(xt[:, :-1]), axis=1)
        curvature = np.einsum("na,ab->nab", p, np.eye(head.num_classes)) - p[:, :, None] * p[:, None, :]
        block = np.einsum("nab,nj,nk->ajbk", curvature, xt, xt, optimize=True)
        total += block.reshape(num_params, num_params)
    return total


def sample_hessian(head: LinearHead, x: np.ndarray) -> np.ndarray:
    """Curvature ``(diag(p) - p p^T) (x) [x;1][x;1]^T`` of one sample's loss."""
    return hessian_sum(head, np.atleast_2d(x))


def _fingerprint(features: np.ndarray, labels: np.ndarray) -> str:
    digest = hashlib.blake2b(digest_size=16)
    digest.update(np.ascontiguousarray(features, dtype="<f8").tobytes())
    digest.update(np.ascontiguousarray(labels, dtype="<i8").tobytes())
    return digest.hexdigest()


@dataclass(frozen=True, eq=False)
class HeadHessian:
    matrix: np.ndarray
    damping: float
    fingerprint: str
    count: int

    @cached_property
    def factor(self):
        try:
            return scipy.linalg.cho_factor(self.matrix, lower=True, check_finite=True)
        except np.linalg.LinAlgError as exc:
            raise SingularityError(
                f"Hessian is not positive definite (damping {self.damping}); increase the damping"
            ) from exc


def empirical_hessian(
    head: LinearHead,
    features: np.ndarray,
    labels: np.ndarray,
    damping: float = DEFAULT_DAMPING,
    l2: float = 0.0,
    max_params: int = MAX_HESSIAN_PARAMS,
) -> HeadHessian:
    """Dense mean Hessian of the training loss, plus ``l2`` on ``W`` and ``damping * I``."""
    features = np.atleast_2d(np.asarray(features, dtype=np.float64))
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size == 0:
        raise ValidationError("cannot build a Hessian from an empty dataset")
    if damping < 0:
        raise ConfigurationError(f"damping must be nonnegative, got {damping}")
    if head.num_params > max_params:
        raise CapacityError(
            f"Hessian would have {head.num_params} parameters (limit {max_params}); reduce d or C"
        )
    matrix = hessian_sum(head, features) / labels.size
    matrix[np.diag_indices_from(matrix)] += l2 * weight_mask(head) + damping
    matrix = 0.5 * (matrix + matrix.T)
    return HeadHessian(
        matrix=matrix,
        damping=damping,
        fingerprint=_fingerprint(features, labels),
        count=int(labels.size),
    )


def ihvp(hessian: HeadHessian, v: np.ndarray) -> np.ndarray:
    """Solve ``H u = v`` through the Cholesky factor of ``H``."""
    v = np.asarray(v, dtype=np.float64)
    u = scipy.linalg.cho_solve(hessian.factor, v)
    norm = np.linalg.norm(v)
    if norm > 0:
        residual = np.linalg.norm(hessian.matrix @ u - v) / norm
        if residual >= 1e-8:
            logger.warning(f"iHVP relative residual {residual:.2e}; consider a larger damping")
    return u
