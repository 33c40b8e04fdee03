"""Feature-conditioned quantile regression used by QMIA."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from sklearn.preprocessing import StandardScaler

from .errors import ConfigurationError, DivergenceError


def pinball_loss(residual, level: float):
    """Pinball loss of ``residual = target - prediction`` at quantile ``level``."""
    residual = np.asarray(residual, dtype=np.float64)
    loss = np.where(residual >= 0, level * residual, (level - 1.0) * residual)
    return float(loss) if loss.ndim == 0 else loss


@dataclass(frozen=True)
class RegressorConfig:
    hidden_width: int = 64
    epochs: int = 100
    learning_rate: float = 1e-2
    batch_size: int = 32

    def __post_init__(self) -> None:
        if self.hidden_width < 0 or self.epochs < 1 or self.batch_size < 1 or self.learning_rate <= 0:
            raise ConfigurationError(f"invalid quantile regressor config {self}")


class QuantileRegressor:
    """One hidden ReLU layer, one output per quantile level, trained with SGD on pinball loss.

    ``hidden_width = 0`` leaves only the output bias, i.e. marginal quantiles.
    Predictions are sorted across levels so quantiles never cross.
    """

    def __init__(self, levels: Sequence[float], config: RegressorConfig = RegressorConfig(), seed: int = 0) -> None:
        levels = np.asarray(sorted(levels), dtype=np.float64)
        if levels.size == 0 or np.any((levels <= 0) | (levels >= 1)):
            raise ConfigurationError(f"quantile levels must lie in (0, 1), got {levels.tolist()}")
        self.levels = levels
        self.config = config
        self.seed = seed
        self.scaler = StandardScaler()

    def _forward(self, x: np.ndarray):
        if self.config.hidden_width == 0:
            return None, np.broadcast_to(self.b2, (x.shape[0], self.levels.size))
        hidden = np.maximum(x @ self.w1 + self.b1, 0.0)
        return hidden, hidden @ self.w2 + self.b2

    def fit(self, features: np.ndarray, targets: np.ndarray) -> QuantileRegressor:
        x = self.scaler.fit_transform(np.asarray(features, dtype=np.float64))
        y = np.asarray(targets, dtype=np.float64)
        rng = np.random.default_rng(self.seed)
        width, dim = self.config.hidden_width, x.shape[1]
        self.w1 = rng.normal(0.0, np.sqrt(2.0 / dim), size=(dim, width))
        self.b1 = np.zeros(width)
        self.w2 = rng.normal(0.0, 0.01, size=(width, self.levels.size))
        self.b2 = np.quantile(y, self.levels)
        lr, batch_size = self.config.learning_rate, self.config.batch_size
        step = 0
        for _ in range(self.config.epochs):
            order = rng.permutation(y.size)
            for start in range(0, y.size, batch_size):
                batch = order[start : start + batch_size]
                hidden, pred = self._forward(x[batch])
                residual = y[batch, None] - pred
                loss = np.mean(pinball_loss(residual, self.levels))
                if not np.isfinite(loss):
                    raise DivergenceError("quantile regressor diverged", step=step)
                # d pinball / d prediction
                grad_out = (np.where(residual < 0, 1.0, 0.0) - self.levels) / residual.size
                self.b2 = self.b2 - lr * grad_out.sum(axis=0)
                if hidden is not None:
                    grad_hidden = (grad_out @ self.w2.T) * (hidden > 0)
                    self.w2 = self.w2 - lr * hidden.T @ grad_out
                    self.w1 = self.w1 - lr * x[batch].T @ grad_hidden
                    self.b1 = self.b1 - lr * grad_hidden.sum(axis=0)
                step += 1
        return self

    def predict(self, features: np.ndarray) -> np.ndarray:
        x = self.scaler.transform(np.asarray(features, dtype=np.float64))
        _, pred = self._forward(x)
        return np.sort(pred, axis=1)

    def predict_level(self, features: np.ndarray, level: float) -> np.ndarray:
        matches = np.flatnonzero(np.isclose(self.levels, level))
        if matches.size == 0:
            raise ConfigurationError(f"level {level} was not fitted (levels {self.levels.tolist()})")
        return self.predict(features)[:, matches[0]]
