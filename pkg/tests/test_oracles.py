import numpy as np
import pytest

from miaudit.data import FeatureDataset, synth_gaussian
from miaudit.errors import CapacityError, DomainError
from miaudit.oracles import brute_force_roc, gaussian_analytic_tpr, loo_retrain_oracle, mann_whitney_auc
from miaudit.trainer import TrainConfig

CONVEX = TrainConfig(epochs=200, batch_size=1000, learning_rate=1e-2, l2=3.0)
STATIONARY = TrainConfig(epochs=200, batch_size=1000, learning_rate=1e-2, l2=5.0)


def test_brute_force_roc_minimal():
    assert brute_force_roc([1.0, 0.0], [True, False]).points() == [(0.0, 0.0), (0.0, 1.0), (1.0, 1.0)]


def test_brute_force_roc_ties():
    curve = brute_force_roc([1.0, 1.0, 0.0], [True, False, False])
    assert curve.points() == [(0.0, 0.0), (0.5, 1.0), (1.0, 1.0)]


def test_mann_whitney_half_credit():
    assert mann_whitney_auc([1.0, 1.0], [True, False]) == 0.5
    assert np.isnan(mann_whitney_auc([1.0], [True]))


def test_loo_deltas_nonnegative_and_deterministic():
    data = synth_gaussian(2, 2, 12, 1.0, seed=0)
    train = np.arange(data.n)
    probes = train[::4]
    first = loo_retrain_oracle(data, train, CONVEX, seed=0, probe_ids=probes)
    second = loo_retrain_oracle(data, train, CONVEX, seed=0, probe_ids=probes)
    np.testing.assert_array_equal(first, second)
    assert np.all(first >= -1e-6)


def test_loo_duplicated_sample_barely_moves(mirrored_factory):
    base = mirrored_factory(32, 0)
    features = np.vstack([base.features, base.features[:1]])
    data = FeatureDataset(features, np.r_[base.labels, base.labels[0]], num_classes=2)
    delta = loo_retrain_oracle(data, np.arange(data.n), STATIONARY, seed=0, probe_ids=[0])
    assert abs(delta[0]) <= 10 * STATIONARY.learning_rate


def test_loo_probe_outside_training_set():
    data = synth_gaussian(2, 2, 5, 1.0, seed=0)
    with pytest.raises(DomainError, match="probe 9"):
        loo_retrain_oracle(data, np.arange(5), CONVEX, seed=0, probe_ids=[9])


def test_loo_capacity():
    data = synth_gaussian(2, 2, 150, 1.0, seed=0)
    with pytest.raises(CapacityError):
        loo_retrain_oracle(data, np.arange(data.n), CONVEX, seed=0, probe_ids=[0])


def test_gaussian_analytic_tpr():
    assert gaussian_analytic_tpr(0.0, 0.0, 1.0, 0.05) == pytest.approx(0.05)
    assert gaussian_analytic_tpr(1.0, -1.0, 1.0, 0.1) == pytest.approx(0.7637, abs=1e-4)
    gaps = [gaussian_analytic_tpr(gap, 0.0, 1.0, 0.01) for gap in (0.0, 0.5, 1.0, 2.0, 4.0)]
    assert gaps == sorted(gaps)
    with pytest.raises(DomainError):
        gaussian_analytic_tpr(0.0, 0.0, 0.0, 0.1)
