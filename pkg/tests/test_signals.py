import math

import numpy as np
import pytest
from scipy.special import expit

from miaudit.errors import CapacityError, SingularityError
from miaudit.signals import (
    HeadHessian,
    empirical_hessian,
    ihvp,
    logit_scale,
    loss_gradient,
    sample_hessian,
    sample_loss,
    signal_records,
    true_class_confidence,
)
from miaudit.trainer import LinearHead


def random_head(rng, dim=3, num_classes=4, scale=1.0):
    return LinearHead(scale * rng.normal(size=(num_classes, dim)), scale * rng.normal(size=num_classes))


def test_sample_loss_closed_forms():
    assert sample_loss(LinearHead.zeros(5, 10), np.ones(5), 3) == pytest.approx(math.log(10))
    head = LinearHead(np.zeros((2, 1)), np.array([math.log(3), 0.0]))
    assert sample_loss(head, np.array([2.0]), 0) == pytest.approx(-math.log(0.75), abs=1e-6)
    saturated = LinearHead(np.zeros((2, 1)), np.array([100.0, -100.0]))
    assert 0 <= sample_loss(saturated, np.array([0.0]), 0) <= 1e-6


def test_records_are_consistent():
    rng = np.random.default_rng(0)
    head = random_head(rng)
    x, y = rng.normal(size=(20, 3)), rng.integers(0, 4, 20)
    for record in signal_records(head, x, y, sample_ids=np.arange(100, 120)):
        assert record.loss == pytest.approx(-math.log(record.confidence), abs=1e-9)
        assert record.logit_confidence == pytest.approx(logit_scale(record.confidence))
        assert record.posterior.sum() == pytest.approx(1.0)
    np.testing.assert_allclose(true_class_confidence(head, x, y), np.exp(-sample_loss(head, x, y)))


def test_logit_scale():
    assert logit_scale(0.5) == pytest.approx(0.0, abs=1e-15)
    assert logit_scale(1.0) == pytest.approx(math.log((1 - 1e-7) / 1e-7), rel=1e-9)
    assert logit_scale(1.0) == pytest.approx(16.1181, abs=1e-4)
    t = np.linspace(-10, 10, 41)
    np.testing.assert_allclose(logit_scale(expit(t)), t, atol=1e-5)


def test_gradient_hand_values():
    grad = loss_gradient(LinearHead.zeros(1, 2), np.array([1.0]), 0)
    # rows of [W | b]: class 0 then class 1
    np.testing.assert_allclose(grad, [-0.5, -0.5, 0.5, 0.5])


def test_gradient_zero_at_exact_fit():
    head = LinearHead(np.zeros((2, 1)), np.array([800.0, -800.0]))
    np.testing.assert_array_equal(loss_gradient(head, np.array([1.0]), 0), np.zeros(4))


def test_gradient_matches_finite_differences():
    rng = np.random.default_rng(1)
    for _ in range(20):
        head = random_head(rng)
        x, y = rng.normal(size=3), int(rng.integers(0, 4))
        theta = head.params()
        numeric = np.empty_like(theta)
        for k in range(theta.size):
            step = np.zeros_like(theta)
            step[k] = 1e-6
            plus = LinearHead.from_params(theta + step, 3, 4)
            minus = LinearHead.from_params(theta - step, 3, 4)
            numeric[k] = (sample_loss(plus, x, y) - sample_loss(minus, x, y)) / 2e-6
        analytic = loss_gradient(head, x, y)
        assert np.linalg.norm(analytic - numeric) / np.linalg.norm(analytic) < 1e-5


def test_gradient_l2_term():
    rng = np.random.default_rng(2)
    head = random_head(rng, dim=2, num_classes=2)
    plain = loss_gradient(head, np.ones(2), 1)
    decayed = loss_gradient(head, np.ones(2), 1, l2=0.5)
    np.testing.assert_allclose(decayed - plain, 0.5 * np.array([*head.weights[0], 0, *head.weights[1], 0]))


def test_batched_gradient_matches_rows():
    rng = np.random.default_rng(3)
    head = random_head(rng)
    x, y = rng.normal(size=(6, 3)), rng.integers(0, 4, 6)
    batch = loss_gradient(head, x, y)
    for k in range(6):
        np.testing.assert_allclose(batch[k], loss_gradient(head, x[k], y[k]))


def test_hessian_hand_computation():
    hessian = empirical_hessian(LinearHead.zeros(1, 2), np.array([[1.0]]), np.array([0]), damping=0.0)
    expected = np.kron(np.array([[0.25, -0.25], [-0.25, 0.25]]), np.ones((2, 2)))
    np.testing.assert_allclose(hessian.matrix, expected)
    np.testing.assert_allclose(sample_hessian(LinearHead.zeros(1, 2), np.array([1.0])), expected)


def test_hessian_matches_finite_differenced_gradient():
    rng = np.random.default_rng(4)
    head = random_head(rng, dim=2, num_classes=3)
    x, y = rng.normal(size=(8, 2)), rng.integers(0, 3, 8)
    hessian = empirical_hessian(head, x, y, damping=0.0).matrix
    theta = head.params()
    numeric = np.empty_like(hessian)
    for k in range(theta.size):
        step = np.zeros_like(theta)
        step[k] = 1e-5
        plus = loss_gradient(LinearHead.from_params(theta + step, 2, 3), x, y).mean(axis=0)
        minus = loss_gradient(LinearHead.from_params(theta - step, 2, 3), x, y).mean(axis=0)
        numeric[:, k] = (plus - minus) / 2e-5
    assert np.abs(hessian - numeric).max() / np.abs(hessian).max() < 1e-4


def test_hessian_damping_and_symmetry():
    rng = np.random.default_rng(5)
    head = random_head(rng)
    x, y = rng.normal(size=(30, 3)), rng.integers(0, 4, 30)
    bare = empirical_hessian(head, x, y, damping=0.0)
    damped = empirical_hessian(head, x, y, damping=1.0)
    v = rng.normal(size=head.num_params)
    np.testing.assert_allclose(damped.matrix @ v, v + bare.matrix @ v)
    assert np.abs(damped.matrix - damped.matrix.T).max() < 1e-12
    for _ in range(100):
        v = rng.normal(size=head.num_params)
        assert v @ damped.matrix @ v >= (v @ v) * (1.0 - 1e-9)
    assert damped.count == 30
    assert damped.fingerprint == bare.fingerprint


def test_hessian_capacity():
    with pytest.raises(CapacityError, match="reduce d or C"):
        empirical_hessian(LinearHead.zeros(10, 10), np.zeros((1, 10)), np.array([0]), max_params=50)


def test_ihvp_identity_and_zero():
    identity = HeadHessian(np.eye(5), 0.0, "", 1)
    v = np.arange(5.0)
    np.testing.assert_allclose(ihvp(identity, v), v)
    np.testing.assert_array_equal(ihvp(identity, np.zeros(5)), np.zeros(5))


def test_ihvp_matches_inverse():
    rng = np.random.default_rng(6)
    a = rng.normal(size=(16, 16))
    spd = a @ a.T + 16 * np.eye(16)
    hessian = HeadHessian(spd, 0.0, "", 1)
    v = rng.normal(size=16)
    u = ihvp(hessian, v)
    np.testing.assert_allclose(u, np.linalg.inv(spd) @ v, atol=1e-8)
    assert np.linalg.norm(spd @ u - v) / np.linalg.norm(v) < 1e-8


def test_ihvp_singular():
    hessian = HeadHessian(np.zeros((3, 3)), 0.0, "", 1)
    with pytest.raises(SingularityError, match="damping"):
        ihvp(hessian, np.ones(3))
