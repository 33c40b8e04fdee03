"""End-to-end behaviour on synthetic embeddings. Slow; run with ``pytest -m slow``."""

import json

import numpy as np
import pytest
import scipy.stats

from miaudit.attacks import (
    ATTACKS,
    AttackContext,
    RmiaConfig,
    attack_p,
    iha,
    lira_scores,
    loss_attack,
    rmia,
    run_attack,
    trajectory_mia,
)
from miaudit.data import synth_gaussian
from miaudit.evaluation import auc, roc_curve, shot_trend, tpr_at_fpr
from miaudit.manifest import parse_manifest
from miaudit.oracles import brute_force_roc, gaussian_analytic_tpr, loo_retrain_oracle
from miaudit.orchestrator import run_experiment
from miaudit.trainer import LinearHead, TrainConfig, train_head

pytestmark = pytest.mark.slow


def test_metrics_match_brute_force():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        n = int(rng.integers(2, 501))
        members = rng.random(n) < 0.5
        members[0], members[-1] = True, False
        scores = rng.integers(0, 40, n).astype(float)
        fast, slow = roc_curve((scores, members)), brute_force_roc(scores, members)
        np.testing.assert_array_equal(fast.fpr, slow.fpr)
        np.testing.assert_array_equal(fast.tpr, slow.tpr)
        target = float(rng.uniform(0.001, 0.5))
        assert tpr_at_fpr((scores, members), target).tpr == max(t for f, t in slow.points() if f <= target)


def test_attack_p_is_a_monotone_transform_of_loss():
    rng = np.random.default_rng(1)
    data = synth_gaussian(3, 5, 60, 1.0, seed=1)
    for _ in range(100):
        head = LinearHead(rng.normal(size=(3, 5)), rng.normal(size=3))
        order = rng.permutation(data.n)
        ctx = AttackContext(
            dataset=data,
            target=head,
            target_train_ids=np.sort(order[:40]),
            population_ids=np.sort(order[80:]),
        )
        ids = np.sort(order[:80])
        assert auc(attack_p(ctx, ids)) == pytest.approx(auc(loss_attack(ctx, ids)), abs=1e-9)


def test_lira_on_an_analytic_gaussian_channel():
    rng = np.random.default_rng(2)
    n, gap = 50_000, 2.0
    members = np.arange(n) < n // 2
    observed = np.where(members, gap, 0.0) + rng.standard_normal(n)
    # two IN and two OUT shadows per sample, each pair with mean mu and unit variance
    shadow = np.array([[gap - 1.0] * n, [gap + 1.0] * n, [-1.0] * n, [1.0] * n])
    shadow_in = np.array([[True] * n, [True] * n, [False] * n, [False] * n])
    scores = lira_scores(observed, shadow, shadow_in)
    measured = tpr_at_fpr((scores, members), 0.1).tpr
    assert measured == pytest.approx(gaussian_analytic_tpr(gap, 0.0, 1.0, 0.1), abs=0.02)


def test_lira_efficacy_falls_with_shots(tmp_path):
    manifest = parse_manifest(
        """
        shots = [4, 16, 64, 256]
        attacks = ["lira"]
        repeats = 5
        fpr_targets = [0.01]
        seed = 11

        [dataset.synthetic]
        classes = 10
        dim = 32
        per_class = 560
        separation = 2.0

        [shadows]
        count = 16

        [sampling]
        population_size = 40

        [training]
        epochs = 100
        batch_size = 32
        learning_rate = 0.01
        """
    ).with_overrides(output_dir=str(tmp_path))
    result = run_experiment(manifest)
    assert result.ok
    medians = {row["S"]: row["median_tpr"] for row in result.summary["rows"]}
    trend = shot_trend(medians)
    assert trend.spearman <= -0.8
    assert trend.inversions <= 1


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_iha_tracks_leave_one_out(mirrored_factory, seed):
    config = TrainConfig(epochs=200, batch_size=1000, learning_rate=1e-2, l2=5.0)
    data = mirrored_factory(32, seed)
    train_ids = data.sample_ids
    head = train_head(data.features, data.labels, config, seed, num_classes=2, sample_ids=train_ids)
    ctx = AttackContext(
        dataset=data, target=head, target_train_ids=train_ids, train_config=config, knows_training_set=True
    )
    result = iha(ctx, train_ids)
    assert result.diagnostics["stationarity"] < 1e-3
    deltas = loo_retrain_oracle(data, train_ids, config, seed, train_ids)
    assert scipy.stats.spearmanr(result.scores, deltas).statistic >= 0.8


def test_rmia_scores_fall_with_gamma(context_factory):
    data = synth_gaussian(2, 10, 200, 1.0, seed=3)
    ctx = context_factory(data, shots=50, num_shadows=4, config=TrainConfig(epochs=50, learning_rate=1e-2))
    assert ctx.pool_ids.size == 200
    previous = np.ones(200)
    for gamma in (1, 2, 4, 8, 16, 32, 64):
        scores = rmia(ctx, ctx.pool_ids, RmiaConfig(gamma=gamma)).scores
        assert np.all(scores <= previous)
        previous = scores


def test_trajectory_benefits_from_larger_distillation_sets(context_factory):
    gains = []
    for seed in range(5):
        data = synth_gaussian(2, 20, 1200, 1.0, seed=seed)
        ctx = context_factory(data, shots=16, num_shadows=4, seed=seed, population_size=60, distill_size=2048)
        small = np.sort(np.random.default_rng(seed).choice(ctx.distill_ids, size=64, replace=False))
        narrow = auc(trajectory_mia(ctx, ctx.pool_ids, distill_ids=small))
        wide = auc(trajectory_mia(ctx, ctx.pool_ids))
        gains.append(wide - narrow)
    assert np.median(gains) >= -0.02


@pytest.mark.parametrize("seed", range(5))
def test_no_signal_without_overfitting(context_factory, seed):
    data = synth_gaussian(2, 4, 1500, 1.0, seed=seed)
    mild = TrainConfig(epochs=2, batch_size=100, learning_rate=1e-3)
    ctx = context_factory(
        data, shots=500, num_shadows=4, seed=seed, config=mild, population_size=500, distill_size=200,
        knows_training_set=True,
    )
    for name in ATTACKS:
        value = auc(run_attack(name, ctx, ctx.pool_ids))
        assert 0.45 <= value <= 0.55, name


def test_every_attack_is_deterministic_across_workers(tmp_path):
    text = """
    shots = [6]
    attacks = ["loss", "attack_p", "qmia", "ml_leaks", "lira", "rmia", "trajectory", "iha"]
    repeats = 2
    seed = 4

    [dataset.synthetic]
    classes = 3
    dim = 4
    per_class = 60
    views = 2

    [shadows]
    count = 4

    [sampling]
    population_size = 40
    distill_size = 40

    [attacks_config.qmia]
    epochs = 5

    [attacks_config.rmia]
    vote_mode = "majority"

    [hpo]
    trials = 2
    """
    outputs = []
    for workers in (1, 8):
        out = tmp_path / f"w{workers}"
        result = run_experiment(parse_manifest(text).with_overrides(workers=workers, output_dir=str(out)))
        assert result.ok, result.errors
        outputs.append(
            {str(p.relative_to(out)): p.read_bytes() for p in sorted(out.rglob("*")) if p.suffix in {".csv", ".json"}}
        )
    assert outputs[0] == outputs[1]
    summary = json.loads(outputs[0]["summary.json"])
    assert {row["attack"] for row in summary["rows"]} == set(ATTACKS)
