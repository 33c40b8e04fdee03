import numpy as np
import pytest
from loguru import logger

from miaudit.attacks import AttackContext
from miaudit.data import FeatureDataset, ShotSpec, make_shadow_splits, sample_shots, synth_gaussian
from miaudit.trainer import TrainConfig, train_head

OVERFIT = TrainConfig(epochs=200, batch_size=10, learning_rate=1e-2)


@pytest.fixture
def log_file(tmp_path):
    """Route loguru to a file so tests can assert on what was logged."""
    path = tmp_path / "logfile.log"
    logger.remove()
    sink = logger.add(path, level="DEBUG")
    yield path
    logger.remove(sink)


@pytest.fixture(scope="session")
def small_dataset():
    return synth_gaussian(3, 4, 60, 2.0, seed=0)


@pytest.fixture(scope="session")
def view_dataset():
    return synth_gaussian(2, 3, 60, 2.0, seed=1, views=2, view_noise=0.05)


def build_context(dataset, shots, num_shadows, seed=0, config=OVERFIT, population_size=60, distill_size=0, **extra):
    """Balanced target/shadow setup over ``2 * shots`` pool samples per class."""
    pool_ids = sample_shots(dataset, ShotSpec(2 * shots, dataset.num_classes), seed)
    plan = make_shadow_splits(
        pool_ids, num_shadows, "balanced", seed + 1, labels=dataset.labels[pool_ids], shots=shots
    )
    rest = np.random.default_rng(seed + 2).permutation(np.setdiff1d(dataset.sample_ids, pool_ids))
    heads = [
        train_head(
            dataset.features[plan.members_of(m)],
            dataset.labels[plan.members_of(m)],
            config,
            seed=100 + m,
            num_classes=dataset.num_classes,
            sample_ids=plan.members_of(m),
        )
        for m in range(num_shadows + 1)
    ]
    return AttackContext(
        dataset=dataset,
        target=heads[0],
        target_train_ids=plan.members_of(0),
        shadows=heads[1:],
        pool_ids=pool_ids,
        shadow_members=plan.shadow_members,
        population_ids=np.sort(rest[:population_size]),
        distill_ids=np.sort(rest[population_size : population_size + distill_size]),
        train_config=config,
        seed=seed,
        **extra,
    )


@pytest.fixture(scope="session")
def overfit_context():
    dataset = synth_gaussian(2, 20, 80, 1.0, seed=0)
    return build_context(dataset, shots=8, num_shadows=8, distill_size=40)


@pytest.fixture(scope="session")
def context_factory():
    return build_context


def build_mirrored(per_class, seed, separation=2.0):
    """Two classes where class 1 is class 0 with its coordinates swapped.

    The class-bias gradient of any mirror-symmetric head is exactly zero on
    this data, so full-batch training reaches a stationary point once ``W``
    has converged.
    """
    rng = np.random.default_rng(seed)
    base = rng.standard_normal((per_class, 2)) + np.array([separation, 0.0])
    features = np.vstack([base, base[:, ::-1]])
    return FeatureDataset(features, np.repeat([0, 1], per_class), num_classes=2)


@pytest.fixture(scope="session")
def mirrored_factory():
    return build_mirrored
