"""Score-based membership inference attacks against linear heads.

Every attack returns an :class:`AttackScoreSet` whose scores grow with how
member-like a sample looks.
"""

from __future__ import annotations

import csv
import warnings
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Optional, Sequence, Union

import numpy as np
import scipy.stats
from loguru import logger
from scipy.special import softmax
from sklearn.exceptions import ConvergenceWarning
from sklearn.neural_network import MLPClassifier
from sklearn.pipeline import make_pipeline
from sklearn.preprocessing import StandardScaler

from .data import FeatureDataset, derive_seed
from .errors import (
    CapacityError,
    ConfigurationError,
    ContaminationError,
    CoverageError,
    ThreatModelError,
    ValidationError,
)
from .quantile import QuantileRegressor, RegressorConfig
from .signals import (
    DEFAULT_DAMPING,
    MAX_HESSIAN_PARAMS,
    HeadHessian,
    hessian_sum,
    weight_mask,
    ihvp,
    logit_scale,
    loss_gradient,
    sample_loss,
)
from .trainer import DEFAULT_DISTILL_EPOCHS, LinearHead, TrainConfig, distill

SIGMA_FLOOR = 1e-3
RATIO_EPS = 1e-12
STATIONARITY_TOLERANCE = 1e-3
CLASSIFIER_WIDTH = 64
CLASSIFIER_EPOCHS = 100
CLASSIFIER_LR = 1e-2
SCORE_CSV_HEADER = ("attack", "sample_id", "score", "is_member", "repeat", "target_index")


@dataclass(frozen=True, eq=False)
class AttackContext:
    """What the attacker works with for one target model.

    ``shadow_members[m]`` marks which ``pool_ids`` trained ``shadows[m]``.
    ``target_train_ids`` is the ground truth used to label scores; IHA may
    only read it when ``knows_training_set`` is set.
    """

    dataset: FeatureDataset
    target: LinearHead
    target_train_ids: np.ndarray
    shadows: Sequence[LinearHead] = ()
    pool_ids: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    shadow_members: np.ndarray = field(default_factory=lambda: np.zeros((0, 0), dtype=bool))
    population_ids: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    distill_ids: Optional[np.ndarray] = None
    train_config: Optional[TrainConfig] = None
    knows_training_set: bool = False
    seed: int = 0

    def __post_init__(self) -> None:
        object.__setattr__(self, "target_train_ids", np.asarray(self.target_train_ids, dtype=np.int64))
        object.__setattr__(self, "pool_ids", np.asarray(self.pool_ids, dtype=np.int64))
        object.__setattr__(self, "population_ids", np.asarray(self.population_ids, dtype=np.int64))
        if len(self.shadows):
            members = np.asarray(self.shadow_members, dtype=bool).reshape(len(self.shadows), -1)
        else:
            members = np.zeros((0, self.pool_ids.size), dtype=bool)
        object.__setattr__(self, "shadow_members", members)
        if len(self.shadows) and members.shape[1] != self.pool_ids.size:
            raise ConfigurationError(
                f"shadow membership covers {members.shape[1]} samples, pool has {self.pool_ids.size}"
            )
        overlap = np.intersect1d(self.population_ids, self.target_train_ids)
        if overlap.size:
            raise ConfigurationError(f"population shares {overlap.size} samples with the target training set")

    @property
    def num_shadows(self) -> int:
        return len(self.shadows)

    def is_member(self, ids: np.ndarray) -> np.ndarray:
        return np.isin(ids, self.target_train_ids)

    def shadow_in(self, ids: np.ndarray) -> np.ndarray:
        """``(M, len(ids))`` membership of ``ids`` in each shadow's training set."""
        positions = np.full(self.dataset.n, -1, dtype=np.int64)
        positions[self.pool_ids] = np.arange(self.pool_ids.size)
        where = positions[ids]
        result = np.zeros((self.num_shadows, ids.size), dtype=bool)
        known = where >= 0
        result[:, known] = self.shadow_members[:, where[known]]
        return result

    def shadow_train_ids(self, index: int) -> np.ndarray:
        return self.pool_ids[self.shadow_members[index]]


@dataclass(frozen=True, eq=False)
class AttackScoreSet:
    attack: str
    sample_ids: np.ndarray
    scores: np.ndarray
    is_member: np.ndarray
    config: dict = field(default_factory=dict)
    diagnostics: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        ids = np.asarray(self.sample_ids, dtype=np.int64)
        scores = np.asarray(self.scores, dtype=np.float64)
        members = np.asarray(self.is_member, dtype=bool)
        if not ids.shape == scores.shape == members.shape:
            raise ValidationError("sample_ids, scores and is_member must have one entry per sample")
        if not np.all(np.isfinite(scores)):
            bad = ids[~np.isfinite(scores)][0]
            raise ValidationError(f"{self.attack} produced a non-finite score for sample {bad}")
        object.__setattr__(self, "sample_ids", ids)
        object.__setattr__(self, "scores", scores)
        object.__setattr__(self, "is_member", members)

    def check_labels(self) -> None:
        if self.is_member.all() or not self.is_member.any():
            raise ConfigurationError(f"{self.attack} scores need both members and non-members")


def _score_set(ctx: AttackContext, name: str, ids: np.ndarray, scores, config=None, diagnostics=None):
    return AttackScoreSet(name, ids, scores, ctx.is_member(ids), dict(config or {}), dict(diagnostics or {}))


def _ids(sample_ids) -> np.ndarray:
    return np.asarray(sample_ids, dtype=np.int64)


def _confidence_rows(head: LinearHead, dataset: FeatureDataset, ids: np.ndarray, views: int) -> np.ndarray:
    """True-class posterior for the original row plus ``views`` views, ``(1 + views, len(ids))``."""
    if views > dataset.num_views:
        raise ConfigurationError(f"{views} query views requested, store has {dataset.num_views}")
    rows = dataset.query_rows(ids)[:, : 1 + views, :]
    posterior = softmax(head.logits(rows), axis=-1)
    labels = dataset.labels[ids]
    return posterior[np.arange(ids.size), :, labels].T


def _attack_classifier(seed: int):
    return make_pipeline(
        StandardScaler(),
        MLPClassifier(
            hidden_layer_sizes=(CLASSIFIER_WIDTH,),
            solver="sgd",
            learning_rate_init=CLASSIFIER_LR,
            momentum=0.0,
            max_iter=CLASSIFIER_EPOCHS,
            n_iter_no_change=CLASSIFIER_EPOCHS,
            random_state=seed % (2**32),
        ),
    )


def _fit_classifier(features: np.ndarray, labels: np.ndarray, seed: int):
    model = _attack_classifier(seed)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", ConvergenceWarning)
        model.fit(features, labels)
    return model


def loss_attack(ctx: AttackContext, sample_ids) -> AttackScoreSet:
    ids = _ids(sample_ids)
    losses = sample_loss(ctx.target, ctx.dataset.features[ids], ctx.dataset.labels[ids])
    return _score_set(ctx, "loss", ids, -np.atleast_1d(losses))


def _population_rank(reference: np.ndarray, losses: np.ndarray) -> np.ndarray:
    """Mid-rank share of ``reference`` above each loss, interpolated between reference values.

    At a reference value the score is the share strictly greater plus half the
    share equal. Between adjacent reference values it is linear, below the
    smallest it runs linearly up to 1 at zero loss, and above the largest it
    decays as ``1 / (1 + loss)``, so the score strictly decreases in the loss.
    """
    m = reference.size
    knots, counts = np.unique(reference, return_counts=True)
    greater = m - np.cumsum(counts)
    levels = (greater + 0.5 * counts) / m
    scores = np.interp(losses, knots, levels)
    low, high = losses < knots[0], losses > knots[-1]
    scores[low] = 1.0 - (1.0 - levels[0]) * losses[low] / knots[0]
    scores[high] = levels[-1] * (1.0 + knots[-1]) / (1.0 + losses[high])
    return scores


def attack_p(ctx: AttackContext, sample_ids) -> AttackScoreSet:
    """Population rank of the sample's loss, see :func:`_population_rank`."""
    ids = _ids(sample_ids)
    population = ctx.population_ids
    if population.size == 0:
        raise ConfigurationError("Attack-P needs a non-empty population")
    if population.size < 30:
        logger.warning(f"Attack-P population has only {population.size} samples")
    data = ctx.dataset
    reference = np.atleast_1d(sample_loss(ctx.target, data.features[population], data.labels[population]))
    losses = np.atleast_1d(sample_loss(ctx.target, data.features[ids], data.labels[ids])).astype(np.float64)
    scores = _population_rank(reference, losses)
    return _score_set(ctx, "attack_p", ids, scores, {"population": int(population.size)})


def qmia(
    ctx: AttackContext,
    sample_ids,
    quantile_levels: Sequence[float] = (0.9, 0.95, 0.99),
    regressor_config: RegressorConfig = RegressorConfig(),
    reference_level: float = 0.95,
) -> AttackScoreSet:
    """Logit confidence minus a per-sample quantile regressed on population confidences."""
    ids = _ids(sample_ids)
    population = ctx.population_ids
    if population.size == 0:
        raise ConfigurationError("QMIA needs a non-empty population to fit its regressor")
    levels = sorted(set(float(level) for level in quantile_levels) | {float(reference_level)})
    data = ctx.dataset
    targets = logit_scale(_confidence_rows(ctx.target, data, population, 0)[0])
    regressor = QuantileRegressor(levels, regressor_config, seed=derive_seed(ctx.seed, "qmia"))
    regressor.fit(data.features[population], targets)
    threshold = regressor.predict_level(data.features[ids], reference_level)
    observed = logit_scale(_confidence_rows(ctx.target, data, ids, 0)[0])
    config = {"levels": levels, "reference_level": reference_level, "hidden_width": regressor_config.hidden_width}
    return _score_set(ctx, "qmia", ids, np.atleast_1d(observed) - threshold, config)


def top_k_features(posteriors: np.ndarray, k: int) -> np.ndarray:
    """Largest ``k`` posteriors per row, in descending order."""
    return -np.sort(-np.atleast_2d(posteriors), axis=1)[:, :k]


def ml_leaks(ctx: AttackContext, sample_ids, k_top: int = 3, shadow_index: int = 0) -> AttackScoreSet:
    ids = _ids(sample_ids)
    if ctx.num_shadows <= shadow_index:
        raise ConfigurationError(f"ML-Leaks needs shadow model {shadow_index}, only {ctx.num_shadows} available")
    data = ctx.dataset
    k = min(k_top, data.num_classes)
    labels = ctx.shadow_members[shadow_index]
    if labels.all() or not labels.any():
        raise ConfigurationError("ML-Leaks shadow model needs both members and non-members in the pool")
    shadow = ctx.shadows[shadow_index]
    train_x = top_k_features(softmax(shadow.logits(data.features[ctx.pool_ids]), axis=1), k)
    model = _fit_classifier(train_x, labels, derive_seed(ctx.seed, "ml-leaks", shadow_index))
    query_x = top_k_features(softmax(ctx.target.logits(data.features[ids]), axis=1), k)
    scores = model.predict_proba(query_x)[:, 1]
    return _score_set(ctx, "ml_leaks", ids, scores, {"k": k, "shadow_index": shadow_index})


def lira_scores(
    observed: np.ndarray,
    shadow_observed: np.ndarray,
    shadow_in: np.ndarray,
    variance_mode: str = "per-sample",
    sigma_floor: float = SIGMA_FLOOR,
) -> np.ndarray:
    """Online likelihood-ratio scores from logit confidences.

    ``observed`` has one entry per sample, ``shadow_observed`` and
    ``shadow_in`` have shape ``(M, n)``.
    """
    shadow_in = np.asarray(shadow_in, dtype=bool)
    counts_in = shadow_in.sum(axis=0)
    counts_out = (~shadow_in).sum(axis=0)

    def moments(mask, counts):
        mean = np.where(mask, shadow_observed, 0.0).sum(axis=0) / counts
        var = np.where(mask, (shadow_observed - mean) ** 2, 0.0).sum(axis=0) / counts
        return mean, var

    mu_in, var_in = moments(shadow_in, counts_in)
    mu_out, var_out = moments(~shadow_in, counts_out)
    if variance_mode == "global":
        var_in = np.full_like(var_in, var_in.mean())
        var_out = np.full_like(var_out, var_out.mean())
    elif variance_mode != "per-sample":
        raise ConfigurationError(f"unknown variance mode {variance_mode!r}, expected 'per-sample' or 'global'")
    floor = sigma_floor**2
    return scipy.stats.norm.logpdf(observed, mu_in, np.sqrt(var_in + floor)) - scipy.stats.norm.logpdf(
        observed, mu_out, np.sqrt(var_out + floor)
    )


def lira_coverage(ctx: AttackContext, sample_ids, minimum: int = 2) -> np.ndarray:
    """Boolean mask of ``sample_ids`` with at least ``minimum`` IN and OUT shadows."""
    shadow_in = ctx.shadow_in(_ids(sample_ids))
    return (shadow_in.sum(axis=0) >= minimum) & ((~shadow_in).sum(axis=0) >= minimum)


def lira(
    ctx: AttackContext, sample_ids, variance_mode: str = "per-sample", query_views: int = 0
) -> AttackScoreSet:
    ids = _ids(sample_ids)
    covered = lira_coverage(ctx, ids)
    if not covered.all():
        raise CoverageError("LiRA needs at least 2 IN and 2 OUT shadow models per sample", ids[~covered])
    data = ctx.dataset
    observed = logit_scale(_confidence_rows(ctx.target, data, ids, query_views)).mean(axis=0)
    shadow_observed = np.stack(
        [logit_scale(_confidence_rows(shadow, data, ids, query_views)).mean(axis=0) for shadow in ctx.shadows]
    )
    scores = lira_scores(np.atleast_1d(observed), shadow_observed.reshape(ctx.num_shadows, -1), ctx.shadow_in(ids), variance_mode)
    config = {"variance_mode": variance_mode, "query_views": query_views, "sigma_floor": SIGMA_FLOOR}
    return _score_set(ctx, "lira", ids, scores, config)


@dataclass(frozen=True)
class RmiaConfig:
    gamma: float = 2.0
    vote_mode: str = "single"

    def __post_init__(self) -> None:
        if not self.gamma >= 1:
            raise ConfigurationError(f"RMIA gamma must be at least 1, got {self.gamma}")
        if self.vote_mode not in {"single", "majority"}:
            raise ConfigurationError(f"unknown RMIA vote mode {self.vote_mode!r}, expected 'single' or 'majority'")


def rmia(ctx: AttackContext, sample_ids, cfg: RmiaConfig = RmiaConfig()) -> AttackScoreSet:
    """Fraction of population samples ``z`` with ``ratio(x) / ratio(z) >= gamma``.

    ``ratio(u)`` is the target's true-class posterior over the shadow average.
    """
    ids = _ids(sample_ids)
    population = ctx.population_ids
    if population.size == 0:
        raise ConfigurationError("RMIA needs a non-empty population")
    if ctx.num_shadows == 0:
        raise ConfigurationError("RMIA needs at least one shadow model")
    data = ctx.dataset
    views = data.num_views if cfg.vote_mode == "majority" else 0
    clamped = 0

    def ratio(targets: np.ndarray) -> np.ndarray:
        nonlocal clamped
        marginal = np.mean([_confidence_rows(shadow, data, targets, views) for shadow in ctx.shadows], axis=0)
        clamped += int(np.count_nonzero(marginal < RATIO_EPS))
        return _confidence_rows(ctx.target, data, targets, views) / np.maximum(marginal, RATIO_EPS)

    ratio_x, ratio_z = ratio(ids), ratio(population)
    num_views = ratio_x.shape[0]
    scores = np.empty(ids.size)
    chunk = max(1, 2_000_000 // max(1, population.size * num_views))
    with np.errstate(divide="ignore", invalid="ignore"):
        for start in range(0, ids.size, chunk):
            stop = start + chunk
            passed = ratio_x[:, start:stop, None] / ratio_z[:, None, :] >= cfg.gamma
            votes = passed.sum(axis=0)
            scores[start:stop] = np.mean(2 * votes > num_views, axis=1)
    if clamped:
        logger.warning(f"RMIA clamped {clamped} shadow-average posteriors at {RATIO_EPS}")
    config = {"gamma": cfg.gamma, "vote_mode": cfg.vote_mode}
    return _score_set(ctx, "rmia", ids, scores, config, {"clamped": clamped})


def trajectory_mia(
    ctx: AttackContext,
    sample_ids,
    distill_ids: Optional[np.ndarray] = None,
    distill_epochs: int = DEFAULT_DISTILL_EPOCHS,
    shadow_count: int = 3,
) -> AttackScoreSet:
    """Loss trajectories under distillation, classified by an MLP trained on shadow trajectories.

    Scores are averaged over the first ``shadow_count`` shadows.
    """
    ids = _ids(sample_ids)
    distill_ids = _ids(ctx.distill_ids if distill_ids is None else distill_ids)
    if distill_ids.size == 0:
        raise ConfigurationError("Trajectory-MIA needs a non-empty distillation set")
    if ctx.num_shadows == 0:
        raise ConfigurationError("Trajectory-MIA needs at least one shadow model")
    used = min(shadow_count, ctx.num_shadows)
    for name, train_ids in [("target", ctx.target_train_ids)] + [
        (f"shadow {m}", ctx.shadow_train_ids(m)) for m in range(used)
    ]:
        overlap = np.intersect1d(distill_ids, train_ids)
        if overlap.size:
            raise ContaminationError(f"distillation set shares {overlap.size} samples with the {name} training set")
    config = ctx.train_config or TrainConfig()
    target_run = distill(
        ctx.target, ctx.dataset, distill_ids, ids, distill_epochs, config, derive_seed(ctx.seed, "trajectory-target")
    )
    scores = np.zeros(ids.size)
    for m in range(used):
        shadow_run = distill(
            ctx.shadows[m], ctx.dataset, distill_ids, ctx.pool_ids, distill_epochs, config,
            derive_seed(ctx.seed, "trajectory", m),
        )
        labels = ctx.shadow_members[m]
        if labels.all() or not labels.any():
            raise ConfigurationError(f"shadow {m} needs both members and non-members in the pool")
        model = _fit_classifier(shadow_run.trajectories, labels, derive_seed(ctx.seed, "trajectory-clf", m))
        scores += model.predict_proba(target_run.trajectories)[:, 1]
    config_snapshot = {"distill_size": int(distill_ids.size), "distill_epochs": distill_epochs, "shadows": used}
    return _score_set(ctx, "trajectory", ids, scores / used, config_snapshot)


def iha(ctx: AttackContext, sample_ids, damping: float = DEFAULT_DAMPING) -> AttackScoreSet:
    """Inverse-Hessian attack.

    For a sample ``x`` the attacker knows every other training record. With
    ``H`` and ``g_rest`` the damped Hessian and gradient of the training
    objective over those records at the target parameters, ``u = H^-1 g_rest``
    is the Newton step towards the model trained without ``x``, and the score
    ``-grad_x . u`` is the first-order increase of ``x``'s loss along that
    step. Members of a converged model score about ``g^T H^-1 g / (n-1)``;
    non-members about zero. A zero gradient scores zero for any damping.

    The estimate assumes the target sits at a stationary point of its
    training objective; the remaining gradient norm is reported as the
    ``stationarity`` diagnostic and logged when it exceeds
    ``STATIONARITY_TOLERANCE``.
    """
    ids = _ids(sample_ids)
    if not ctx.knows_training_set:
        raise ThreatModelError("IHA needs knowledge of the target training set (all but the scored record)")
    head, data = ctx.target, ctx.dataset
    if head.num_params > MAX_HESSIAN_PARAMS:
        raise CapacityError(f"Hessian would have {head.num_params} parameters (limit {MAX_HESSIAN_PARAMS})")
    l2 = ctx.train_config.l2 if ctx.train_config is not None else 0.0
    train = ctx.target_train_ids
    x_train, y_train = data.features[train], data.labels[train]
    hessian_total = hessian_sum(head, x_train)
    gradient_total = loss_gradient(head, x_train, y_train).sum(axis=0)
    regulariser = l2 * head.params() * weight_mask(head)
    diagonal = l2 * weight_mask(head) + damping
    stationarity = float(np.linalg.norm(gradient_total / train.size + regulariser))
    if stationarity > STATIONARITY_TOLERANCE:
        logger.warning(
            f"IHA target is not at a stationary point (objective gradient norm {stationarity:.2e}); "
            "scores are dominated by the leftover gradient"
        )

    def rest_hessian(matrix: np.ndarray, count: int) -> HeadHessian:
        matrix = matrix / count
        matrix[np.diag_indices_from(matrix)] += diagonal
        return HeadHessian(0.5 * (matrix + matrix.T), damping, "", count)

    outside = None
    scores = np.empty(ids.size)
    gradients = np.atleast_2d(loss_gradient(head, data.features[ids], data.labels[ids]))
    position = {int(i): k for k, i in enumerate(train)}
    for k, sample in enumerate(ids):
        g = gradients[k]
        if int(sample) in position:
            x = data.features[sample]
            count = train.size - 1
            if count == 0:
                raise ConfigurationError("IHA needs at least two training records")
            hessian = rest_hessian(hessian_total - hessian_sum(head, x[None, :]), count)
            g_rest = (gradient_total - g) / count + regulariser
        else:
            if outside is None:
                outside = rest_hessian(hessian_total.copy(), train.size)
            hessian = outside
            g_rest = gradient_total / train.size + regulariser
        scores[k] = -float(g @ ihvp(hessian, g_rest))
    return _score_set(ctx, "iha", ids, scores, {"damping": damping, "l2": l2}, {"stationarity": stationarity})


AttackFn = Callable[..., AttackScoreSet]

ATTACKS: dict[str, AttackFn] = {
    "loss": loss_attack,
    "attack_p": attack_p,
    "qmia": qmia,
    "ml_leaks": ml_leaks,
    "lira": lira,
    "rmia": rmia,
    "trajectory": trajectory_mia,
    "iha": iha,
}

ATTACK_OPTIONS: dict[str, set[str]] = {
    "loss": set(),
    "attack_p": set(),
    "qmia": {"quantile_levels", "reference_level", "hidden_width", "epochs", "learning_rate", "batch_size"},
    "ml_leaks": {"k_top", "shadow_index"},
    "lira": {"variance_mode", "query_views"},
    "rmia": {"gamma", "vote_mode"},
    "trajectory": {"distill_epochs", "shadow_count"},
    "iha": {"damping"},
}


def run_attack(name: str, ctx: AttackContext, sample_ids, options: Optional[dict] = None) -> AttackScoreSet:
    """Dispatch an attack by name with manifest-style options."""
    if name not in ATTACKS:
        raise ConfigurationError(f"unknown attack {name!r}, expected one of {sorted(ATTACKS)}")
    options = dict(options or {})
    unknown = set(options) - ATTACK_OPTIONS[name]
    if unknown:
        raise ConfigurationError(f"unknown options for {name}: {sorted(unknown)}")
    if name == "rmia":
        return rmia(ctx, sample_ids, RmiaConfig(**options))
    if name == "qmia":
        regressor_keys = {"hidden_width", "epochs", "learning_rate", "batch_size"}
        regressor = RegressorConfig(**{k: options.pop(k) for k in list(options) if k in regressor_keys})
        return qmia(ctx, sample_ids, regressor_config=regressor, **options)
    return ATTACKS[name](ctx, sample_ids, **options)


def write_scores_csv(path: Union[str, Path], rows: Iterable[tuple[AttackScoreSet, int, int]]) -> Path:
    """Write ``(score_set, repeat, target_index)`` triples as one CSV."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, mode="w", encoding="utf-8", newline="") as fp:
        writer = csv.writer(fp, lineterminator="\n")
        writer.writerow(SCORE_CSV_HEADER)
        for score_set, repeat, target_index in rows:
            for sample, score, member in zip(score_set.sample_ids, score_set.scores, score_set.is_member):
                writer.writerow([score_set.attack, int(sample), repr(float(score)), int(member), repeat, target_index])
    return path


def read_scores_csv(path: Union[str, Path]) -> dict[tuple[str, int, int], AttackScoreSet]:
    """Score sets keyed by ``(attack, repeat, target_index)``."""
    grouped: dict[tuple[str, int, int], list[tuple[int, float, bool]]] = defaultdict(list)
    with open(path, encoding="utf-8", newline="") as fp:
        reader = csv.DictReader(fp)
        missing = set(SCORE_CSV_HEADER) - set(reader.fieldnames or ())
        if missing:
            raise ValidationError(f"{path}: missing columns {sorted(missing)}")
        for line, row in enumerate(reader, start=2):
            try:
                key = (row["attack"], int(row["repeat"]), int(row["target_index"]))
                grouped[key].append((int(row["sample_id"]), float(row["score"]), row["is_member"].strip() in {"1", "true", "True"}))
            except ValueError as exc:
                raise ValidationError(f"{path}: malformed line {line}: {exc}") from exc
    result = {}
    for key, entries in grouped.items():
        ids, scores, members = zip(*entries)
        result[key] = AttackScoreSet(key[0], np.array(ids), np.array(scores), np.array(members))
    return result
