import contextlib

from .attacks import (
    ATTACKS,
    AttackContext,
    AttackScoreSet,
    RmiaConfig,
    attack_p,
    iha,
    lira,
    lira_scores,
    loss_attack,
    ml_leaks,
    qmia,
    read_scores_csv,
    rmia,
    run_attack,
    trajectory_mia,
    write_scores_csv,
)
from .data import (
    FeatureDataset,
    ShotSpec,
    SplitPlan,
    SplitProtocol,
    derive_seed,
    hpo_split,
    load_feature_store,
    make_shadow_splits,
    sample_shots,
    save_feature_store,
    synth_gaussian,
)
from .errors import (
    CapacityError,
    ConfigurationError,
    ContaminationError,
    CoverageError,
    DivergenceError,
    DomainError,
    EmptyDatasetError,
    FormatError,
    ManifestError,
    MiaError,
    SingularityError,
    ThreatModelError,
    ValidationError,
)
from .evaluation import RepeatSummary, RocCurve, aggregate_repeats, iqr, roc_curve, shot_trend, tpr_at_fpr
from .manifest import ExperimentManifest, load_manifest, parse_manifest
from .orchestrator import ExperimentResult, run_experiment
from .signals import empirical_hessian, ihvp, logit_scale, loss_gradient, sample_loss
from .trainer import LinearHead, TrainConfig, distill, hpo_search, load_head, save_head, train_head

with contextlib.suppress(ImportError):
    from ._version import __version__
