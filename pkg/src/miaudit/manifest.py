"""Experiment manifests: TOML documents describing one audit.

See ``docs/manifest.rst`` for the schema. Every validation failure raises
:class:`~miaudit.errors.ManifestError` naming the dotted path of the field.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional, Union

import tomlkit
from loguru import logger

from .attacks import ATTACKS
from .data import SplitProtocol
from .errors import ConfigurationError, ManifestError
from .trainer import SearchRanges, TrainConfig

DATA_DIR_ENV = "MIA_DATA_DIR"
DEFAULT_FPR_TARGETS = (0.001, 0.01, 0.1)


@dataclass(frozen=True)
class SyntheticSource:
    classes: int
    dim: int
    per_class: int
    separation: float = 3.0
    views: int = 0
    view_noise: float = 0.1
    seed: Optional[int] = None


@dataclass(frozen=True)
class DatasetSource:
    path: Optional[str] = None
    synthetic: Optional[SyntheticSource] = None


@dataclass(frozen=True)
class ShadowSettings:
    count: int = 16
    protocol: SplitProtocol = SplitProtocol.BALANCED


@dataclass(frozen=True)
class SamplingSettings:
    population_size: int = 500
    distill_size: int = 0
    augment_training: bool = False


@dataclass(frozen=True)
class HpoSettings:
    trials: int = 20
    strategy: str = "tpe"
    ranges: SearchRanges = field(default_factory=SearchRanges)


@dataclass(frozen=True)
class ExperimentManifest:
    dataset: DatasetSource
    shots: tuple[int, ...]
    attacks: tuple[str, ...]
    shadows: ShadowSettings = ShadowSettings()
    repeats: int = 1
    fpr_targets: tuple[float, ...] = DEFAULT_FPR_TARGETS
    attack_options: dict[str, dict[str, Any]] = field(default_factory=dict)
    sampling: SamplingSettings = SamplingSettings()
    hpo: HpoSettings = HpoSettings()
    training: Optional[TrainConfig] = None
    seed: int = 0
    workers: int = 1
    output_dir: str = "results"
    base_dir: Optional[str] = None

    def to_dict(self) -> dict:
        """Plain nested dict in manifest layout, ``None`` entries dropped."""

        def clean(value):
            if isinstance(value, dict):
                return {k: clean(v) for k, v in value.items() if v is not None}
            if isinstance(value, (list, tuple)):
                return [clean(v) for v in value]
            if isinstance(value, SplitProtocol):
                return value.value
            return value

        raw = dataclasses.asdict(self)
        raw.pop("base_dir")
        raw["attacks_config"] = raw.pop("attack_options")
        raw["hpo"]["ranges"] = {k: list(v) if isinstance(v, tuple) else v for k, v in raw["hpo"]["ranges"].items()}
        return clean(raw)

    def digest(self) -> str:
        """Hash of every field that can change results."""
        semantic = self.to_dict()
        semantic.pop("workers")
        semantic.pop("output_dir")
        text = json.dumps(semantic, sort_keys=True)
        return hashlib.blake2b(text.encode("utf-8"), digest_size=16).hexdigest()

    def with_overrides(
        self, seed: Optional[int] = None, workers: Optional[int] = None, output_dir: Optional[str] = None
    ) -> ExperimentManifest:
        changes = {}
        if seed is not None:
            changes["seed"] = seed
        if workers is not None:
            if workers < 1:
                raise ManifestError("workers", f"must be at least 1, got {workers}")
            changes["workers"] = workers
        if output_dir is not None:
            changes["output_dir"] = str(output_dir)
        return dataclasses.replace(self, **changes)

    def store_path(self, data_dir: Optional[Union[str, Path]] = None) -> Path:
        """Resolve ``dataset.path`` against ``data_dir``, ``$MIA_DATA_DIR`` or the manifest folder."""
        if self.dataset.path is None:
            raise ConfigurationError("manifest uses a synthetic dataset, not a store")
        path = Path(self.dataset.path).expanduser()
        if path.is_absolute():
            return path
        root = data_dir or os.environ.get(DATA_DIR_ENV) or self.base_dir or "."
        return Path(root) / path

    def dump(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, mode="w", encoding="utf-8") as fp:
            tomlkit.dump(self.to_dict(), fp)
        return path


class _Table:
    """Read-once view of a TOML table that remembers which keys were consumed."""

    def __init__(self, data: dict, path: str) -> None:
        if not isinstance(data, dict):
            raise ManifestError(path or "<root>", "expected a table")
        self.data = data
        self.path = path
        self.seen: set[str] = set()

    def where(self, key: str) -> str:
        return f"{self.path}.{key}" if self.path else key

    def get(self, key: str, kind, default=None, required: bool = False):
        self.seen.add(key)
        if key not in self.data:
            if required:
                raise ManifestError(self.where(key), "is required")
            return default
        value = self.data[key]
        if kind is float and isinstance(value, int) and not isinstance(value, bool):
            value = float(value)
        if kind is int and isinstance(value, bool) or not isinstance(value, kind):
            raise ManifestError(self.where(key), f"expected {kind.__name__}, got {type(value).__name__}")
        return value

    def table(self, key: str) -> Optional[_Table]:
        self.seen.add(key)
        if key not in self.data:
            return None
        return _Table(self.data[key], self.where(key))

    def close(self) -> None:
        unknown = sorted(set(self.data) - self.seen)
        if unknown:
            raise ManifestError(self.where(unknown[0]), "unknown key")


def _positive(table: _Table, key: str, default=None, required: bool = False, minimum: int = 1) -> int:
    value = table.get(key, int, default, required)
    if value is not None and value < minimum:
        raise ManifestError(table.where(key), f"must be at least {minimum}, got {value}")
    return value


def _int_list(table: _Table, key: str, required: bool = False) -> Optional[tuple]:
    values = table.get(key, list, None, required)
    if values is None:
        return None
    for k, value in enumerate(values):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ManifestError(f"{table.where(key)}[{k}]", f"expected int, got {type(value).__name__}")
    return tuple(values)


def _dataset(root: _Table) -> DatasetSource:
    table = root.table("dataset")
    if table is None:
        raise ManifestError("dataset", "is required")
    path = table.get("path", str)
    synthetic_table = table.table("synthetic")
    synthetic = None
    if synthetic_table is not None:
        synthetic = SyntheticSource(
            classes=_positive(synthetic_table, "classes", required=True, minimum=2),
            dim=_positive(synthetic_table, "dim", required=True),
            per_class=_positive(synthetic_table, "per_class", required=True),
            separation=synthetic_table.get("separation", float, 3.0),
            views=_positive(synthetic_table, "views", 0, minimum=0),
            view_noise=synthetic_table.get("view_noise", float, 0.1),
            seed=synthetic_table.get("seed", int),
        )
        if synthetic.separation < 0 or synthetic.view_noise < 0:
            raise ManifestError(synthetic_table.where("separation"), "separation and view_noise must be nonnegative")
        synthetic_table.close()
    table.close()
    if (path is None) == (synthetic is None):
        raise ManifestError("dataset", "give exactly one of `path` or `[dataset.synthetic]`")
    return DatasetSource(path, synthetic)


def _in_unit(value) -> bool:
    return 0 < value < 1


def _levels(values) -> bool:
    return bool(values) and all(
        isinstance(v, (int, float)) and not isinstance(v, bool) and _in_unit(v) for v in values
    )


# key -> (type, check, requirement) per attack
ATTACK_OPTION_RULES: dict[str, dict[str, tuple]] = {
    "loss": {},
    "attack_p": {},
    "qmia": {
        "quantile_levels": (list, _levels, "must be a non-empty list of levels in (0, 1)"),
        "reference_level": (float, _in_unit, "must lie in (0, 1)"),
        "hidden_width": (int, lambda v: v >= 0, "must be at least 0"),
        "epochs": (int, lambda v: v >= 1, "must be at least 1"),
        "learning_rate": (float, lambda v: v > 0, "must be positive"),
        "batch_size": (int, lambda v: v >= 1, "must be at least 1"),
    },
    "ml_leaks": {
        "k_top": (int, lambda v: v >= 1, "must be at least 1"),
        "shadow_index": (int, lambda v: v >= 0, "must be at least 0"),
    },
    "lira": {
        "variance_mode": (str, lambda v: v in {"per-sample", "global"}, "expected 'per-sample' or 'global'"),
        "query_views": (int, lambda v: v >= 0, "must be at least 0"),
    },
    "rmia": {
        "gamma": (float, lambda v: v >= 1, "must be at least 1"),
        "vote_mode": (str, lambda v: v in {"single", "majority"}, "expected 'single' or 'majority'"),
    },
    "trajectory": {
        "distill_epochs": (int, lambda v: v >= 1, "must be at least 1"),
        "shadow_count": (int, lambda v: v >= 1, "must be at least 1"),
    },
    "iha": {"damping": (float, lambda v: v >= 0, "must be at least 0")},
}


def _attack_options(table: _Table, name: str) -> dict:
    options = {}
    for key, (kind, check, requirement) in ATTACK_OPTION_RULES[name].items():
        value = table.get(key, kind)
        if value is None:
            continue
        if not check(value):
            raise ManifestError(table.where(key), f"{requirement}, got {value!r}")
        options[key] = [float(v) for v in value] if kind is list else value
    table.close()
    return options


def _attacks(root: _Table) -> tuple[tuple[str, ...], dict]:
    names = root.get("attacks", list, required=True)
    if not names:
        raise ManifestError("attacks", "must list at least one attack")
    for k, name in enumerate(names):
        if name not in ATTACKS:
            raise ManifestError(f"attacks[{k}]", f"unknown attack {name!r}, expected one of {sorted(ATTACKS)}")
    if len(set(names)) != len(names):
        raise ManifestError("attacks", "lists an attack twice")
    options = {}
    config = root.table("attacks_config")
    if config is not None:
        for name in config.data:
            if name not in ATTACKS:
                raise ManifestError(config.where(name), f"unknown attack {name!r}")
            options[name] = _attack_options(config.table(name), name)
        config.close()
    return tuple(names), options


def _fpr_targets(root: _Table) -> tuple[float, ...]:
    values = root.get("fpr_targets", list, list(DEFAULT_FPR_TARGETS))
    if not values:
        raise ManifestError("fpr_targets", "must list at least one target")
    for k, value in enumerate(values):
        if isinstance(value, bool) or not isinstance(value, (int, float)) or not 0 < value < 1:
            raise ManifestError(f"fpr_targets[{k}]", f"must lie in (0, 1), got {value!r}")
    return tuple(float(v) for v in values)


def _ranges(table: Optional[_Table]) -> SearchRanges:
    if table is None:
        return SearchRanges()
    kwargs = {}
    for key in ("epochs", "batch_size", "learning_rate"):
        bounds = table.get(key, list)
        if bounds is None:
            continue
        if len(bounds) != 2:
            raise ManifestError(table.where(key), "expected [low, high]")
        kwargs[key] = tuple(float(b) if key == "learning_rate" else int(b) for b in bounds)
    l2 = table.get("l2", float)
    if l2 is not None:
        kwargs["l2"] = l2
    table.close()
    try:
        return SearchRanges(**kwargs)
    except ConfigurationError as exc:
        raise ManifestError(table.path, str(exc)) from exc


def _training(table: Optional[_Table]) -> Optional[TrainConfig]:
    if table is None:
        return None
    kwargs = {
        "epochs": table.get("epochs", int, 100),
        "batch_size": table.get("batch_size", int, 32),
        "learning_rate": table.get("learning_rate", float, 1e-3),
        "l2": table.get("l2", float, 0.0),
    }
    table.close()
    try:
        return TrainConfig(**kwargs)
    except ConfigurationError as exc:
        field_name = str(exc).split(" ", 1)[0]
        raise ManifestError(table.where(field_name), str(exc)) from exc


def parse_manifest(text: str, base_dir: Optional[Union[str, Path]] = None) -> ExperimentManifest:
    try:
        document = tomlkit.parse(text).unwrap()
    except tomlkit.exceptions.ParseError as exc:
        raise ManifestError("<document>", f"invalid TOML: {exc}") from exc
    root = _Table(document, "")

    dataset = _dataset(root)
    shots = _int_list(root, "shots", required=True)
    if not shots:
        raise ManifestError("shots", "must list at least one shot count")
    for k, s in enumerate(shots):
        if s < 1:
            raise ManifestError(f"shots[{k}]", f"must be at least 1, got {s}")
    attacks, options = _attacks(root)

    shadows_table = root.table("shadows")
    shadows = ShadowSettings()
    if shadows_table is not None:
        protocol = shadows_table.get("protocol", str, "balanced")
        try:
            protocol = SplitProtocol(protocol)
        except ValueError:
            raise ManifestError(shadows_table.where("protocol"), f"expected 'balanced' or 'efficient', got {protocol!r}")
        count = _positive(shadows_table, "count", 16, minimum=0)
        if protocol is SplitProtocol.BALANCED and count % 2:
            raise ManifestError(shadows_table.where("count"), f"balanced protocol needs an even count, got {count}")
        shadows_table.close()
        shadows = ShadowSettings(count, protocol)

    sampling_table = root.table("sampling")
    sampling = SamplingSettings()
    if sampling_table is not None:
        sampling = SamplingSettings(
            population_size=_positive(sampling_table, "population_size", 500, minimum=0),
            distill_size=_positive(sampling_table, "distill_size", 0, minimum=0),
            augment_training=sampling_table.get("augment_training", bool, False),
        )
        sampling_table.close()
    if "trajectory" in attacks and sampling.distill_size == 0:
        raise ManifestError("sampling.distill_size", "trajectory attack needs a distillation set")

    hpo_table = root.table("hpo")
    hpo = HpoSettings()
    if hpo_table is not None:
        strategy = hpo_table.get("strategy", str, "tpe")
        if strategy not in {"tpe", "random"}:
            raise ManifestError(hpo_table.where("strategy"), f"expected 'tpe' or 'random', got {strategy!r}")
        hpo = HpoSettings(
            trials=_positive(hpo_table, "trials", 20),
            strategy=strategy,
            ranges=_ranges(hpo_table.table("ranges")),
        )
        hpo_table.close()

    manifest = ExperimentManifest(
        dataset=dataset,
        shots=shots,
        attacks=attacks,
        shadows=shadows,
        repeats=_positive(root, "repeats", 1),
        fpr_targets=_fpr_targets(root),
        attack_options=options,
        sampling=sampling,
        hpo=hpo,
        training=_training(root.table("training")),
        seed=root.get("seed", int, 0),
        workers=_positive(root, "workers", 1),
        output_dir=root.get("output_dir", str, "results"),
        base_dir=None if base_dir is None else str(base_dir),
    )
    root.close()
    return manifest


def load_manifest(path: Union[str, Path]) -> ExperimentManifest:
    path = Path(path)
    with open(path, encoding="utf-8") as fp:
        text = fp.read()
    manifest = parse_manifest(text, base_dir=path.parent)
    logger.debug(f"Loaded manifest {path} ({manifest.digest()})")
    return manifest
