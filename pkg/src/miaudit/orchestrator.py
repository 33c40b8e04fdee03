"""Experiment runner: pool sampling, HPO, head training, attacks and metrics for every repeat.

Work is split into independent cells whose seeds are derived up front, so the
outputs do not depend on the worker count or on scheduling order.
"""

from __future__ import annotations

import hashlib
import json
from concurrent.futures import ThreadPoolExecutor, as_completed
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Optional, Union

import numpy as np
from loguru import logger
from tqdm import tqdm

from .attacks import AttackContext, AttackScoreSet, lira_coverage, read_scores_csv, run_attack, write_scores_csv
from .data import (
    FeatureDataset,
    ShotSpec,
    SplitPlan,
    SplitProtocol,
    derive_seed,
    load_feature_store,
    make_shadow_splits,
    sample_shots,
    synth_gaussian,
)
from .errors import CapacityError
from .evaluation import aggregate_repeats, roc_curve, tpr_at_fpr
from .manifest import ExperimentManifest
from .trainer import LinearHead, TrainConfig, accuracy, hpo_search, load_head, save_head, train_head


@dataclass(frozen=True, eq=False)
class RepeatSetup:
    repeat: int
    shots: int
    plan: SplitPlan
    population_ids: np.ndarray
    distill_ids: np.ndarray
    config: TrainConfig

    @property
    def num_models(self) -> int:
        return self.plan.num_shadows + 1

    def target_indices(self) -> range:
        if self.plan.protocol is SplitProtocol.EFFICIENT:
            return range(self.num_models)
        return range(1)


@dataclass
class ExperimentResult:
    output_dir: Path
    summary: dict
    errors: list[dict] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.errors


def load_dataset(manifest: ExperimentManifest, data_dir: Optional[Union[str, Path]] = None) -> FeatureDataset:
    source = manifest.dataset
    if source.synthetic is not None:
        spec = source.synthetic
        seed = manifest.seed if spec.seed is None else spec.seed
        dataset = synth_gaussian(
            spec.classes, spec.dim, spec.per_class, spec.separation, seed, views=spec.views, view_noise=spec.view_noise
        )
    else:
        dataset = load_feature_store(manifest.store_path(data_dir))
    logger.info(f"Dataset: n={dataset.n}, d={dataset.dim}, C={dataset.num_classes}, K={dataset.num_views}")
    return dataset


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _seal(path: Path) -> Path:
    Path(f"{path}.sha256").write_text(_sha256(path) + "\n", encoding="utf-8")
    return path


def _verified(path: Path) -> bool:
    sidecar = Path(f"{path}.sha256")
    if not path.is_file() or not sidecar.is_file():
        return False
    return sidecar.read_text(encoding="utf-8").strip() == _sha256(path)


def _error(stage: str, exc: BaseException, **where) -> dict:
    return {"stage": stage, "error": type(exc).__name__, "message": str(exc), **where}


class ExperimentRunner:
    """Runs one manifest into ``output_dir``.

    Layout of ``output_dir``::

        manifest.toml
        models/r{repeat}_S{shots}_{role}{index}_{seed:016x}.miah
        scores/r{repeat}_S{shots}_t{target}_{attack}.csv
        roc/{attack}_S{shots}.csv
        summary.json
    """

    def __init__(
        self,
        manifest: ExperimentManifest,
        dataset: Optional[FeatureDataset] = None,
        data_dir: Optional[Union[str, Path]] = None,
        resume: bool = False,
        progress: bool = False,
    ) -> None:
        self.manifest = manifest
        self.dataset = dataset if dataset is not None else load_dataset(manifest, data_dir)
        self.output_dir = Path(manifest.output_dir)
        self.resume = resume
        self.progress = progress
        self.errors: list[dict] = []
        self.heads: dict[tuple[int, int], list[LinearHead]] = {}

    # -- cells ---------------------------------------------------------------

    def _seed(self, tag: str, *indices: int) -> int:
        return derive_seed(self.manifest.seed, tag, *indices)

    def setup(self, repeat: int, shots: int) -> RepeatSetup:
        """Sample the pool, population and distillation set, split it, pick hyperparameters."""
        manifest, data = self.manifest, self.dataset
        spec = ShotSpec(2 * shots, data.num_classes)
        pool_ids = sample_shots(data, spec, self._seed("pool", repeat, shots))
        plan = make_shadow_splits(
            pool_ids,
            manifest.shadows.count,
            manifest.shadows.protocol,
            self._seed("split", repeat, shots),
            labels=data.labels[pool_ids],
            shots=shots,
        )
        rng = np.random.default_rng(self._seed("reference", repeat, shots))
        rest = rng.permutation(np.setdiff1d(data.sample_ids, pool_ids))
        wanted = manifest.sampling.population_size + manifest.sampling.distill_size
        if wanted > rest.size:
            raise CapacityError(
                f"population ({manifest.sampling.population_size}) and distillation"
                f" ({manifest.sampling.distill_size}) sets need {wanted} samples outside the pool, {rest.size} left"
            )
        population_ids = np.sort(rest[: manifest.sampling.population_size])
        distill_ids = np.sort(rest[manifest.sampling.population_size : wanted])
        config = manifest.training
        if config is None:
            config = hpo_search(
                data,
                ShotSpec(shots, data.num_classes),
                plan.members_of(0),
                ranges=manifest.hpo.ranges,
                trials=manifest.hpo.trials,
                strategy=manifest.hpo.strategy,
                seed=self._seed("hpo", repeat, shots),
            )
        return RepeatSetup(repeat, shots, plan, population_ids, distill_ids, config)

    def _model_path(self, setup: RepeatSetup, index: int, seed: int) -> Path:
        if setup.plan.protocol is SplitProtocol.EFFICIENT:
            role = "model"
        else:
            role = "target" if index == 0 else "shadow"
        name = f"r{setup.repeat}_S{setup.shots}_{role}{index}_{seed:016x}.miah"
        return self.output_dir / "models" / name

    def train(self, setup: RepeatSetup, index: int) -> LinearHead:
        data = self.dataset
        seed = self._seed("model", setup.repeat, setup.shots, index)
        path = self._model_path(setup, index, seed)
        if self.resume and _verified(path):
            logger.debug(f"Reusing {path.name}")
            return load_head(path)
        ids = setup.plan.members_of(index)
        augment = self.manifest.sampling.augment_training
        features, labels = data.training_rows(ids, with_views=augment)
        copies = 1 + data.num_views if augment else 1
        row_ids = np.repeat(ids, copies) * copies + np.tile(np.arange(copies), ids.size)
        logger.debug(f"Training {path.name} on {ids.size} samples")
        head = train_head(features, labels, setup.config, seed, num_classes=data.num_classes, sample_ids=row_ids)
        _seal(save_head(head, path))
        return head

    def context(self, setup: RepeatSetup, heads: list[LinearHead], target: int) -> AttackContext:
        rows = setup.plan.model_rows()
        others = [m for m in range(setup.num_models) if m != target]
        return AttackContext(
            dataset=self.dataset,
            target=heads[target],
            target_train_ids=setup.plan.members_of(target),
            shadows=[heads[m] for m in others],
            pool_ids=setup.plan.pool_ids,
            shadow_members=rows[others],
            population_ids=setup.population_ids,
            distill_ids=setup.distill_ids,
            train_config=setup.config,
            knows_training_set=True,
            seed=self._seed("attack", setup.repeat, setup.shots, target),
        )

    def attack(self, setup: RepeatSetup, target: int, name: str) -> AttackScoreSet:
        path = self.output_dir / "scores" / f"r{setup.repeat}_S{setup.shots}_t{target}_{name}.csv"
        if self.resume and _verified(path):
            logger.debug(f"Reusing {path.name}")
            return read_scores_csv(path)[(name, setup.repeat, target)]
        ctx = self.context(setup, self.heads[(setup.repeat, setup.shots)], target)
        sample_ids = setup.plan.pool_ids
        if name == "lira" and setup.plan.protocol is SplitProtocol.EFFICIENT:
            sample_ids = sample_ids[lira_coverage(ctx, sample_ids)]
        logger.debug(f"Running {name} on target {target} (repeat {setup.repeat}, S={setup.shots})")
        scores = run_attack(name, ctx, sample_ids, self.manifest.attack_options.get(name))
        scores.check_labels()
        _seal(write_scores_csv(path, [(scores, setup.repeat, target)]))
        return scores

    # -- scheduling ----------------------------------------------------------

    def _map(self, fn: Callable, cells: Iterable[tuple], desc: str) -> tuple[dict, dict]:
        """Run ``fn(*cell)`` for every cell; failures become entries of ``self.errors``."""
        cells = list(cells)
        results: dict[tuple, object] = {}
        failures: dict[tuple, BaseException] = {}
        with ThreadPoolExecutor(max_workers=self.manifest.workers) as pool:
            futures = {pool.submit(fn, *cell): cell for cell in cells}
            for future in tqdm(as_completed(futures), total=len(futures), desc=desc, disable=not self.progress):
                cell = futures[future]
                try:
                    results[cell] = future.result()
                except Exception as exc:
                    logger.opt(exception=exc).error(f"{desc} cell {cell} failed: {exc}")
                    failures[cell] = exc
        return results, failures

    def run(self) -> ExperimentResult:
        manifest = self.manifest
        self.output_dir.mkdir(parents=True, exist_ok=True)
        manifest.dump(self.output_dir / "manifest.toml")
        grid = [(r, s) for s in manifest.shots for r in range(manifest.repeats)]

        setups, failed = self._map(self.setup, grid, "setup")
        for (r, s), exc in failed.items():
            self.errors.append(_error("setup", exc, attack=None, repeat=r, S=s, target_index=None))

        train_cells = [(setups[key], m) for key in sorted(setups) for m in range(setups[key].num_models)]
        trained, failed = self._map(self.train, train_cells, "train")
        for (setup, m), exc in failed.items():
            self.errors.append(_error("train", exc, attack=None, repeat=setup.repeat, S=setup.shots, target_index=m))
        heads = self.heads
        for key, setup in setups.items():
            models = [trained.get((setup, m)) for m in range(setup.num_models)]
            if all(h is not None for h in models):
                heads[key] = models

        attack_cells = [
            (setups[key], t, name)
            for key in sorted(heads)
            for t in setups[key].target_indices()
            for name in manifest.attacks
        ]
        scored, failed = self._map(self.attack, attack_cells, "attack")
        for (setup, t, name), exc in failed.items():
            self.errors.append(_error("attack", exc, attack=name, repeat=setup.repeat, S=setup.shots, target_index=t))
        score_sets = {(name, s.shots, s.repeat, t): result for (s, t, name), result in scored.items()}

        utility = []
        for key in sorted(heads):
            held_out = setups[key].population_ids
            for t in setups[key].target_indices():
                score = accuracy(heads[key][t], self.dataset.features[held_out], self.dataset.labels[held_out])
                utility.append(
                    {
                        "S": setups[key].shots,
                        "repeat": setups[key].repeat,
                        "target_index": t,
                        "test_accuracy": score if held_out.size else None,
                    }
                )
        summary = self._summarise(score_sets, utility)
        self._write_roc(score_sets)
        text = json.dumps(summary, sort_keys=True, indent=2, allow_nan=False) + "\n"
        (self.output_dir / "summary.json").write_text(text, encoding="utf-8")
        logger.info(f"Wrote {self.output_dir / 'summary.json'} ({len(summary['rows'])} rows, {len(self.errors)} errors)")
        return ExperimentResult(self.output_dir, summary, summary["errors"])

    # -- reporting -----------------------------------------------------------

    def _summarise(self, score_sets: dict, utility: list[dict]) -> dict:
        manifest = self.manifest
        rows = []
        for name in manifest.attacks:
            for shots in manifest.shots:
                per_repeat = []
                for repeat in range(manifest.repeats):
                    sets = [v for (a, s, r, _), v in sorted(score_sets.items()) if (a, s, r) == (name, shots, repeat)]
                    if not sets:
                        continue
                    # efficient mode: TPR averaged over every model used as target
                    tprs = [[tpr_at_fpr(v, f).tpr for f in manifest.fpr_targets] for v in sets]
                    per_repeat.append(np.mean(tprs, axis=0))
                if not per_repeat:
                    continue
                summary = aggregate_repeats(per_repeat, manifest.fpr_targets)
                for k, fpr in enumerate(manifest.fpr_targets):
                    rows.append(
                        {
                            "attack": name,
                            "S": shots,
                            "M": manifest.shadows.count,
                            "fpr_target": fpr,
                            "median_tpr": float(summary.median[k]),
                            "iqr": float(summary.iqr[k]),
                            "n_repeats": summary.n_repeats,
                        }
                    )
        errors = sorted(
            self.errors,
            key=lambda e: (e["stage"], e["S"], e["repeat"], -1 if e["target_index"] is None else e["target_index"], e["attack"] or ""),
        )
        return {"manifest_hash": manifest.digest(), "rows": rows, "errors": errors, "utility": utility}

    def _write_roc(self, score_sets: dict) -> None:
        """One CSV per (attack, S) holding one curve per (repeat, target)."""
        roc_dir = self.output_dir / "roc"
        roc_dir.mkdir(parents=True, exist_ok=True)
        keys = sorted({(a, s) for a, s, _, _ in score_sets})
        for name, shots in keys:
            lines = ["attack,repeat,target_index,fpr,tpr"]
            for (a, s, repeat, target), score_set in sorted(score_sets.items()):
                if (a, s) != (name, shots):
                    continue
                curve = roc_curve(score_set)
                lines += [f"{name},{repeat},{target},{f!r},{t!r}" for f, t in curve.points()]
            (roc_dir / f"{name}_S{shots}.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")


def run_experiment(
    manifest: ExperimentManifest,
    dataset: Optional[FeatureDataset] = None,
    data_dir: Optional[Union[str, Path]] = None,
    resume: bool = False,
    progress: bool = False,
) -> ExperimentResult:
    return ExperimentRunner(manifest, dataset, data_dir, resume, progress).run()
