"""``miaudit`` command line."""

from __future__ import annotations

import sys
from pathlib import Path
from typing import Optional

import click
from loguru import logger

from .attacks import read_scores_csv
from .data import load_feature_store, save_feature_store, synth_gaussian
from .errors import MiaError
from .evaluation import roc_curve, tpr_at_fpr
from .manifest import DATA_DIR_ENV, load_manifest
from .orchestrator import run_experiment

LOG_FORMAT = "<green>{time:HH:mm:ss}</green> | <level>{level: <8}</level> | {message}"


def configure_logging(verbose: int, quiet: bool) -> None:
    level = "WARNING" if quiet else "DEBUG" if verbose else "INFO"
    logger.remove()
    logger.add(sys.stderr, level=level, format=LOG_FORMAT)


def _resolve(path: Path, data_dir: Optional[Path]) -> Path:
    if not path.is_absolute() and not path.exists() and data_dir is not None:
        return data_dir / path
    return path


@click.group(context_settings={"help_option_names": ["-h", "--help"]})
@click.option("-v", "--verbose", count=True, help="Log debug messages.")
@click.option("-q", "--quiet", is_flag=True, help="Only log warnings and errors.")
def main(verbose: int, quiet: bool) -> None:
    """Audit membership leakage of linear heads trained on fixed embeddings."""
    configure_logging(verbose, quiet)


data_dir_option = click.option(
    "--data-dir",
    type=click.Path(file_okay=False, path_type=Path),
    envvar=DATA_DIR_ENV,
    show_envvar=True,
    help="Root for relative feature store paths.",
)


@main.command()
@click.argument("manifest", type=click.Path(exists=True, dir_okay=False, path_type=Path))
@click.option("--seed", type=int, help="Override the manifest master seed.")
@click.option("--workers", type=click.IntRange(min=1), help="Override the manifest worker count.")
@click.option("--out", "output_dir", type=click.Path(file_okay=False, path_type=Path), help="Output directory.")
@click.option("--resume", is_flag=True, help="Reuse model and score files whose checksums verify.")
@click.option("--progress/--no-progress", default=False, help="Show progress bars.")
@data_dir_option
def run(
    manifest: Path,
    seed: Optional[int],
    workers: Optional[int],
    output_dir: Optional[Path],
    resume: bool,
    progress: bool,
    data_dir: Optional[Path],
) -> None:
    """Run the experiment described by MANIFEST."""
    try:
        experiment = load_manifest(manifest).with_overrides(seed=seed, workers=workers, output_dir=output_dir)
        result = run_experiment(experiment, data_dir=data_dir, resume=resume, progress=progress)
    except MiaError as exc:
        raise click.ClickException(str(exc)) from exc
    for row in result.summary["rows"]:
        click.echo(
            f"{row['attack']:<10} S={row['S']:<4} fpr={row['fpr_target']:<6g}"
            f" median_tpr={row['median_tpr']:.4f} iqr={row['iqr']:.4f} (n={row['n_repeats']})"
        )
    if not result.ok:
        for error in result.errors:
            click.echo(f"{error['stage']} failed: {error['error']}: {error['message']}", err=True)
        raise click.ClickException(f"{len(result.errors)} cell(s) failed; see {result.output_dir / 'summary.json'}")


@main.command()
@click.option("--classes", type=click.IntRange(min=2), default=10, show_default=True)
@click.option("--dim", type=click.IntRange(min=1), default=8, show_default=True)
@click.option("--per-class", type=click.IntRange(min=1), default=100, show_default=True)
@click.option("--separation", type=click.FloatRange(min=0), default=3.0, show_default=True)
@click.option("--views", type=click.IntRange(min=0), default=0, show_default=True, help="Jittered views per sample.")
@click.option("--view-noise", type=click.FloatRange(min=0), default=0.1, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("-o", "--output", type=click.Path(dir_okay=False, path_type=Path), required=True)
def synth(classes, dim, per_class, separation, views, view_noise, seed, output: Path) -> None:
    """Write a synthetic Gaussian feature store."""
    dataset = synth_gaussian(classes, dim, per_class, separation, seed, views=views, view_noise=view_noise)
    save_feature_store(dataset, output)
    logger.info(f"Wrote {dataset.n} samples to {output}")


@main.command()
@click.argument("store", type=click.Path(dir_okay=False, path_type=Path))
@data_dir_option
def inspect(store: Path, data_dir: Optional[Path]) -> None:
    """Print the shape of a feature store."""
    try:
        dataset = load_feature_store(_resolve(store, data_dir))
    except (MiaError, OSError) as exc:
        raise click.ClickException(str(exc)) from exc
    click.echo(f"n={dataset.n}")
    click.echo(f"d={dataset.dim}")
    click.echo(f"C={dataset.num_classes}")
    click.echo(f"K={dataset.num_views}")


@main.command()
@click.argument("scores", type=click.Path(exists=True, dir_okay=False, path_type=Path))
@click.option(
    "--fpr", "fpr_targets", type=click.FloatRange(0, 1, min_open=True, max_open=True),
    multiple=True, default=(0.001, 0.01, 0.1), show_default=True,
)
@click.option("--out", "output", type=click.Path(dir_okay=False, path_type=Path), help="Write curve vertices here.")
def roc(scores: Path, fpr_targets: tuple[float, ...], output: Optional[Path]) -> None:
    """Recompute ROC curves from a score CSV."""
    lines = ["attack,repeat,target_index,fpr,tpr"]
    try:
        score_sets = read_scores_csv(scores)
        for (attack, repeat, target), score_set in sorted(score_sets.items()):
            curve = roc_curve(score_set)
            tprs = " ".join(f"tpr@{f:g}={tpr_at_fpr(score_set, f).tpr:.4f}" for f in fpr_targets)
            click.echo(f"{attack} repeat={repeat} target={target} auc={curve.auc():.4f} {tprs}")
            lines += [f"{attack},{repeat},{target},{f!r},{t!r}" for f, t in curve.points()]
    except MiaError as exc:
        raise click.ClickException(str(exc)) from exc
    if output is not None:
        output.parent.mkdir(parents=True, exist_ok=True)
        output.write_text("\n".join(lines) + "\n", encoding="utf-8")


if __name__ == "__main__":
    main()
