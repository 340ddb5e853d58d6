import functools
import json
import sys
import traceback
from pathlib import Path
from typing import Dict, List, Optional

import click
import numpy as np
from loguru import logger
from pydantic import ValidationError
from tqdm import tqdm

from .checkpoint import load_checkpoint
from .data_io import SequenceDataset, SigmaLike, assemble_sequence, read_labels, read_scan, to_anchor_frame, write_labels
from .datatypes import FusionSpec, RunConfig, SynthSceneConfig
from .errors import ConfigError, TemporalLatticeError
from .evaluation import ConfusionMatrix, moving_static_accuracy, moving_static_report, to_text_table
from .model import forward_sequence, infer_chain
from .ply import write_flow_ply, write_point_ply
from .selfcheck import run_selfcheck
from .synthetic import write_dataset
from .training import Trainer
from .utils import setup_logging
from .version import VERSION

ENV_PREFIX = "TEMPORAL_LATTICE_"
SUBCOMMANDS = ("train", "infer", "eval", "synth", "selfcheck")


def add_options(options):
    """Apply a list of click options to a command."""

    def _add_options(func):
        for option in reversed(options):
            func = option(func)
        return func

    return _add_options


def parse_widths(ctx, param, value):
    if value is None or isinstance(value, list):
        return value
    try:
        widths = [int(w) for w in str(value).split(",") if w.strip()]
    except ValueError:
        raise click.BadParameter(f"expected comma-separated integers, got '{value}'")
    return widths


def parse_sigma(ctx, param, value):
    """One scale for every axis, or comma-separated per-axis scales."""
    if value is None or isinstance(value, (float, int, list)):
        return value
    try:
        # Lists from a config file arrive as their string form
        scales = [float(v) for v in str(value).strip("[]").split(",") if v.strip()]
    except ValueError:
        raise click.BadParameter(f"expected a number or comma-separated numbers, got '{value}'")
    if not scales or any(v <= 0 for v in scales):
        raise click.BadParameter(f"sigma must be strictly positive, got '{value}'")
    return scales[0] if len(scales) == 1 else scales


def parse_fusion(ctx, param, value):
    try:
        return str(FusionSpec.parse(value))
    except ConfigError as e:
        raise click.BadParameter(e.message)


sequence_options = [
    click.option("--n", "n", type=int, envvar=f"{ENV_PREFIX}N", help="Clouds per sample (sequence length)."),
    click.option("--s", "s", type=int, envvar=f"{ENV_PREFIX}S", help="Dataset stride between clouds (cloud scope)."),
    click.option("--sigma", callback=parse_sigma, envvar=f"{ENV_PREFIX}SIGMA", help="Lattice scale in meters, one value or one per axis (0.6 or 0.6,0.6,1.2)."),
]


def load_config_file(path: Optional[str]) -> Dict[str, dict]:
    """
    Read a JSON config into click's default_map.

    Top-level keys named after a subcommand hold that subcommand's options;
    any other top-level key applies to every subcommand.
    """
    if path is None:
        return {}
    try:
        document = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise click.BadParameter(f"cannot read config file {path}: {e}", param_hint="--config")
    if not isinstance(document, dict):
        raise click.BadParameter("config file must hold a JSON object", param_hint="--config")
    common = {k: v for k, v in document.items() if k not in SUBCOMMANDS}
    return {name: {**common, **document.get(name, {})} for name in SUBCOMMANDS}


def handle_errors(func):
    """Map package errors to exit codes: their own code, 1 for invalid config, 2 otherwise."""

    @functools.wraps(func)
    def wrapper(*args, **kwargs):
        ctx = click.get_current_context()
        verbose = ctx.obj.get("VERBOSE", False) if ctx.obj else False
        try:
            return func(*args, **kwargs)
        except TemporalLatticeError as e:
            logger.error(f"Error: {e}")
            if verbose:
                logger.debug(traceback.format_exc())
            sys.exit(e.exit_code)
        except ValidationError as e:
            logger.error(f"Invalid configuration: {e}")
            sys.exit(1)
        except Exception as e:
            logger.error(f"An unexpected error occurred: {e}")
            if verbose:
                logger.debug(traceback.format_exc())
            sys.exit(2)

    return wrapper


def write_run_config(config: RunConfig) -> Path:
    output_dir = Path(config.output_dir)
    output_dir.mkdir(parents=True, exist_ok=True)
    path = output_dir / "run_config.json"
    path.write_text(config.model_dump_json(indent=2))
    logger.debug(f"Wrote {path}")
    return path


@click.group(context_settings=dict(help_option_names=["-h", "--help"]))
@click.version_option(VERSION, prog_name="temporal-lattice")
@click.option(
    "--verbose",
    "-v",
    is_flag=True,
    default=None,
    envvar=f"{ENV_PREFIX}VERBOSE",
    help="Enable verbose logging.",
)
@click.option(
    "--config",
    "config_path",
    type=click.Path(dir_okay=False),
    envvar=f"{ENV_PREFIX}CONFIG",
    help="JSON file with option defaults; command line flags and environment variables win.",
)
@click.pass_context
def cli(ctx, verbose, config_path):
    """
    Temporal lattice networks for semantic segmentation of point cloud sequences.
    """
    ctx.ensure_object(dict)
    ctx.obj["VERBOSE"] = setup_logging(verbose)
    ctx.default_map = load_config_file(config_path)


@cli.command()
@click.option("--dataset", "dataset_root", required=True, type=click.Path(), envvar=f"{ENV_PREFIX}DATASET", help="Dataset root.")
@click.option("--out", "output_dir", default="runs/latest", show_default=True, type=click.Path(), help="Run directory.")
@click.option("--fusion", default="GRU-GRU-AFlow-GRU", show_default=True, callback=parse_fusion, envvar=f"{ENV_PREFIX}FUSION", help="Fusion spec, e.g. GRU-GRU-/-GRU.")
@add_options(sequence_options)
@click.option("--widths", default="16,32,64", show_default=True, callback=parse_widths, help="Channel widths per level.")
@click.option("--epochs", default=10, show_default=True, type=int)
@click.option("--seed", default=0, show_default=True, type=int, envvar=f"{ENV_PREFIX}SEED")
@click.option("--reflectance/--no-reflectance", "use_reflectance", default=True, show_default=True, help="Use reflectance as the point feature.")
@click.option("--accumulate", is_flag=True, help="Train the accumulated-cloud baseline without recurrence.")
@click.option("--max-samples", type=int, help="Limit the samples per epoch.")
@click.option("--validation", "validation_sequences", default="", help="Comma-separated held-out sequence ids.")
@click.option("--lr", type=float, default=0.001, show_default=True)
@click.option("--weight-decay", type=float, default=1e-4, show_default=True)
@click.option("--no-augment", is_flag=True, help="Disable training augmentation.")
@handle_errors
def train(dataset_root, output_dir, fusion, n, s, sigma, widths, epochs, seed, use_reflectance, accumulate, max_samples, validation_sequences, lr, weight_decay, no_augment):
    """Train a model; writes checkpoints and metrics.jsonl to the run directory."""
    validation = [v for v in validation_sequences.split(",") if v]
    config = RunConfig(
        subcommand="train",
        dataset_root=dataset_root,
        output_dir=output_dir,
        fusion=fusion,
        n=4 if n is None else n,
        s=3 if s is None else s,
        sigma=0.6 if sigma is None else sigma,
        widths=widths,
        epochs=epochs,
        seed=seed,
        use_reflectance=use_reflectance,
        accumulate=accumulate,
        max_samples=max_samples,
        validation_sequences=validation,
        optim={"lr": lr, "weight_decay": weight_decay},
        augment={"enabled": not no_augment},
    )
    write_run_config(config)
    discovered = SequenceDataset(dataset_root, use_reflectance=use_reflectance)
    training_ids = [sid for sid in discovered.sequences if sid not in validation]
    dataset = SequenceDataset(dataset_root, sequences=training_ids, use_reflectance=use_reflectance)
    validation_set = SequenceDataset(dataset_root, sequences=validation, use_reflectance=use_reflectance) if validation else None
    Trainer(config, dataset, validation=validation_set).train()


def _is_empty_dir(path: Path) -> bool:
    return path.is_dir() and not any(path.rglob("*.bin"))


@cli.command()
@click.option("--checkpoint", required=True, type=click.Path(), envvar=f"{ENV_PREFIX}CHECKPOINT", help="Checkpoint directory.")
@click.option("--dataset", "dataset_root", required=True, type=click.Path(), envvar=f"{ENV_PREFIX}DATASET", help="Dataset root.")
@click.option("--out", "output_dir", default="runs/inference", show_default=True, type=click.Path())
@click.option("--mode", type=click.Choice(["recursive", "window"]), default="recursive", show_default=True, help="Recursive single-cloud inference or re-running each window.")
@click.option("--horizon", default=64, show_default=True, type=int, envvar=f"{ENV_PREFIX}HORIZON", help="Recursive mode: restart the state every this many clouds, primed on the previous n-1.")
@add_options(sequence_options)
@click.option("--sequences", default="", help="Comma-separated sequence ids, all by default.")
@click.option("--export-ply", is_flag=True, help="Also write label-colored PLY files.")
@click.option("--export-flow", is_flag=True, help="Also write AFlow directions as PLY line segments.")
@handle_errors
def infer(checkpoint, dataset_root, output_dir, mode, n, s, sigma, horizon, sequences, export_ply, export_flow):
    """Predict one .label file per cloud."""
    root = Path(dataset_root)
    output = Path(output_dir)
    if not Path(checkpoint).exists():
        raise TemporalLatticeError(f"Checkpoint {checkpoint} does not exist")
    model, manifest = load_checkpoint(checkpoint)
    n = manifest.sequence.n if n is None else n
    s = manifest.sequence.s if s is None else s
    sigma = manifest.sequence.sigma if sigma is None else sigma
    write_run_config(
        RunConfig(
            subcommand="infer",
            dataset_root=dataset_root,
            output_dir=output_dir,
            checkpoint=checkpoint,
            fusion=manifest.fusion,
            n=n,
            s=s,
            sigma=sigma,
            widths=model.config.widths,
            use_reflectance=model.config.feature_dim > 0,
        )
    )
    if _is_empty_dir(root) or not root.exists():
        logger.warning(f"No scans under {root}, nothing to do")
        return
    selected = [v for v in sequences.split(",") if v] or None
    dataset = SequenceDataset(root, sequences=selected, use_reflectance=model.config.feature_dim > 0)
    model.record_flow = export_flow

    written = 0
    for sequence_id in dataset.sequences:
        frames = dataset.frames(sequence_id)
        if not frames:
            logger.warning(f"Sequence {sequence_id} has no scans")
            continue
        label_dir = output / "sequences" / sequence_id / "predictions"
        label_dir.mkdir(parents=True, exist_ok=True)
        predictions = (
            _infer_recursive(model, dataset, sequence_id, n, s, sigma, horizon, output if export_flow else None)
            if mode == "recursive"
            else _infer_window(model, dataset, sequence_id, n, s, sigma)
        )
        for index, predicted in predictions:
            write_labels(label_dir / f"{frames[index].stem}.label", predicted)
            if export_ply:
                ply_dir = output / "ply" / sequence_id
                ply_dir.mkdir(parents=True, exist_ok=True)
                write_point_ply(ply_dir / f"{frames[index].stem}.ply", read_scan(frames[index]).positions, predicted)
            written += 1
    logger.info(f"Wrote predictions for {written} clouds to {output}")


def _infer_recursive(
    model, dataset: SequenceDataset, sequence_id: str, n: int, s: int, sigma: SigmaLike, horizon: int, flow_dir: Optional[Path]
):
    """
    One recursive chain per phase t mod s, each in the frame of its first cloud.

    Every ``horizon`` clouds a chain restarts from the last n-1 clouds so
    the lattices stay bounded on long sequences.
    """
    frames = dataset.frames(sequence_id)
    results = []
    for phase in range(min(s, len(frames))):
        indices = list(range(phase, len(frames), s))
        chain_pose = dataset.load_cloud(sequence_id, indices[0]).pose

        def clouds():
            for index in indices:
                yield to_anchor_frame(dataset.load_cloud(sequence_id, index), chain_pose, sigma)

        steps = tqdm(infer_chain(model, clouds(), horizon, warmup=n - 1), total=len(indices), desc=f"{sequence_id} phase {phase}", leave=False)
        for index, (logits, state) in zip(indices, steps):
            results.append((index, np.argmax(logits.data, axis=1)))
            if flow_dir is not None:
                for site, flow in state.flows.items():
                    target = flow_dir / "flow" / sequence_id
                    target.mkdir(parents=True, exist_ok=True)
                    write_flow_ply(target / f"{frames[index].stem}_{site}.ply", flow.origins, flow.directions)
                state.flows.clear()
    return sorted(results, key=lambda item: item[0])


def _infer_window(model, dataset: SequenceDataset, sequence_id: str, n: int, s: int, sigma: SigmaLike):
    """Re-run every anchor's window; early frames use as many clouds as exist."""
    results = []
    for index in tqdm(range(len(dataset.frames(sequence_id))), desc=sequence_id, leave=False):
        available = min(n, index // s + 1)
        sample = assemble_sequence(dataset, sequence_id, index, available, s, sigma)
        logits = forward_sequence(model, sample.clouds)
        results.append((index, np.argmax(logits.data, axis=1)))
    return results


@cli.command(name="eval")
@click.option("--dataset", "dataset_root", required=True, type=click.Path(), envvar=f"{ENV_PREFIX}DATASET", help="Dataset root with ground truth labels.")
@click.option("--predictions", "predictions_root", required=True, type=click.Path(), help="Output directory of 'infer'.")
@click.option("--out", "output_dir", default="runs/eval", show_default=True, type=click.Path())
@click.option("--sequences", default="", help="Comma-separated sequence ids, all by default.")
@handle_errors
def evaluate(dataset_root, predictions_root, output_dir, sequences):
    """Compute per-class IoU, mIoU and the moving/static breakdown."""
    write_run_config(RunConfig(subcommand="eval", dataset_root=dataset_root, output_dir=output_dir))
    selected = [v for v in sequences.split(",") if v] or None
    dataset = SequenceDataset(dataset_root, sequences=selected, use_reflectance=False)
    cm = ConfusionMatrix(dataset.manifest.num_classes, dataset.ignore_label)
    all_predictions: List[np.ndarray] = []
    all_labels: List[np.ndarray] = []
    for sequence_id in dataset.sequences:
        for index, scan in enumerate(dataset.frames(sequence_id)):
            truth_path = dataset.label_path(sequence_id, index)
            predicted_path = Path(predictions_root) / "sequences" / sequence_id / "predictions" / f"{scan.stem}.label"
            if not truth_path.exists() or not predicted_path.exists():
                logger.warning(f"Skipping {sequence_id}/{scan.stem}: missing ground truth or prediction")
                continue
            truth = read_labels(truth_path, dataset.remap)
            predicted = read_labels(predicted_path, expected_count=truth.shape[0])
            cm.accumulate(predicted, truth)
            all_predictions.append(predicted)
            all_labels.append(truth)
    report = moving_static_report(cm, dataset.classes)
    output = Path(output_dir)
    (output / "report.json").write_text(report.model_dump_json(indent=2))
    table = to_text_table(report)
    (output / "report.txt").write_text(table + "\n")
    click.echo(table)
    if all_labels:
        accuracy = moving_static_accuracy(
            np.concatenate(all_predictions), np.concatenate(all_labels), dataset.classes, dataset.ignore_label
        )
        if accuracy is not None:
            click.echo(f"moving/static accuracy: {100.0 * accuracy:.2f} %")


@cli.command()
@click.option("--out", "output_dir", required=True, type=click.Path(), help="Directory for the generated dataset.")
@click.option("--num-sequences", default=2, show_default=True, type=int)
@click.option("--frames", "frame_count", default=12, show_default=True, type=int)
@click.option("--num-static", default=4, show_default=True, type=int)
@click.option("--num-moving", default=3, show_default=True, type=int)
@click.option("--moving-speed", nargs=2, type=float, default=(0.6, 1.2), show_default=True, help="Speed range in m/frame.")
@click.option("--points-per-object", default=120, show_default=True, type=int)
@click.option("--noise-sigma", default=0.01, show_default=True, type=float)
@click.option("--seed", default=0, show_default=True, type=int, envvar=f"{ENV_PREFIX}SEED")
@handle_errors
def synth(output_dir, num_sequences, frame_count, num_static, num_moving, moving_speed, points_per_object, noise_sigma, seed):
    """Generate a synthetic dataset of static and moving objects."""
    config = SynthSceneConfig(
        num_sequences=num_sequences,
        frame_count=frame_count,
        num_static=num_static,
        num_moving=num_moving,
        moving_speed=tuple(moving_speed),
        points_per_object=points_per_object,
        noise_sigma=noise_sigma,
        seed=seed,
    )
    write_run_config(RunConfig(subcommand="synth", output_dir=output_dir, seed=seed))
    manifest = write_dataset(output_dir, config)
    click.echo(f"Wrote {len(manifest.sequences)} sequences to {output_dir}")


@cli.command()
@click.option("--seed", default=0, show_default=True, type=int)
@click.option("--corrupt", default=None, hidden=True, help="Skew the analytic gradient of one check (harness test).")
@handle_errors
def selfcheck(seed, corrupt):
    """Run every gradient check and lattice invariant; exit 2 on any failure."""
    results = run_selfcheck(seed=seed, corrupt=corrupt)
    width = max(len(r.name) for r in results)
    for result in results:
        status = "ok" if result.passed else "FAILED"
        click.echo(f"{result.kind:<9} {result.name.ljust(width)}  {status:<6}  {result.detail}")
    failed = [r.name for r in results if not r.passed]
    click.echo(f"{len(results) - len(failed)}/{len(results)} checks passed")
    if failed:
        logger.error(f"Failed checks: {', '.join(failed)}")
        sys.exit(2)


if __name__ == "__main__":
    cli(obj={})
