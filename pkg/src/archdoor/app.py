"""Command-line interface.

Exit codes: 0 success, 1 validation or library error, 2 IO error,
3 a scanned graph is suspicious.

License
-------
This file is part of ArchDoor
BSD 3-Clause License
Copyright (c) 2024, ArchDoor authors
"""

import functools
import json
import logging
from pathlib import Path

import click
import numpy as np

from archdoor import __version__
from archdoor.architectures import ARCHITECTURES, build_architecture
from archdoor.config import apply_overrides, read_config, resolve_output_dir
from archdoor.datasets import DatasetSpec, load_dataset
from archdoor.detector import MODES, DetectorConfig, inject_mab, naive_detector, robust_detector
from archdoor.errors import ArchDoorError
from archdoor.experiments import ExperimentConfig, load_result, prepare_graph, run_experiment
from archdoor.miscellaneous import atomic_write, configure_logging, progress_enabled
from archdoor.scanner import ScanConfig, scan
from archdoor.serialization import load_params, read_graph, save_params, write_graph
from archdoor.training import TrainConfig, evaluate, train
from archdoor.trigger import (
    CORNERS,
    LABEL_POLICIES,
    PATTERNS,
    PoisonSpec,
    TriggerSpec,
    apply_trigger,
    poison_dataset,
)

logger = logging.getLogger(__name__)

EXIT_SUSPICIOUS = 3


class LibraryFailure(click.ClickException):
    exit_code = 1


class IOFailure(click.ClickException):
    exit_code = 2


def handle_errors(command):
    """Map library and IO errors onto the exit-code contract."""

    @functools.wraps(command)
    def wrapper(*args, **kwargs):
        try:
            return command(*args, **kwargs)
        except (ArchDoorError, ValueError) as error:
            raise LibraryFailure(str(error)) from error
        except OSError as error:
            where = f"{error.filename}: " if error.filename else ""
            raise IOFailure(f"{where}{error.strerror or error}") from error

    return wrapper


def parse_shape(ctx, param, value: str) -> tuple:
    try:
        shape = tuple(int(extent) for extent in value.split(","))
    except ValueError:
        raise click.BadParameter("expected comma-separated integers, e.g. 3,32,32") from None
    if any(extent < 1 for extent in shape):
        raise click.BadParameter("extents must be positive")
    return shape


def dataset_spec(path) -> DatasetSpec:
    """DatasetSpec from a JSON file, or the default synthetic dataset."""
    if path is None:
        return DatasetSpec()
    return DatasetSpec.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def config_document(path, overrides) -> dict:
    data = read_config(path) if path is not None else {}
    data = apply_overrides(data, overrides)
    data.pop("version", None)
    return data


def write_json(document: dict, path: Path) -> Path:
    with atomic_write(path) as stream:
        json.dump(document, stream, indent=2, sort_keys=True)
        stream.write("\n")
    return path


trigger_options = [
    click.option("--pattern", type=click.Choice(PATTERNS), default="checkerboard"),
    click.option("--size", type=int, default=3, show_default=True, help="Trigger side k."),
    click.option("--corner", type=click.Choice(CORNERS), default="bottom-left"),
]


def with_trigger_options(command):
    for option in reversed(trigger_options):
        command = option(command)
    return command


# = GROUP ===============================================================================
@click.group()
@click.version_option(__version__, prog_name="archdoor")
@click.option("-v", "--verbose", count=True, help="More log output (repeatable).")
@click.option("-q", "--quiet", is_flag=True, help="Warnings only, no progress bars.")
@click.pass_context
def main(ctx, verbose: int, quiet: bool):
    """Build, backdoor, train and scan neural-network architectures."""
    configure_logging(-1 if quiet else verbose)
    ctx.obj = {"progress": progress_enabled(quiet)}


# = GRAPHS ==============================================================================
@main.command()
@click.option("--arch", type=click.Choice(sorted(ARCHITECTURES)), required=True)
@click.option("--classes", type=int, default=10, show_default=True)
@click.option("--input-shape", default="3,32,32", show_default=True, callback=parse_shape)
@click.option("--width", type=float, default=1.0, show_default=True)
@click.option("-o", "--output", type=click.Path(path_type=Path), required=True)
@handle_errors
def build(arch: str, classes: int, input_shape: tuple, width: float, output: Path):
    """Write a reference architecture as an .archjson graph."""
    graph = build_architecture(arch, classes, input_shape, width)
    write_graph(graph, output)
    click.echo(f"{output}: {graph.name}, {len(graph.nodes)} nodes")


@main.command()
@click.argument("graph_file", type=click.Path(path_type=Path))
@click.option("--mode", type=click.Choice(MODES), default="robust", show_default=True)
@click.option("--alpha", type=int, default=10, show_default=True)
@click.option("--beta", type=float, default=1.0, show_default=True)
@click.option("--delta", type=float, default=1.0, show_default=True)
@click.option("--window", type=int, default=3, show_default=True)
@click.option("--site", default=None, help="Adaptive average pool to splice into.")
@click.option("-o", "--output", type=click.Path(path_type=Path), required=True)
@handle_errors
def inject(graph_file, mode, alpha, beta, delta, window, site, output):
    """Inject a parameter-free trigger detector into a graph."""
    cfg = DetectorConfig(alpha=alpha, beta=beta, delta=delta, window=window, mode=mode)
    injected = inject_mab(read_graph(graph_file), cfg, site)
    write_graph(injected, output)
    click.echo(f"{output}: {injected.name}, {len(injected.nodes)} nodes")


# = DATA ================================================================================
@main.command()
@click.option("--dataset", type=click.Path(path_type=Path), help="DatasetSpec JSON file.")
@click.option("--split", type=click.Choice(["train", "test"]), default="train")
@click.option("--fraction", type=float, default=0.1, show_default=True)
@click.option("--label-policy", type=click.Choice(LABEL_POLICIES), default="fixed-target")
@click.option("--target", type=int, default=0, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@with_trigger_options
@click.option("--images", type=click.Path(path_type=Path), help="Also write the poisoned .npz.")
@click.option("-o", "--output", type=click.Path(path_type=Path), required=True)
@handle_errors
def poison(
    dataset, split, fraction, label_policy, target, seed, pattern, size, corner, images, output
):
    """Poison a dataset split and write a manifest of the changed examples."""
    spec = dataset_spec(dataset)
    clean = load_dataset(spec, split)
    trigger = TriggerSpec(pattern=pattern, size=size, corner=corner)
    poison_spec = PoisonSpec(fraction, trigger, label_policy, target)
    poisoned, indices = poison_dataset(clean, poison_spec, seed, return_indices=True)
    manifest = {
        "version": "1",
        "dataset": spec.to_dict(),
        "split": split,
        "poison": poison_spec.to_dict(),
        "seed": seed,
        "count": int(len(indices)),
        "indices": indices.tolist(),
        "original_labels": clean.labels[indices].tolist(),
        "poisoned_labels": poisoned.labels[indices].tolist(),
    }
    write_json(manifest, output)
    if images is not None:
        with atomic_write(images, "wb") as stream:
            np.savez(stream, images=poisoned.images, labels=poisoned.labels)
    click.echo(f"{output}: poisoned {len(indices)} of {len(clean)} examples")


# = TRAINING ============================================================================
@main.command("train")
@click.option("--config", "config_file", type=click.Path(path_type=Path))
@click.option("--set", "overrides", multiple=True, metavar="KEY=VALUE")
@click.option("--output", type=click.Path(path_type=Path))
@click.pass_context
@handle_errors
def train_command(ctx, config_file, overrides, output):
    """Train one model and write its graph, weights and history."""
    cfg = TrainConfig.from_dict(config_document(config_file, overrides))
    output = resolve_output_dir(output)
    train_set = load_dataset(cfg.dataset, "train")
    test_set = load_dataset(cfg.dataset, "test")
    graph = prepare_graph(cfg, train_set)
    params, history = train(graph, cfg, train_set, test_set, progress=ctx.obj["progress"])
    metrics = evaluate(graph, params, test_set, cfg.trigger)

    write_graph(graph, output / "graph.archjson")
    save_params(params, output / "params.npz")
    history.to_csv(output / "history.csv")
    write_json({"config": cfg.to_dict(), "metrics": metrics.to_dict()}, output / "metrics.json")
    click.echo(
        f"task acc {metrics.task_accuracy:.1%}, triggered acc "
        f"{metrics.triggered_accuracy:.1%}, ratio {metrics.triggered_accuracy_ratio:.2f}x"
    )


@main.command()
@click.argument("config_file", type=click.Path(path_type=Path))
@click.option("--set", "overrides", multiple=True, metavar="KEY=VALUE")
@click.option("--jobs", type=click.IntRange(min=1), default=1, show_default=True)
@click.option("--output", type=click.Path(path_type=Path))
@click.option("--no-plots", is_flag=True, help="Skip the plotly figures.")
@click.option("--image-format", default="png", show_default=True)
@click.pass_context
@handle_errors
def experiment(ctx, config_file, overrides, jobs, output, no_plots, image_format):
    """Run every arm and seed of an experiment configuration."""
    config = ExperimentConfig.from_dict(config_document(config_file, overrides))
    output = resolve_output_dir(output, config.output_dir)
    result = run_experiment(config, output, jobs=jobs, progress=ctx.obj["progress"])
    if not no_plots:
        from archdoor.plotter import write_figures

        write_figures(result, output, image_format)
    click.echo(result.summary_text(), nl=False)


@main.command()
@click.argument("result_dir", type=click.Path(path_type=Path, file_okay=False))
@click.option("--no-plots", is_flag=True)
@click.option("--image-format", default="png", show_default=True)
@handle_errors
def report(result_dir, no_plots, image_format):
    """Re-render the summary and figures of a finished experiment."""
    result = load_result(result_dir)
    with atomic_write(result_dir / "summary.txt") as stream:
        stream.write(result.summary_text())
    if not no_plots:
        from archdoor.plotter import write_figures

        write_figures(result, result_dir, image_format)
    click.echo(result.summary_text(), nl=False)


# = DEFENSES ============================================================================
@main.command("scan")
@click.argument("files", nargs=-1, required=True, type=click.Path(path_type=Path))
@click.option(
    "--params",
    "params_file",
    type=click.Path(path_type=Path),
    help="Weights for tighter bounds (single graph only).",
)
@click.option("--absolute-threshold", type=float, default=100.0, show_default=True)
@click.option("--relative-factor", type=float, default=10.0, show_default=True)
@click.option("--json", "as_json", is_flag=True, help="Print JSON reports.")
@click.pass_context
@handle_errors
def scan_command(ctx, files, params_file, absolute_threshold, relative_factor, as_json):
    """Statically scan graphs; exit 3 when any is suspicious."""
    if params_file is not None and len(files) != 1:
        raise click.UsageError("--params needs exactly one graph file")
    config = ScanConfig(absolute_threshold, relative_factor)
    params = load_params(params_file) if params_file is not None else None
    reports = [scan(path, params, config) for path in files]
    if as_json:
        documents = [{"file": str(path), **r.to_dict()} for path, r in zip(files, reports)]
        click.echo(json.dumps(documents if len(documents) > 1 else documents[0], indent=2))
    else:
        for report_ in reports:
            click.echo(report_.render_text())
    if any(report_.suspicious for report_ in reports):
        ctx.exit(EXIT_SUSPICIOUS)


@main.command()
@click.option("--dataset", type=click.Path(path_type=Path), help="DatasetSpec JSON file.")
@click.option("--index", type=int, default=0, show_default=True, help="Test image to show.")
@click.option("--mode", type=click.Choice(MODES), default="robust", show_default=True)
@click.option("--alpha", type=int, default=10, show_default=True)
@with_trigger_options
@click.option("--no-trigger", is_flag=True, help="Show the clean image.")
@click.option("-o", "--output", type=click.Path(path_type=Path), required=True)
@handle_errors
def visualize(dataset, index, mode, alpha, pattern, size, corner, no_trigger, output):
    """Draw a detector's intermediate activation maps for one image."""
    test_set = load_dataset(dataset_spec(dataset), "test")
    if not 0 <= index < len(test_set):
        raise click.BadParameter(f"index must lie in [0, {len(test_set)})", param_hint="--index")
    image = test_set.images[index]
    if not no_trigger:
        image = apply_trigger(image, TriggerSpec(pattern=pattern, size=size, corner=corner))
    cfg = DetectorConfig(alpha=alpha, mode=mode)
    detector = naive_detector if mode == "naive" else robust_detector
    response = detector(image, cfg, dump_to=output)
    click.echo(f"{output}: peak detector response {float(response.max()):.6g}")


if __name__ == "__main__":
    main()
