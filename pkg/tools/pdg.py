#!/usr/bin/env python3
"""
Experiment command line: synthetic data, training with leave-one-domain-out evaluation,
discrepancy measurements and the numerical self-checks.
"""

import functools
import json
import logging
import os
import sys
from pathlib import Path
from typing import Any, List, Optional

import click
import tqdm

for relative in (("common",), ("pdg-check",)):
    path = os.path.abspath(os.path.join(os.path.dirname(__file__), os.path.pardir, *relative))
    if path not in sys.path:
        sys.path.insert(0, path)

import domain_data
import experiment
from bayes_net import load_checkpoint
from kernel import Estimator, KernelConfig, mmd2
from pdg_errors import DataFormatError, ValidationError
from print_color import PrintColor
from prob_embedding import draw_linear_pairing, pmmd2, pmmd2_linear
from seeding import numpy_stream
from train import predict_domain

LOG_LEVEL_ENV = "PDG_LOG_LEVEL"


class TqdmHandler(logging.Handler):
    """Log records go through tqdm.write so they do not tear a running progress bar"""

    def emit(self, record: logging.LogRecord) -> None:
        try:
            tqdm.tqdm.write(self.format(record), file=sys.stderr)
        except Exception:
            self.handleError(record)


def configure_logging(verbose: int) -> None:
    level = {0: logging.WARNING, 1: logging.INFO}.get(verbose, logging.DEBUG)
    if not verbose and os.environ.get(LOG_LEVEL_ENV):
        name = os.environ[LOG_LEVEL_ENV].upper()
        level = logging.getLevelName(name)
        if not isinstance(level, int):
            raise click.BadParameter(f"unknown log level '{name}'", param_hint=LOG_LEVEL_ENV)
    handler = TqdmHandler()
    handler.setFormatter(logging.Formatter("%(levelname)s %(name)s: %(message)s"))
    root = logging.getLogger()
    root.handlers = [handler]
    root.setLevel(level)


def handle_errors(command):
    """Report library errors as one red line and exit with 1"""

    @functools.wraps(command)
    def wrapper(*args, **kwargs):
        try:
            return command(*args, **kwargs)
        except (ValidationError, DataFormatError, OSError) as e:
            PrintColor(use_color=sys.stderr.isatty()).red(f"error: {e}")
            sys.exit(1)

    return wrapper


def experiment_options(command):
    command = click.option(
        "--ablation",
        default="",
        help=f"comma separated ablation flags ({', '.join(sorted(experiment.ABLATION_FLAGS))})",
    )(command)
    command = click.option(
        "--iterations", type=click.IntRange(min=0), help="override train.iterations"
    )(command)
    command = click.option("--seed", type=int, help="override the seed of training and data")(
        command
    )
    command = click.option(
        "--config",
        "config_path",
        type=click.Path(exists=True, dir_okay=False),
        help="YAML experiment config (default: the shift3 toy task)",
    )(command)
    return command


def load_experiment_config(
    config_path: Optional[str], seed: Optional[int], ablation: str, iterations: Optional[int]
) -> experiment.ExperimentConfig:
    if config_path:
        config = experiment.load_config(config_path)
    else:
        config = experiment.ExperimentConfig()
    flags = [flag.strip() for flag in ablation.split(",") if flag.strip()]
    return config.with_overrides(seed=seed, ablation=flags, iterations=iterations)


def echo_json(data: Any) -> None:
    click.echo(json.dumps(data, indent=4, sort_keys=True))


def write_json(path: Path, data: Any) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as stream:
        stream.write(json.dumps(data, indent=4, sort_keys=True))
        stream.write("\n")


@click.group()
@click.option("-v", "--verbose", count=True, help="-v for progress messages, -vv for debugging")
@click.option("--quiet", is_flag=True, help="no progress bar")
@click.pass_context
def cli(ctx, verbose: int, quiet: bool):
    configure_logging(verbose)
    ctx.obj = {"progress": not quiet and sys.stderr.isatty()}


@cli.command("generate-data")
@experiment_options
@click.option(
    "--out-dir",
    type=click.Path(file_okay=False),
    required=True,
    help="directory receiving domain_<j>.csv",
)
@handle_errors
def generate_data(config_path, seed, iterations, ablation, out_dir):
    """Write the synthetic domains of the config, one CSV file per domain"""

    config = load_experiment_config(config_path, seed, ablation, iterations)
    if config.data.synthetic is None:
        raise ValidationError("the config reads its data from files", field="data.synthetic")
    for path in domain_data.generate_synthetic(config.data.synthetic, out_dir):
        click.echo(str(path))


@cli.command()
@experiment_options
@click.option("--out-dir", type=click.Path(file_okay=False), help="directory for run artifacts")
@click.option("--held-out", type=click.IntRange(min=0), help="id of the held-out domain")
@click.option("--all-targets", is_flag=True, help="hold out every domain in turn")
@click.option(
    "--repeat",
    type=click.IntRange(min=1),
    default=1,
    help="repeat with seeds seed, seed+1, ... and report mean and spread",
)
@click.pass_context
@handle_errors
def train(ctx, config_path, seed, iterations, ablation, out_dir, held_out, all_targets, repeat):
    """Train on the source domains and evaluate on the held-out one"""

    config = load_experiment_config(config_path, seed, ablation, iterations)
    if held_out is not None:
        config = config.with_overrides(held_out_domain=held_out)
    if all_targets and repeat > 1:
        raise click.UsageError("--all-targets and --repeat cannot be combined")

    if all_targets:
        summary = experiment.run_lodo_suite(config, out_dir)
    elif repeat > 1:
        seeds = [config.seed + i for i in range(repeat)]
        summary = experiment.run_repeated(config, seeds, out_dir)
    else:
        report = experiment.run_experiment(config, out_dir, progress=ctx.obj["progress"])
        summary = {
            "accuracy": report.accuracy,
            "per_class_accuracy": report.per_class_accuracy,
            "mean_predictive_entropy": report.mean_predictive_entropy,
        }
    if out_dir is not None and (all_targets or repeat > 1):
        write_json(Path(out_dir) / "summary.json", summary)
    echo_json(summary)


@cli.command()
@experiment_options
@click.option(
    "--checkpoint",
    type=click.Path(exists=True, dir_okay=False),
    required=True,
    help="model.npz written by train",
)
@click.option("--held-out", type=click.IntRange(min=0), help="id of the held-out domain")
@click.option("--out-dir", type=click.Path(file_okay=False), help="write evaluation.json here")
@handle_errors
def evaluate(config_path, seed, iterations, ablation, checkpoint, held_out, out_dir):
    """Held-out metrics of a trained checkpoint"""

    config = load_experiment_config(config_path, seed, ablation, iterations)
    if held_out is not None:
        config = config.with_overrides(held_out_domain=held_out)
    model = load_checkpoint(checkpoint)
    domains = experiment.load_experiment_domains(config)
    _, target = experiment.split_domains(config, domains)
    metrics = predict_domain(config.train, target, model)
    result = {
        "accuracy": metrics.accuracy,
        "per_class_accuracy": {str(k): v for k, v in metrics.per_class_accuracy.items()},
        "mean_predictive_entropy": metrics.mean_predictive_entropy,
        "majority_baseline": metrics.majority_baseline,
        "n_samples": metrics.n_samples,
        "held_out_domain": config.held_out_domain,
    }
    if out_dir is not None:
        write_json(Path(out_dir) / "evaluation.json", result)
    echo_json(result)


def kernel_options(command):
    command = click.option("--lambda2", type=float, default=1.0, help="level-2 bandwidth")(command)
    command = click.option("--lambda1", type=float, default=1.0, help="level-1 bandwidth")(command)
    return command


@cli.command("mmd")
@click.argument("x_file", type=click.Path(exists=True, dir_okay=False))
@click.argument("y_file", type=click.Path(exists=True, dir_okay=False))
@kernel_options
@click.option(
    "--estimator",
    type=click.Choice([e.value for e in Estimator]),
    default=Estimator.BIASED_V_STATISTIC.value,
)
@handle_errors
def mmd_command(x_file, y_file, lambda1, lambda2, estimator):
    """Squared MMD between the point sets of two CSV files"""

    cfg = KernelConfig(lambda1=lambda1, lambda2=lambda2, estimator=estimator)
    x = domain_data.read_points_csv(x_file)
    y = domain_data.read_points_csv(y_file)
    value = float(mmd2(cfg, x, y).detach())
    echo_json({"mmd2": value, "estimator": estimator, "n_x": len(x), "n_y": len(y)})


@cli.command("pmmd")
@click.argument("l_file", type=click.Path(exists=True, dir_okay=False))
@click.argument("t_file", type=click.Path(exists=True, dir_okay=False))
@kernel_options
@click.option("--linear", is_flag=True, help="also report the linear-time estimate")
@click.option("--seed", type=int, default=0, help="seed of the linear estimator pairing")
@handle_errors
def pmmd_command(l_file, t_file, lambda1, lambda2, linear, seed):
    """Probabilistic MMD between the embedding domains of two CSV files"""

    cfg = KernelConfig(lambda1=lambda1, lambda2=lambda2)
    left = domain_data.read_embeddings_csv(l_file)
    right = domain_data.read_embeddings_csv(t_file)
    value = float(pmmd2(cfg, left, right).detach())
    result = {"pmmd2": value, "n_l": len(left), "n_t": len(right)}
    if linear:
        pairing = draw_linear_pairing(len(left), len(right), numpy_stream(seed, "pmmd-linear"))
        result["pmmd2_linear"] = float(pmmd2_linear(cfg, left, right, pairing=pairing).detach())
    echo_json(result)


@cli.command("sweep-t")
@experiment_options
@click.option(
    "-t",
    "t_values",
    type=click.IntRange(min=1),
    multiple=True,
    default=(1, 2, 5, 10, 20),
    show_default=True,
    help="number of Monte Carlo passes (repeatable)",
)
@click.option("--repeats", type=click.IntRange(min=2), default=30, show_default=True)
@click.option("--out-dir", type=click.Path(file_okay=False), help="write sweep.json here")
@handle_errors
def sweep_t_command(config_path, seed, iterations, ablation, t_values, repeats, out_dir):
    """Held-out accuracy and P-MMD estimator spread as functions of T"""

    config = load_experiment_config(config_path, seed, ablation, iterations)
    accuracy = experiment.sweep_t(config, t_values)

    domains = experiment.load_experiment_domains(config)
    sources, target = experiment.split_domains(config, domains)
    n_classes = max(2, int(max(int(d.labels.max()) for d in domains)) + 1)
    model = experiment.prepare_model(config, sources, target.d, n_classes)
    spread = experiment.estimator_spread(
        model, sources, t_values, repeats, config.kernel, config.seed
    )
    result = {"accuracy": accuracy, "pmmd2_std": {str(t): v for t, v in spread.items()}}
    if out_dir is not None:
        write_json(Path(out_dir) / "sweep.json", result)
    echo_json(result)


@cli.command(context_settings={"ignore_unknown_options": True})
@click.argument("selfcheck_args", nargs=-1, type=click.UNPROCESSED)
def selfcheck(selfcheck_args: List[str]):
    """Cross-check the fast numerics against brute-force references (see selfcheck.py -h)"""

    import selfcheck as runner

    sys.exit(runner.main(list(selfcheck_args)))


if __name__ == "__main__":
    cli()
