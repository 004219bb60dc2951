# File: cli.py
"""
Command-line entry point.

    python cli.py gen-data --tasks mv2v_inpaint,v2v_depth --count 100 --seed 7 --out data/train
    python cli.py train --data data/train --config configs/tiny.yaml --out runs/toy
    python cli.py sample --ckpt runs/toy --task mv2v_inpaint --seed 3 --out runs/toy/sample
    python cli.py eval --ckpt runs/toy --data data/val --out runs/toy/eval
    python cli.py ablate --axis decouple --seeds 5 --out runs/ablate-decouple
    python cli.py check

Exit codes: 0 success, 1 validation or check failure, 2 usage error.
"""
import functools
import logging
import os
import sys

import click
import pandas as pd
from tabulate import tabulate

from src.ablation import AXES, ablate, write_ablation
from src.checkpoint import load, save
from src.checks import run_checks
from src.config import AblationConfig, default_configs, load_config
from src.container import read_dataset, write_dataset, write_video
from src.datagen import generate_dataset, make_sample, resolve_tasks
from src.errors import ConfigError, VaceError
from src.evaluation import evaluate, write_report
from src.logging_utils import configure_logging
from src.sampler import euler_sample
from src.train import fit, write_loss_log

logger = logging.getLogger(__name__)


def _configs(path):
    return default_configs() if path is None else load_config(path)


def _handle_errors(command):
    """Config problems are usage errors (exit 2); any other package error is a failure (exit 1)."""
    @functools.wraps(command)
    def wrapper(*args, **kwargs):
        try:
            return command(*args, **kwargs)
        except ConfigError as e:
            raise click.UsageError(str(e))
        except VaceError as e:
            logger.error(f"{command.__name__.replace('_', '-')} failed: {str(e)}")
            click.echo(f"error: {e}", err=True)
            sys.exit(1)
    return wrapper


@click.group()
@click.option("--log-level", type=click.Choice(["DEBUG", "INFO", "WARNING", "ERROR"], case_sensitive=False),
              default="INFO", show_default=True)
@click.option("--log-json", type=click.Path(dir_okay=False), default=None, help="Also write JSON log records here")
@click.option("--progress/--no-progress", default=True, help="Show progress bars")
@click.pass_context
def cli(ctx, log_level, log_json, progress):
    """Video condition unit toolkit: data generation, training, sampling and evaluation."""
    configure_logging(log_level, log_json)
    ctx.obj = {"progress": progress}


@cli.command("gen-data")
@click.option("--tasks", default="all", show_default=True, help="Comma-separated task names or 'all'")
@click.option("--count", type=click.IntRange(min=0), required=True)
@click.option("--seed", type=click.IntRange(min=0), default=0, show_default=True)
@click.option("--out", type=click.Path(file_okay=False), required=True)
@click.option("--split", default="train", show_default=True, help="Seed stream name (train, val, ...)")
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False), default=None)
@click.option("--n-jobs", type=int, default=1, show_default=True)
@click.pass_context
@_handle_errors
def gen_data(ctx, tasks, count, seed, out, split, config_path, n_jobs):
    """Generate a synthetic dataset container."""
    geometry = _configs(config_path)["data"]
    try:
        tasks = resolve_tasks(tasks)
    except VaceError as e:
        raise click.BadParameter(str(e), param_hint="--tasks")
    samples = generate_dataset(tasks, count, seed, geometry, split, n_jobs, ctx.obj["progress"])
    write_dataset(samples, out)
    click.echo(f"wrote {len(samples)} samples to {out}")


@cli.command()
@click.option("--data", type=click.Path(exists=True, file_okay=False), required=True)
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False), default=None)
@click.option("--out", type=click.Path(file_okay=False), required=True)
@click.option("--val-data", type=click.Path(exists=True, file_okay=False), default=None,
              help="Validation container (default: generated from the training tasks)")
@click.option("--steps", type=click.IntRange(min=0), default=None, help="Override train.steps")
@click.pass_context
@_handle_errors
def train(ctx, data, config_path, out, val_data, steps):
    """Train a model and write its checkpoint, loss log and validation history."""
    configs = _configs(config_path)
    model_cfg, train_cfg = configs["model"], configs["train"]
    if steps is not None:
        train_cfg = train_cfg.model_copy(update={"steps": steps})
    dataset = read_dataset(data)
    if val_data:
        valset = read_dataset(val_data)
    else:
        tasks = sorted({s.task for s in dataset})
        valset = generate_dataset(tasks, train_cfg.val_per_task * len(tasks), train_cfg.seed, configs["data"], "val")
    state, history = fit(model_cfg, train_cfg, dataset, valset=valset, progress=ctx.obj["progress"],
                         eval_times=configs["eval"].eval_times)
    save(state, out, model_cfg, train_cfg)
    write_loss_log(state.loss_log, os.path.join(out, "loss_log.tsv"))
    rows = [(step, task, loss, count) for step, losses in history for task, (loss, count) in losses.items()]
    pd.DataFrame(rows, columns=["step", "task", "loss", "count"]).to_csv(
        os.path.join(out, "validation.tsv"), sep="\t", index=False, float_format="%.6g")
    click.echo(f"trained {state.step} steps; checkpoint in {out}")


@cli.command()
@click.option("--ckpt", type=click.Path(exists=True, file_okay=False), required=True)
@click.option("--task", default=None, help="Generate the conditioning unit for this task")
@click.option("--vcu-file", type=click.Path(exists=True, file_okay=False), default=None,
              help="Container whose first sample provides the conditioning unit")
@click.option("--seed", type=click.IntRange(min=0), default=0, show_default=True)
@click.option("--steps", type=click.IntRange(min=1), default=None)
@click.option("--guide", type=click.FloatRange(min=0.0), default=None)
@click.option("--composite-inactive/--no-composite-inactive", default=None)
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False), default=None)
@click.option("--out", type=click.Path(file_okay=False), required=True)
@_handle_errors
def sample(ckpt, task, vcu_file, seed, steps, guide, composite_inactive, config_path, out):
    """Generate a video for one conditioning unit."""
    if (task is None) == (vcu_file is None):
        raise click.UsageError("give exactly one of --task or --vcu-file")
    configs = _configs(config_path)
    checkpoint = load(ckpt)
    if task is not None:
        try:
            source = make_sample(task, seed, configs["data"])
        except VaceError as e:
            raise click.BadParameter(str(e), param_hint="--task")
    else:
        samples = read_dataset(vcu_file)
        if not samples:
            raise click.BadParameter(f"{vcu_file} holds no samples", param_hint="--vcu-file")
        source = samples[0]
    update = {"seed": seed}
    for key, value in (("steps", steps), ("guide_scale", guide), ("composite_inactive", composite_inactive)):
        if value is not None:
            update[key] = value
    sample_cfg = configs["sample"].model_copy(update=update)
    video = euler_sample(checkpoint.params, checkpoint.model_cfg, source.vcu, sample_cfg)
    write_video(source.vcu, video, out, task=source.task, seed=seed)
    click.echo(f"wrote {len(video)} frames to {out}")


@cli.command("eval")
@click.option("--ckpt", type=click.Path(exists=True, file_okay=False), required=True)
@click.option("--data", type=click.Path(exists=True, file_okay=False), required=True)
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False), default=None)
@click.option("--out", type=click.Path(file_okay=False), required=True)
@_handle_errors
def eval_command(ckpt, data, config_path, out):
    """Evaluate a checkpoint on a validation container."""
    checkpoint = load(ckpt)
    report = evaluate(checkpoint.params, checkpoint.model_cfg, read_dataset(data), _configs(config_path)["eval"])
    write_report(report, out)
    click.echo(f"mean validation loss {report.mean_loss:.6g}; report in {out}")


@cli.command("ablate")
@click.option("--axis", type=click.Choice(AXES), required=True)
@click.option("--seeds", type=click.IntRange(min=1), default=1, show_default=True)
@click.option("--steps", type=click.IntRange(min=0), default=None, help="Training budget per arm")
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False), default=None)
@click.option("--out", type=click.Path(file_okay=False), required=True)
@click.pass_context
@_handle_errors
def ablate_command(ctx, axis, seeds, steps, config_path, out):
    """Run budget-matched training arms along one axis."""
    configs = _configs(config_path)
    update = {"axis": axis, "seeds": seeds}
    if steps is not None:
        update["steps"] = steps
    ablation_cfg = AblationConfig.model_validate({**configs["ablate"].model_dump(), **update})
    report = ablate(axis, configs["model"], configs["train"], ablation_cfg, configs["data"], ctx.obj["progress"])
    write_ablation(report, out)
    click.echo(tabulate(report.summary.values.tolist(), headers=list(report.summary.columns), floatfmt=".4g"))


@cli.command()
@click.option("--only", multiple=True, help="Run only the named check(s)")
def check(only):
    """Run the built-in invariant and gradient suite."""
    results = run_checks(set(only) or None)
    click.echo(tabulate([(r.name, "ok" if r.passed else "FAILED", f"{r.seconds:.1f}s", r.detail) for r in results],
                        headers=["check", "status", "time", "detail"]))
    if not results or not all(r.passed for r in results):
        sys.exit(1)


if __name__ == "__main__":
    cli()
