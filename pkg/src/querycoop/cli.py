"""Command line entry point: ``querycoop train|eval|sweep|report``.

Exit codes: 0 success, 2 configuration error, 3 numerical failure.
"""
from __future__ import annotations

import json
import logging
import sys
from pathlib import Path

import click

from .config import ConfigError, load_config
from .experiments import (
    SWEEP_AXES,
    CheckpointError,
    NumericalError,
    run_eval,
    run_report,
    run_sweep,
    run_train,
)
from .model import MODES

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3


def _fail(code: int, msg: str):
    click.echo(f"error: {msg}", err=True)
    sys.exit(code)


def _load(path):
    try:
        return load_config(path)
    except ConfigError as exc:
        _fail(EXIT_CONFIG, f"invalid config: {exc}")


def _checkpoint(run_dir: Path, checkpoint):
    path = Path(checkpoint) if checkpoint else run_dir / "checkpoint.npz"
    if not path.exists():
        _fail(EXIT_CONFIG, f"checkpoint {path} not found")
    return path


@click.group()
@click.option("-v", "--verbose", is_flag=True, help="Log progress to stderr.")
def main(verbose: bool):
    """Object-query cooperative detection experiments."""
    logging.basicConfig(level=logging.INFO if verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")


@main.command()
@click.option("-c", "--config", "config_path", required=True, type=click.Path(), help="YAML config file.")
@click.option("-o", "--out", "run_dir", required=True, type=click.Path(file_okay=False), help="Run directory.")
def train(config_path, run_dir):
    """Train a model and write checkpoint.npz and loss.csv."""
    cfg = _load(config_path)
    try:
        result = run_train(cfg, run_dir)
    except NumericalError as exc:
        _fail(EXIT_NUMERIC, f"{exc}; diagnostics in {Path(run_dir) / 'diagnostics.json'}")
    click.echo(f"trained {result.steps} steps in {result.seconds:.1f}s -> {result.checkpoint}")


@main.command("eval")
@click.option("-c", "--config", "config_path", required=True, type=click.Path())
@click.option("-o", "--out", "run_dir", required=True, type=click.Path(file_okay=False))
@click.option("--checkpoint", type=click.Path(), default=None, help="Defaults to RUN_DIR/checkpoint.npz.")
@click.option("-m", "--mode", "modes", multiple=True, type=click.Choice(MODES), default=("coop",))
def eval_(config_path, run_dir, checkpoint, modes):
    """Evaluate one or more modes; writes eval_<mode>.json/.csv."""
    cfg = _load(config_path)
    ckpt = _checkpoint(Path(run_dir), checkpoint)
    for mode in modes:
        try:
            rep = run_eval(cfg, ckpt, mode, out_dir=run_dir)
        except CheckpointError as exc:
            _fail(EXIT_CONFIG, str(exc))
        aps = " ".join(f"{k}={v:.4f}" for k, v in rep.items() if k.startswith("ap@"))
        click.echo(f"{mode}: {aps} payload={rep['mean_payload_bytes']:.0f}B/frame")


@main.command()
@click.option("-c", "--config", "config_path", required=True, type=click.Path())
@click.option("-o", "--out", "run_dir", required=True, type=click.Path(file_okay=False))
@click.option("-a", "--axis", required=True, type=click.Choice(SWEEP_AXES))
@click.option("--checkpoint", type=click.Path(), default=None)
def sweep(config_path, run_dir, axis, checkpoint):
    """Sweep one axis; writes sweep_<axis>.csv/.json."""
    cfg = _load(config_path)
    ckpt = None if axis == "n_queries" else _checkpoint(Path(run_dir), checkpoint)
    try:
        rows = run_sweep(cfg, ckpt, axis, out_dir=run_dir)
    except CheckpointError as exc:
        _fail(EXIT_CONFIG, str(exc))
    except NumericalError as exc:
        _fail(EXIT_NUMERIC, str(exc))
    click.echo(f"{len(rows)} rows -> {Path(run_dir) / f'sweep_{axis}.csv'}")


@main.command()
@click.argument("run_dir", type=click.Path(file_okay=False))
def report(run_dir):
    """Collect eval and sweep outputs of RUN_DIR into report.json."""
    try:
        summary = run_report(run_dir)
    except FileNotFoundError as exc:
        _fail(EXIT_CONFIG, str(exc))
    click.echo(json.dumps({k: v for k, v in summary.items() if k != "sweeps"}, indent=2))


if __name__ == "__main__":
    main()
