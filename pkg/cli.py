# acrkn/cli.py
"""
Command line entry point.

    python cli.py gen-data --system pendulum-lag --episodes 40 --len 100 --seed 7 --out data/pend
    python cli.py train forward --preset desk --data data/pend --out runs/fwd
    python cli.py evaluate --run runs/fwd --data data/pend --out results.csv
    python cli.py predict --run runs/fwd --data data/pend --episode 3 --start 0 --horizon 20 --out pred.csv
    python cli.py gradcheck
    python cli.py ablate --ablate control-kind --data data/pend --out ablation.csv

Exit codes: 0 success, 1 usage or configuration error, 2 runtime failure.
"""

import logging
import sys
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

import click
import numpy as np
import pandas as pd
from rich.console import Console
from rich.logging import RichHandler
from rich.table import Table

from domain import config as settings
from domain.config import RunConfig, load_config_file, resolve_config
from domain.errors import AcrknError, ConfigError, DataError
from domain.models import SYSTEM_KINDS, SyntheticSystem
from domain.presets import PRESETS
from services import data_service, evaluation_service, model_service, training_service
from utils import csv_io
from utils.formatting import format_metric

logger = logging.getLogger("acrkn")
console = Console(stderr=True)


def _setup_logging(level: str) -> None:
    logging.basicConfig(
        level=level.upper(),
        format="%(message)s",
        datefmt="[%X]",
        handlers=[RichHandler(console=console, rich_tracebacks=False, show_path=False)],
        force=True,
    )


def _int_list(text: str) -> List[int]:
    try:
        values = [int(x) for x in text.split(",") if x.strip()]
    except ValueError as e:
        raise click.BadParameter(f"expected comma-separated integers, got {text!r}") from e
    if not values or any(v < 0 for v in values):
        raise click.BadParameter(f"expected non-negative integers, got {text!r}")
    return values


def _print_rows(title: str, frame: pd.DataFrame) -> None:
    table = Table(title=title)
    for col in frame.columns:
        table.add_column(str(col), justify="right" if col != frame.columns[0] else "left")
    for row in frame.itertuples(index=False):
        table.add_row(*[format_metric(v) if isinstance(v, float) else str(v) for v in row])
    console.print(table)


def _default_out(name: str) -> Path:
    return Path(settings.RUNS_DIR) / name


def _run_source(data: Optional[str], config: RunConfig) -> data_service.DatasetSource:
    source = data if data is not None else config.dataset
    if source is None:
        raise ConfigError("Run records no dataset; pass --data")
    return source


# ---------- group ----------

@click.group()
@click.option("--log-level", default=None, help="Overrides ACRKN_LOG_LEVEL.")
def cli(log_level: Optional[str]) -> None:
    """Action-conditional recurrent Kalman networks for actuator dynamics."""
    _setup_logging(log_level or settings.LOG_LEVEL)


# ---------- gen-data ----------

@cli.command("gen-data")
@click.option("--system", "kind", type=click.Choice(SYSTEM_KINDS), default="pendulum-lag", show_default=True)
@click.option("--episodes", type=int, default=50, show_default=True)
@click.option("--len", "length", type=int, default=100, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--dt", type=float, default=None)
@click.option("--tau", type=float, default=None)
@click.option("--noise", type=float, default=None)
@click.option("--backlash", type=float, default=None)
@click.option("--out", type=click.Path(file_okay=False), required=True)
def gen_data(kind: str, episodes: int, length: int, seed: int, dt, tau, noise, backlash, out: str) -> None:
    """Simulate a synthetic actuator system and write trajectories.csv + manifest.json."""
    if length < 2:
        raise click.BadParameter("--len must be >= 2", param_hint="--len")
    if episodes < 2:
        raise click.BadParameter("--episodes must be >= 2 for a train/test split", param_hint="--episodes")
    overrides = {"dt": dt, "tau": tau, "noise_std": noise, "backlash": backlash}
    system = SyntheticSystem(kind=kind, **{k: v for k, v in overrides.items() if v is not None})
    data = data_service.simulate(system, episodes, length, seed)
    data_service.write_dataset(out, data, system, seed)


# ---------- train ----------

def _train_overrides(**flags: Any) -> Dict[str, Any]:
    renames = {"lambda_": "lam", "actions_as_observations": "action_as_observation"}
    return {renames.get(k, k): v for k, v in flags.items() if v is not None}


@cli.command("train")
@click.argument("mode", type=click.Choice(["forward", "inverse"]))
@click.option("--data", type=click.Path(exists=True), default=None,
              help="Dataset directory or CSV file (default: the config's dataset).")
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False), default=None)
@click.option("--preset", type=click.Choice(sorted(PRESETS)), default=None)
@click.option("--out", type=click.Path(file_okay=False), default=None)
@click.option("--seed", type=int, default=None)
@click.option("--epochs", type=int, default=None)
@click.option("--batch-size", type=int, default=None)
@click.option("--lr", type=float, default=None)
@click.option("--optimizer", type=click.Choice(["adam", "sgd"]), default=None)
@click.option("--loss", type=click.Choice(["rmse", "nll"]), default=None)
@click.option("--lambda", "lambda_", type=float, default=None)
@click.option("--control-kind", type=click.Choice(["linear", "locally-linear", "nonlinear"]), default=None)
@click.option("--protocol", type=click.Choice(["prefix", "random", "none"]), default=None)
@click.option("--prefix-len", type=int, default=None)
@click.option("--drop-fraction", type=float, default=None)
@click.option("--window", type=int, default=None)
@click.option("--var-decoder/--no-var-decoder", default=None)
@click.option("--action-feedback/--no-action-feedback", default=None)
@click.option("--actions-as-observations", is_flag=True, default=None)
@click.option("--record-wall-time/--no-record-wall-time", default=None)
def train(mode: str, data: Optional[str], config_path: Optional[str], preset: Optional[str], out: Optional[str], **flags) -> None:
    """Train a forward or inverse model; writes checkpoint.json, metrics.csv and run_manifest.json."""
    file_values = load_config_file(config_path) if config_path else {}
    config = resolve_config(preset, file_values, {"mode": mode, **_train_overrides(**flags)})
    out_dir = Path(out) if out else _default_out(f"{mode}-{config.preset}-seed{config.seed}")
    training_service.train_run(config, data, out_dir)


# ---------- evaluate / predict ----------

@cli.command("evaluate")
@click.option("--run", "runs", multiple=True, required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--data", type=click.Path(exists=True), default=None, help="Default: each run's own dataset.")
@click.option("--horizons", default="1,5,10,20", show_default=True)
@click.option("--warmup", type=int, default=None, help="Observed steps before forecasting (default: the run's prefix_len).")
@click.option("--stride", type=int, default=10, show_default=True)
@click.option("--out", type=click.Path(dir_okay=False), default=None)
def evaluate(runs: Sequence[str], data: Optional[str], horizons: str, warmup: Optional[int], stride: int,
             out: Optional[str]) -> None:
    """Per-horizon RMSE (and NLL) on each run's test split, with the copy-last baseline."""
    horizon_list = [h for h in _int_list(horizons) if h > 0]
    rows = []
    copy_last_done = False
    for run_dir in runs:
        model, stats, config, run = training_service.load_run(run_dir)
        source = _run_source(data, config)
        episodes, manifest = data_service.load_source(source, seed=config.seed)
        evaluation_service.check_dims(run, episodes)
        test_ids = evaluation_service.held_out_ids(run, source, manifest)
        test = data_service.normalize_episodes(stats, episodes.subset(test_ids))
        steps = warmup or config.prefix_len
        label = Path(run_dir).name
        rows += evaluation_service.evaluate_model(model, test, stats, horizon_list, steps, stride, label=label)
        if config.mode == "forward" and not copy_last_done:
            rows += evaluation_service.evaluate_copy_last(test, stats, horizon_list, steps, stride)
            copy_last_done = True

    frame = evaluation_service.rows_to_frame(rows)
    _print_rows("Evaluation", frame)
    if out:
        csv_io.write_csv(frame, out)


@cli.command("predict")
@click.option("--run", "run_dir", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--data", type=click.Path(exists=True), default=None, help="Default: the run's own dataset.")
@click.option("--episode", type=int, required=True)
@click.option("--start", type=int, default=0, show_default=True)
@click.option("--warmup", type=int, default=None)
@click.option("--horizon", type=int, default=20, show_default=True)
@click.option("--out", type=click.Path(dir_okay=False), required=True)
def predict(run_dir: str, data: Optional[str], episode: int, start: int, warmup: Optional[int], horizon: int,
            out: str) -> None:
    """Multi-step forecast for one episode; writes predicted and true observations per step."""
    model, stats, config, run = training_service.load_run(run_dir)
    episodes, _ = data_service.load_source(_run_source(data, config), seed=config.seed)
    evaluation_service.check_dims(run, episodes)
    ep = episodes.subset([episode])
    steps = warmup or config.prefix_len
    obs, act = ep.observations[0], ep.actions[0]
    end = start + steps + horizon
    if start < 0 or end > obs.shape[0]:
        raise DataError(f"Episode {episode} has {obs.shape[0]} steps; start {start} + warmup {steps} "
                        f"+ horizon {horizon} does not fit")

    pred = model_service.predict_multistep(
        model, obs[start:start + steps], act[start:end - 1], horizon, stats,
    )
    truth = obs[start + steps:end]
    frame = pd.DataFrame({"t": np.arange(start + steps, end)})
    for i in range(pred.shape[1]):
        frame[f"o_{i + 1}_pred"] = pred[:, i]
        frame[f"o_{i + 1}_true"] = truth[:, i]
    csv_io.write_csv(frame, out)
    logger.info("Wrote %d predicted steps to %s", horizon, out)


# ---------- gradcheck ----------

@cli.command("gradcheck")
@click.option("--mode", type=click.Choice(["forward", "inverse", "both"]), default="both", show_default=True)
@click.option("--tol", type=float, default=1e-4, show_default=True)
@click.option("--eps", type=float, default=1e-6, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.pass_context
def gradcheck(ctx: click.Context, mode: str, tol: float, eps: float, seed: int) -> None:
    """Finite-difference check of the end-to-end gradients on the tiny preset."""
    modes = ["forward", "inverse"] if mode == "both" else [mode]
    table = Table(title=f"Gradient check (tol {tol:g}, eps {eps:g})")
    for col in ("mode", "parameter", "max rel. error", "flagged", "status"):
        table.add_column(col)

    passed = True
    for m in modes:
        config = resolve_config("tiny", overrides={"mode": m, "seed": seed, "var_decoder": m == "forward",
                                                   "lam": 0.5 if m == "inverse" else None})
        report = model_service.gradcheck_model(config, eps=eps, tol=tol)
        passed &= report.passed
        for name, err in report.max_rel_error.items():
            flagged = len(report.flagged.get(name, []))
            table.add_row(m, name, f"{err:.2e}", str(flagged), "[red]FAIL[/red]" if flagged else "[green]ok[/green]")
    console.print(table)

    if not passed:
        logger.warning("Gradient check failed")
        ctx.exit(2)


# ---------- ablate ----------

@cli.command("ablate")
@click.option("--ablate", "grid", type=click.Choice(sorted(evaluation_service.ABLATION_GRIDS)), required=True)
@click.option("--data", type=click.Path(exists=True), default=None, help="Default: the config's dataset.")
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False), default=None)
@click.option("--preset", type=click.Choice(sorted(PRESETS)), default=None)
@click.option("--seeds", default="0,1,2", show_default=True)
@click.option("--epochs", type=int, default=None)
@click.option("--lambda", "lambda_", type=float, default=None)
@click.option("--horizons", default="1,5,10,20", show_default=True)
@click.option("--warmup", type=int, default=None)
@click.option("--stride", type=int, default=10, show_default=True)
@click.option("--workers", type=int, default=None, help="Overrides ACRKN_WORKERS.")
@click.option("--out", type=click.Path(dir_okay=False), default=None)
def ablate(grid: str, data: Optional[str], config_path: Optional[str], preset: Optional[str], seeds: str,
           epochs: Optional[int], lambda_: Optional[float], horizons: str, warmup: Optional[int],
           stride: int, workers: Optional[int], out: Optional[str]) -> None:
    """Median test RMSE per variant over seeds; writes variant,horizon,median_rmse,n_seeds."""
    file_values = load_config_file(config_path) if config_path else {}
    base: RunConfig = resolve_config(preset, file_values, _train_overrides(epochs=epochs, lambda_=lambda_))
    summary = evaluation_service.run_ablation(
        grid, base, data,
        seeds=_int_list(seeds),
        horizons=[h for h in _int_list(horizons) if h > 0],
        warmup=warmup or base.prefix_len,
        stride=stride,
        workers=workers or settings.WORKERS,
    )
    _print_rows(f"Ablation: {grid}", summary)
    csv_io.write_csv(summary, out or _default_out(f"ablation-{grid}.csv"))


# ---------- entry ----------

def main(argv: Optional[Sequence[str]] = None) -> int:
    try:
        code = cli.main(args=list(argv) if argv is not None else None, prog_name="acrkn", standalone_mode=False)
    except click.UsageError as e:
        e.show()
        return 1
    except click.Abort:
        return 1
    except ConfigError as e:
        logger.error("%s", e)
        return 1
    except AcrknError as e:
        logger.error("%s", e)
        return 2
    except OSError as e:
        logger.error("%s", e)
        return 2
    return code if isinstance(code, int) else 0


if __name__ == "__main__":
    sys.exit(main())
