# acrkn/services/evaluation_service.py

import logging
from concurrent.futures import ProcessPoolExecutor
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from domain.config import RunConfig, SyntheticSource, config_to_dict, resolve_config
from domain.errors import ConfigError, DataError
from domain.models import Episodes, EvaluationRow, InverseModel, NormStats
from services import data_service, model_service, training_service
from services.model_service import Model
from utils.tensor import no_graph

logger = logging.getLogger(__name__)

DEFAULT_HORIZONS = (1, 5, 10, 20)

ABLATION_GRIDS: Dict[str, Dict[str, Dict[str, Any]]] = {
    "control-kind": {
        "linear": {"control_kind": "linear"},
        "locally-linear": {"control_kind": "locally-linear"},
        "nonlinear": {"control_kind": "nonlinear"},
    },
    "action-feedback": {
        "feedback": {"mode": "inverse", "action_feedback": True},
        "no-feedback": {"mode": "inverse", "action_feedback": False},
    },
    "action-encoding": {
        "ac-rkn": {"mode": "forward", "action_as_observation": False},
        "actions-as-observations": {"mode": "forward", "action_as_observation": True},
    },
}


# ---------- windows ----------

def rolling_windows(
        episodes: Episodes,
        warmup: int,
        horizon: int,
        stride: int,
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    Cut (prefix observations, actions, future observations) windows starting every
    `stride` steps: shapes (W, P, d_o), (W, P + H - 1, d_a), (W, H, d_o).
    """
    if warmup < 1 or horizon < 1 or stride < 1:
        raise ConfigError(f"warmup, horizon and stride must be >= 1 (got {warmup}, {horizon}, {stride})")
    prefixes, actions, futures = [], [], []
    span = warmup + horizon
    for o, a in zip(episodes.observations, episodes.actions):
        for start in range(0, o.shape[0] - span + 1, stride):
            prefixes.append(o[start:start + warmup])
            actions.append(a[start:start + span - 1])
            futures.append(o[start + warmup:start + span])
    if not prefixes:
        raise DataError(f"No episode is long enough for warmup {warmup} + horizon {horizon}")
    return np.stack(prefixes), np.stack(actions), np.stack(futures)


# ---------- forward ----------

def evaluate_forward(
        model: Model,
        episodes: Episodes,
        stats: NormStats,
        horizons: Sequence[int] = DEFAULT_HORIZONS,
        warmup: int = 60,
        stride: int = 10,
        label: str = "ac-rkn",
) -> List[EvaluationRow]:
    """
    Per-horizon RMSE in raw units, and NLL in normalized units when the model
    has a variance decoder. `episodes` are normalized.
    """
    horizon = max(horizons)
    prefixes, actions, futures = rolling_windows(episodes, warmup, horizon, stride)
    with no_graph():
        trace = model_service.forecast(model, prefixes, actions, horizon)

    rows = []
    for h in horizons:
        step = warmup - 1 + h - 1
        pred = trace.predictions[step].value
        truth = futures[:, h - 1]
        err = (pred - truth) * stats.obs_std
        nll = None
        if trace.variances:
            var = trace.variances[step].value
            nll = float(np.mean(0.5 * (np.log(2.0 * np.pi * var) + (pred - truth) ** 2 / var)))
        rows.append(EvaluationRow(model=label, horizon=h, rmse=float(np.sqrt(np.mean(err ** 2))), nll=nll))
    return rows


def evaluate_copy_last(
        episodes: Episodes,
        stats: NormStats,
        horizons: Sequence[int] = DEFAULT_HORIZONS,
        warmup: int = 60,
        stride: int = 10,
) -> List[EvaluationRow]:
    """Baseline that repeats the last observed value for every horizon."""
    prefixes, _, futures = rolling_windows(episodes, warmup, max(horizons), stride)
    last = prefixes[:, -1]
    return [
        EvaluationRow(
            model="copy-last",
            horizon=h,
            rmse=float(np.sqrt(np.mean(((futures[:, h - 1] - last) * stats.obs_std) ** 2))),
        )
        for h in horizons
    ]


# ---------- inverse ----------

def evaluate_inverse(model: InverseModel, episodes: Episodes, stats: NormStats, label: str = "ac-rkn-inverse") -> List[EvaluationRow]:
    """Raw-unit action RMSE over steps 1..T-2, plus the hold-last-action baseline."""
    sq_model, sq_hold, count = 0.0, 0.0, 0
    with no_graph():
        for batch in data_service.make_batches(episodes, 64, np.random.default_rng(0)):
            trace = model_service.rollout_inverse(model, batch)
            valid = model_service.action_pairs(batch)
            for t in np.flatnonzero(valid.any(axis=0)):
                rows = valid[:, t]
                truth = batch.actions[rows, t]
                err = (truth - trace.actions[t].value[rows]) * stats.act_std
                hold = (truth - batch.actions[rows, t - 1]) * stats.act_std
                sq_model += float(np.sum(err ** 2))
                sq_hold += float(np.sum(hold ** 2))
                count += truth.size
    if count == 0:
        raise DataError("Episodes are too short to evaluate actions (need T >= 3)")
    return [
        EvaluationRow(model=label, horizon=1, rmse=float(np.sqrt(sq_model / count))),
        EvaluationRow(model="hold-last-action", horizon=1, rmse=float(np.sqrt(sq_hold / count))),
    ]


def evaluate_model(
        model: Model,
        episodes: Episodes,
        stats: NormStats,
        horizons: Sequence[int] = DEFAULT_HORIZONS,
        warmup: int = 60,
        stride: int = 10,
        label: Optional[str] = None,
) -> List[EvaluationRow]:
    if isinstance(model, InverseModel):
        return evaluate_inverse(model, episodes, stats, label=label or "ac-rkn-inverse")
    return evaluate_forward(model, episodes, stats, horizons, warmup, stride, label=label or "ac-rkn")


def rows_to_frame(rows: Sequence[EvaluationRow]) -> pd.DataFrame:
    return pd.DataFrame(
        [{"model": r.model, "horizon": r.horizon, "rmse": r.rmse, "nll": r.nll} for r in rows],
        columns=["model", "horizon", "rmse", "nll"],
    )


def check_dims(manifest: data_service.RunManifest, episodes: Episodes) -> None:
    if (manifest.obs_dim, manifest.action_dim) != (episodes.obs_dim, episodes.action_dim):
        raise DataError(
            f"Checkpoint expects d_o={manifest.obs_dim}, d_a={manifest.action_dim}; "
            f"dataset has d_o={episodes.obs_dim}, d_a={episodes.action_dim}"
        )


def held_out_ids(run: data_service.RunManifest, source: data_service.DatasetSource,
                 manifest: data_service.DatasetManifest) -> List[int]:
    """
    Test episodes for a run: the split recorded at training time when `source`
    is the dataset it trained on, otherwise the split that comes with `source`.
    """
    if run.test_ids and data_service.same_source(run.dataset, source):
        return list(run.test_ids)
    return list(manifest.test_ids)


# ---------- ablation ----------

def _ablation_cell(job: Dict[str, Any]) -> List[Dict[str, Any]]:
    """One (variant, seed) cell; top-level so it can run in a worker process."""
    config = RunConfig(**job["config"])
    episodes, manifest = data_service.load_source(job["dataset"], seed=config.seed)
    train_eps, val_eps, test_eps, stats = training_service.prepare_data(
        episodes, manifest.train_ids, manifest.test_ids, config,
    )
    model = model_service.build_model(config, episodes.obs_dim, episodes.action_dim)
    training_service.train(model, train_eps, val_eps, config)
    rows = evaluate_model(model, test_eps, stats, job["horizons"], job["warmup"], job["stride"])
    return [
        {"variant": job["variant"], "seed": config.seed, "horizon": r.horizon, "rmse": r.rmse}
        for r in rows if r.model.startswith("ac-rkn")
    ]


def run_ablation(
        grid: str,
        base_config: RunConfig,
        dataset: Optional[data_service.DatasetSource],
        seeds: Sequence[int] = (0, 1, 2),
        horizons: Sequence[int] = DEFAULT_HORIZONS,
        warmup: int = 60,
        stride: int = 10,
        workers: int = 1,
) -> pd.DataFrame:
    """
    Train every variant of `grid` once per seed and report the median
    test RMSE per (variant, horizon): columns variant, horizon, median_rmse, n_seeds.
    """
    if grid not in ABLATION_GRIDS:
        raise ConfigError(f"Unknown ablation grid: {grid}. Expected one of {sorted(ABLATION_GRIDS)}")
    if len(seeds) < 1:
        raise ConfigError("Ablation needs at least one seed")
    source = dataset if dataset is not None else base_config.dataset
    if source is None:
        raise ConfigError("No dataset: pass --data or set \"dataset\" in the config")
    if not isinstance(source, SyntheticSource):
        source = str(source)

    base = config_to_dict(base_config)
    jobs = []
    for variant, overrides in ABLATION_GRIDS[grid].items():
        for seed in seeds:
            config = resolve_config(base_config.preset, base, {**overrides, "seed": seed})
            jobs.append({
                "variant": variant,
                "config": config_to_dict(config),
                "dataset": source,
                "horizons": list(horizons),
                "warmup": warmup,
                "stride": stride,
            })
    logger.info("Ablation %s: %d variants x %d seeds, %d worker(s)",
                grid, len(ABLATION_GRIDS[grid]), len(seeds), workers)

    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_ablation_cell, jobs))
    else:
        results = [_ablation_cell(job) for job in jobs]

    frame = pd.DataFrame([row for rows in results for row in rows])
    order = {name: i for i, name in enumerate(ABLATION_GRIDS[grid])}
    summary = (
        frame.groupby(["variant", "horizon"], sort=False)
        .agg(median_rmse=("rmse", "median"), n_seeds=("seed", "nunique"))
        .reset_index()
    )
    summary["_order"] = summary["variant"].map(order)
    return summary.sort_values(["_order", "horizon"], kind="stable").drop(columns="_order").reset_index(drop=True)
