# acrkn/services/training_service.py

import logging
import time
from dataclasses import asdict
from pathlib import Path
from typing import Optional, Tuple

import numpy as np
import pandas as pd
from pydantic import ValidationError

from domain.config import RunConfig, SyntheticSource, config_to_dict
from domain.errors import CheckpointError, ConfigError, NumericsError, TrainingDivergedError
from domain.models import EpochMetrics, Episodes, InverseModel, NormStats, SequenceBatch, TrainResult
from services import data_service, model_service
from services.model_service import Model
from utils import csv_io
from utils.formatting import format_duration
from utils.optim import OptimizerState, clip_grad_norm, optimizer_step
from utils.tensor import Graph, Tensor, backward, no_graph

logger = logging.getLogger(__name__)

CHECKPOINT_FILE = "checkpoint.json"
METRICS_FILE = "metrics.csv"
RUN_MANIFEST_FILE = "run_manifest.json"


def compute_loss(model: Model, batch: SequenceBatch, config: RunConfig) -> Tensor:
    if isinstance(model, InverseModel):
        trace = model_service.rollout_inverse(model, batch)
        return model_service.loss_inverse(trace, batch, model.lam)
    trace = model_service.rollout_forward(model, batch)
    if config.loss == "nll":
        return model_service.loss_nll(trace, batch)
    return model_service.loss_forward(trace, batch)


def _mask(model: Model, batch: SequenceBatch, config: RunConfig, rng: np.random.Generator) -> SequenceBatch:
    # inverse models always see o_t
    if isinstance(model, InverseModel):
        return batch
    return data_service.apply_protocol(batch, config.protocol, config.prefix_len, config.drop_fraction, rng)


def evaluate_loss(model: Model, episodes: Episodes, config: RunConfig, seed: int) -> float:
    """Episode-weighted mean loss without recording a graph; masks are drawn from `seed`."""
    rng = np.random.default_rng(seed)
    total, count = 0.0, 0
    with no_graph():
        for batch in data_service.make_batches(episodes, config.batch_size, rng):
            loss = compute_loss(model, _mask(model, batch, config, rng), config).item()
            total += loss * batch.num_episodes
            count += batch.num_episodes
    return total / count


def train(
        model: Model,
        train_episodes: Episodes,
        val_episodes: Optional[Episodes],
        config: RunConfig,
        out_dir: Optional[str | Path] = None,
) -> TrainResult:
    """
    Minibatch BPTT over full (normalized) sequences.

    Every epoch appends one row to metrics.csv and the parameters with the
    lowest validation loss are checkpointed; they are restored before returning.
    Divergence raises TrainingDivergedError with the epoch and batch index.
    """
    params = model.params
    rng = np.random.default_rng(config.seed + 1)
    state = OptimizerState(rule=config.optimizer, momentum=config.momentum)
    if config.window:
        train_episodes = data_service.slice_windows(train_episodes, config.window)
        if val_episodes is not None:
            val_episodes = data_service.slice_windows(val_episodes, config.window)

    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / METRICS_FILE).unlink(missing_ok=True)

    metrics = []
    best_epoch, best_val, best_params = 0, float("inf"), params.snapshot()

    for epoch in range(1, config.epochs + 1):
        started = time.perf_counter()
        batch_losses = []
        for index, batch in enumerate(data_service.make_batches(train_episodes, config.batch_size, rng)):
            masked = _mask(model, batch, config, rng)
            try:
                with Graph() as graph:
                    loss = compute_loss(model, masked, config)
                    backward(graph, loss)
                clip_grad_norm(params, config.grad_clip)
                optimizer_step(params, config.optimizer, config.lr, state)
            except NumericsError as e:
                logger.error("Divergence at epoch %d, batch %d: %s", epoch, index, e)
                raise TrainingDivergedError(epoch, index, float("nan")) from e
            batch_losses.append(loss.item())

        train_loss = float(np.mean(batch_losses))
        try:
            val_loss = evaluate_loss(model, val_episodes, config, config.seed + 2) if val_episodes else train_loss
        except NumericsError as e:
            raise TrainingDivergedError(epoch, -1, float("nan")) from e
        wall_ms = int(round((time.perf_counter() - started) * 1000)) if config.record_wall_time else 0

        row = EpochMetrics(epoch=epoch, train_loss=train_loss, val_loss=val_loss, wall_ms=wall_ms)
        metrics.append(row)
        logger.info("Epoch %d/%d: train %.5f, val %.5f (%s)", epoch, config.epochs, train_loss, val_loss,
                    format_duration(wall_ms))
        if out is not None:
            csv_io.write_csv(pd.DataFrame([asdict(row)]), out / METRICS_FILE, mode="a")

        if val_loss < best_val:
            best_epoch, best_val, best_params = epoch, val_loss, params.snapshot()
            if out is not None:
                params.save(out / CHECKPOINT_FILE)

    params.restore(best_params)
    bank = model_service.forward_of(model).bank
    if bank.clamp_count:
        logger.info("PSD clamp fired %d times during training", bank.clamp_count)
    return TrainResult(metrics=metrics, best_epoch=best_epoch, best_val_loss=best_val, best_params=best_params)


# ---------- runs ----------

def prepare_data(
        episodes: Episodes,
        train_ids, test_ids,
        config: RunConfig,
) -> Tuple[Episodes, Optional[Episodes], Episodes, NormStats]:
    """
    Carve the validation episodes out of the training split, fit normalization
    on what is left, and normalize all three parts with it.
    """
    train_ids = list(train_ids)
    val_ids = []
    if config.val_fraction > 0 and len(train_ids) >= 2:
        order = [train_ids[i] for i in np.random.default_rng(config.seed).permutation(len(train_ids))]
        n_val = min(max(int(round(config.val_fraction * len(order))), 1), len(order) - 1)
        val_ids, train_ids = sorted(order[:n_val]), sorted(order[n_val:])

    train_raw = episodes.subset(train_ids)
    stats = data_service.fit_norm(train_raw)
    train = data_service.normalize_episodes(stats, train_raw)
    val = data_service.normalize_episodes(stats, episodes.subset(val_ids)) if val_ids else None
    test = data_service.normalize_episodes(stats, episodes.subset(list(test_ids)))
    return train, val, test, stats


def train_run(config: RunConfig, dataset: Optional[data_service.DatasetSource], out_dir: str | Path) -> TrainResult:
    """
    Load a dataset, train a fresh model and write checkpoint, metrics and run manifest to `out_dir`.
    With `dataset` None the config's own dataset source is used.
    """
    if dataset is not None:
        source = dataset if isinstance(dataset, SyntheticSource) else str(dataset)
        config = config.model_copy(update={"dataset": source})
    if config.dataset is None:
        raise ConfigError("No dataset: pass --data or set \"dataset\" in the config")
    dataset = config.dataset
    episodes, manifest = data_service.load_source(dataset, seed=config.seed)
    train_eps, val_eps, _, stats = prepare_data(episodes, manifest.train_ids, manifest.test_ids, config)
    model = model_service.build_model(config, episodes.obs_dim, episodes.action_dim)

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    run = data_service.RunManifest(
        mode=config.mode,
        config=config_to_dict(config),
        obs_dim=episodes.obs_dim,
        action_dim=episodes.action_dim,
        lam=config.lam,
        norm=stats.to_dict(),
        dataset=data_service.source_label(dataset),
        train_ids=manifest.train_ids,
        test_ids=manifest.test_ids,
    )
    data_service.write_manifest(run, out / RUN_MANIFEST_FILE)

    result = train(model, train_eps, val_eps, config, out)
    logger.info("Best epoch %d (val %.5f); checkpoint in %s", result.best_epoch, result.best_val_loss, out)
    return result


def load_run(run_dir: str | Path) -> Tuple[Model, NormStats, RunConfig, data_service.RunManifest]:
    run = Path(run_dir)
    manifest = data_service.read_manifest(run / RUN_MANIFEST_FILE, data_service.RunManifest)
    try:
        config = RunConfig(**manifest.config)
    except ValidationError as e:
        raise CheckpointError(f"Run manifest in {run} holds an invalid config: {e}") from e
    model = model_service.build_model(config, manifest.obs_dim, manifest.action_dim)
    checkpoint = run / CHECKPOINT_FILE
    if not checkpoint.exists():
        raise CheckpointError(f"No checkpoint in {run}")
    model.params.load(checkpoint)
    return model, NormStats.from_dict(manifest.norm), config, manifest
