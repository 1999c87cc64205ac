# acrkn/services/model_service.py
"""
Forward and inverse dynamics models built from the cell, the control model
and the codecs, plus their sequence rollouts and losses.

Predictions are deltas on top of a prediction memory: m_t is o_t when it is
observed and the previous prediction ô_t otherwise, and ô_{t+1} = m_t + dec(z⁻_{t+1}).
"""

import logging
from typing import Optional, Union

import numpy as np

from domain.config import RunConfig
from domain.errors import ConfigError, NumericsError
from domain.models import (
    FactorizedBelief,
    ForwardModel,
    GradCheckReport,
    InverseModel,
    NormStats,
    RolloutTrace,
    SequenceBatch,
)
from services import cell_service, codec_service, control_service
from utils.gradcheck import finite_diff_check
from utils.params import ParamStore
from utils.tensor import Tensor, concat, log, mul, reduce_sum, select, sqrt

logger = logging.getLogger(__name__)

LOG_2PI = float(np.log(2.0 * np.pi))

Model = Union[ForwardModel, InverseModel]


# ---------- construction ----------

def build_forward_model(
        params: ParamStore,
        config: RunConfig,
        obs_dim: int,
        action_dim: int,
        rng: np.random.Generator,
) -> ForwardModel:
    m, n = config.m, 2 * config.m
    as_obs = config.action_as_observation
    encoder_in = obs_dim + action_dim if as_obs else obs_dim
    control_kind = "none" if as_obs else config.control_kind

    encoder = codec_service.create_encoder(params, encoder_in, m, config.encoder_hidden, rng)
    bank = cell_service.create_transition_bank(params, m, config.num_basis, config.bandwidth, rng)
    control = control_service.default_architecture(
        control_kind, action_dim, n, config.preset,
        params=params, rng=rng, hidden=config.control_hidden,
        num_basis=config.num_control_basis or config.num_basis,
    )
    obs_decoder = codec_service.create_decoder(params, n, obs_dim, config.decoder_hidden, rng, "obs_decoder")
    var_decoder = None
    if config.var_decoder:
        var_decoder = codec_service.create_decoder(
            params, n, obs_dim, config.var_decoder_hidden, rng, "var_decoder", positive=True,
        )

    return ForwardModel(
        params=params,
        obs_dim=obs_dim,
        action_dim=action_dim,
        m=m,
        encoder=encoder,
        bank=bank,
        control=control,
        obs_decoder=obs_decoder,
        var_decoder=var_decoder,
        init_var=config.init_var,
        action_as_observation=as_obs,
    )


def build_model(config: RunConfig, obs_dim: int, action_dim: int) -> Model:
    """Fresh model for `config.mode`, initialized from `config.seed`."""
    if obs_dim < 1 or action_dim < 1:
        raise ConfigError(f"Data dimensions must be positive (d_o={obs_dim}, d_a={action_dim})")
    rng = np.random.default_rng(config.seed)
    params = ParamStore()
    forward = build_forward_model(params, config, obs_dim, action_dim, rng)

    if config.mode == "forward":
        model: Model = forward
    else:
        if config.action_as_observation:
            raise ConfigError("action_as_observation is only available for forward models")
        action_decoder = codec_service.create_decoder(
            params, forward.n + obs_dim, action_dim, config.action_decoder_hidden, rng, "action_decoder",
        )
        model = InverseModel(forward=forward, action_decoder=action_decoder,
                             lam=config.lam, action_feedback=config.action_feedback)

    _check_dims(forward)
    logger.info("Built %s model: d_o=%d d_a=%d m=%d K=%d control=%s, %d weights",
                config.mode, obs_dim, action_dim, config.m, config.num_basis,
                forward.control.kind, params.size())
    return model


def _check_dims(model: ForwardModel) -> None:
    n = model.n
    problems = []
    if model.encoder.latent_dim != model.m:
        problems.append(f"encoder output {model.encoder.latent_dim} != m {model.m}")
    if model.bank.n != n:
        problems.append(f"transition bank n {model.bank.n} != {n}")
    if model.control.latent_dim != n:
        problems.append(f"control output {model.control.latent_dim} != n {n}")
    if model.obs_decoder.input_dim != n or model.obs_decoder.output_dim != model.obs_dim:
        problems.append("observation decoder dimensions")
    if model.var_decoder is not None and (model.var_decoder.input_dim != n
                                          or model.var_decoder.output_dim != model.obs_dim):
        problems.append("variance decoder dimensions")
    if problems:
        raise ConfigError("Inconsistent model dimensions: " + "; ".join(problems))


def forward_of(model: Model) -> ForwardModel:
    return model.forward if isinstance(model, InverseModel) else model


# ---------- rollout ----------

def _check_batch(model: ForwardModel, batch: SequenceBatch) -> None:
    e, t = batch.num_episodes, batch.length
    if batch.obs_dim != model.obs_dim:
        raise NumericsError(f"Batch has {batch.obs_dim} observation channels, model expects {model.obs_dim}")
    if batch.action_dim != model.action_dim:
        raise NumericsError(f"Batch has {batch.action_dim} action channels, model expects {model.action_dim}")
    if batch.obs_mask.shape != (e, t) or batch.target_mask.shape != (e, t):
        raise NumericsError(f"Mask shape {batch.obs_mask.shape} does not match batch ({e}, {t})")
    if batch.actions.shape[:2] != (e, t) or batch.target_next_obs.shape != batch.observations.shape:
        raise NumericsError("Actions or targets are not aligned with observations")


def _choose(observed: np.ndarray, a, b):
    """Row-wise a where observed, else b. Uniform masks skip the select node."""
    if observed.all():
        return a
    if not observed.any():
        return b
    return select(observed[:, None], a, b)


def _rollout(
        model: ForwardModel,
        batch: SequenceBatch,
        inverse: Optional[InverseModel] = None,
) -> RolloutTrace:
    _check_batch(model, batch)
    e, steps = batch.num_episodes, batch.length
    trace = RolloutTrace(mask=batch.obs_mask.copy())

    prior: FactorizedBelief = cell_service.initial_belief(model.m, model.init_var, e)
    last_prediction = Tensor(np.zeros((e, model.obs_dim)))
    zero_action = np.zeros((e, model.action_dim))

    for t in range(steps):
        observed = batch.obs_mask[:, t]
        o_t = Tensor(batch.observations[:, t])
        a_t = batch.actions[:, t]
        memory = _choose(observed, o_t, last_prediction)

        if model.action_as_observation:
            obs = codec_service.encode(model.encoder, concat([memory, Tensor(a_t)], axis=-1))
            posterior = cell_service.update(prior, obs)
        elif observed.all():
            posterior = cell_service.update(prior, codec_service.encode(model.encoder, o_t))
        elif not observed.any():
            posterior = cell_service.update_skip(prior)
        else:
            updated = cell_service.update(prior, codec_service.encode(model.encoder, o_t))
            posterior = cell_service.select_belief(observed, updated, prior)

        z_post = cell_service.latent_mean(posterior)
        if inverse is not None:
            previous = batch.actions[:, t - 1] if t > 0 else zero_action
            delta_a = codec_service.decode_action(inverse.action_decoder, z_post, Tensor(batch.target_next_obs[:, t]))
            trace.actions.append(delta_a + previous)
            if not inverse.action_feedback:
                a_t = zero_action

        control = control_service.control_increment(model.control, a_t, z_post)
        prior = cell_service.predict(posterior, model.bank, control)

        delta = codec_service.decode_obs(model.obs_decoder, cell_service.latent_mean(prior))
        prediction = memory + delta

        trace.posteriors.append(posterior)
        trace.priors.append(prior)
        trace.memory.append(memory)
        trace.deltas.append(delta)
        trace.predictions.append(prediction)
        if model.var_decoder is not None:
            trace.variances.append(codec_service.decode_var(model.var_decoder, prior))
        last_prediction = prediction

    return trace


def rollout_forward(model: ForwardModel, batch: SequenceBatch) -> RolloutTrace:
    return _rollout(forward_of(model), batch)


def rollout_inverse(model: InverseModel, batch: SequenceBatch) -> RolloutTrace:
    """
    Per step: update with o_t, decode â_t from (z⁺_t, o_{t+1}), then predict
    with the executed a_t (b(0) when action feedback is disabled).
    """
    if not isinstance(model, InverseModel):
        raise ConfigError("rollout_inverse needs an InverseModel")
    return _rollout(model.forward, batch, inverse=model)


# ---------- losses ----------

def _target_pairs(batch: SequenceBatch) -> int:
    count = int(batch.target_mask.sum())
    if count == 0:
        raise NumericsError("No (step, next observation) pairs to evaluate the loss on")
    return count


def loss_forward(trace: RolloutTrace, batch: SequenceBatch) -> Tensor:
    """sqrt(sum of squared prediction errors / number of target pairs), normalized units."""
    count = _target_pairs(batch)
    total = None
    for t, prediction in enumerate(trace.predictions):
        weight = batch.target_mask[:, t]
        if not weight.any():
            continue
        err = Tensor(batch.target_next_obs[:, t]) - prediction
        term = reduce_sum(mul(err * err, weight[:, None].astype(np.float64)))
        total = term if total is None else total + term
    return sqrt(total / float(count))


def loss_nll(trace: RolloutTrace, batch: SequenceBatch) -> Tensor:
    """Mean over target pairs and channels of 0.5 [ln(2π σ²) + err² / σ²]."""
    if not trace.variances:
        raise ConfigError("loss_nll needs a model with a variance decoder")
    count = _target_pairs(batch) * batch.obs_dim
    total = None
    for t, prediction in enumerate(trace.predictions):
        weight = batch.target_mask[:, t]
        if not weight.any():
            continue
        var = trace.variances[t]
        err = Tensor(batch.target_next_obs[:, t]) - prediction
        term = 0.5 * (log(var) + LOG_2PI + err * err / var)
        term = reduce_sum(mul(term, weight[:, None].astype(np.float64)))
        total = term if total is None else total + term
    return total / float(count)


def action_pairs(batch: SequenceBatch) -> np.ndarray:
    """(E, T) bool of steps whose action error counts: 1 <= t <= T-2 with o_{t+1} present."""
    valid = batch.target_mask.copy()
    valid[:, 0] = False
    valid[:, -1] = False
    return valid


def loss_inverse(trace: RolloutTrace, batch: SequenceBatch, lam: float) -> Tensor:
    """Action-delta RMSE plus lam * loss_forward on the same trace."""
    if lam < 0:
        raise ConfigError(f"lambda must be >= 0, got {lam}")
    if not trace.actions:
        raise ConfigError("loss_inverse needs an inverse rollout")
    valid = action_pairs(batch)
    count = int(valid.sum())
    if count == 0:
        raise NumericsError("Sequences are too short for the inverse loss (need T >= 3)")

    total = None
    for t, action in enumerate(trace.actions):
        if not valid[:, t].any():
            continue
        err = Tensor(batch.actions[:, t]) - action
        term = reduce_sum(mul(err * err, valid[:, t, None].astype(np.float64)))
        total = term if total is None else total + term
    loss = sqrt(total / float(count))
    if lam > 0:
        loss = loss + lam * loss_forward(trace, batch)
    return loss


# ---------- multi-step prediction ----------

def forecast(model: Model, observations: np.ndarray, actions: np.ndarray, horizon: int) -> RolloutTrace:
    """
    Roll the model over a normalized prefix of P observed steps and keep
    predicting for `horizon` steps without updates.

    observations: (E, P, d_o); actions: (E, >= P + horizon - 1, d_a).
    The returned trace has P + horizon - 1 steps; predictions[P - 1 + h - 1]
    is the h-step-ahead forecast.
    """
    forward = forward_of(model)
    if horizon < 1:
        raise ConfigError(f"horizon must be >= 1, got {horizon}")
    e, p, _ = observations.shape
    length = p + horizon - 1
    if actions.shape[1] < length:
        raise ConfigError(
            f"horizon {horizon} needs {length} actions after a {p}-step prefix, got {actions.shape[1]}"
        )

    obs = np.zeros((e, length, forward.obs_dim))
    obs[:, :p] = observations
    mask = np.zeros((e, length), dtype=bool)
    mask[:, :p] = True
    target_mask = np.ones((e, length), dtype=bool)
    batch = SequenceBatch(
        observations=obs,
        actions=np.asarray(actions[:, :length], dtype=np.float64),
        obs_mask=mask,
        target_next_obs=np.zeros_like(obs),
        target_mask=target_mask,
        episode_ids=np.arange(e),
    )
    return _rollout(forward, batch)


def predict_multistep(
        model: Model,
        observations: np.ndarray,
        actions: np.ndarray,
        horizon: int,
        stats: Optional[NormStats] = None,
) -> np.ndarray:
    """
    Predicted observations for the `horizon` steps following the prefix.

    Accepts a single sequence ((P, d_o), (L, d_a)) or a batch ((E, P, d_o), (E, L, d_a)).
    With `stats`, inputs are raw and outputs are denormalized.
    """
    single = np.ndim(observations) == 2
    obs = np.asarray(observations, dtype=np.float64)
    act = np.asarray(actions, dtype=np.float64)
    if single:
        obs, act = obs[None], act[None]
    if stats is not None:
        obs = (obs - stats.obs_mean) / stats.obs_std
        act = (act - stats.act_mean) / stats.act_std

    trace = forecast(model, obs, act, horizon)
    p = obs.shape[1]
    preds = np.stack([trace.predictions[p - 1 + h].value for h in range(horizon)], axis=1)
    if stats is not None:
        preds = preds * stats.obs_std + stats.obs_mean
    return preds[0] if single else preds


# ---------- gradient check ----------

def toy_batch(obs_dim: int, action_dim: int, length: int, episodes: int, seed: int) -> SequenceBatch:
    """Random normalized batch with a mixed observation mask (t = 0 always observed)."""
    rng = np.random.default_rng(seed)
    obs = rng.normal(size=(episodes, length, obs_dim))
    mask = rng.random((episodes, length)) > 0.4
    mask[:, 0] = True
    target_mask = np.ones((episodes, length), dtype=bool)
    target_mask[:, -1] = False
    return SequenceBatch(
        observations=obs,
        actions=rng.normal(size=(episodes, length, action_dim)),
        obs_mask=mask,
        target_next_obs=np.concatenate([obs[:, 1:], obs[:, -1:]], axis=1),
        target_mask=target_mask,
        episode_ids=np.arange(episodes),
    )


def gradcheck_model(
        config: RunConfig,
        obs_dim: int = 2,
        action_dim: int = 1,
        length: int = 5,
        episodes: int = 2,
        eps: float = 1e-6,
        tol: float = 1e-4,
) -> GradCheckReport:
    """
    Finite-difference check of the full training objective of `config.mode`
    on a random toy batch. The forward objective adds the NLL term when a
    variance decoder is configured so that every parameter group is covered.
    """
    model = build_model(config, obs_dim, action_dim)
    batch = toy_batch(obs_dim, action_dim, length, episodes, config.seed)

    def objective() -> Tensor:
        if isinstance(model, InverseModel):
            return loss_inverse(rollout_inverse(model, batch), batch, model.lam)
        trace = rollout_forward(model, batch)
        loss = loss_forward(trace, batch)
        return loss + loss_nll(trace, batch) if trace.variances else loss

    return finite_diff_check(objective, model.params, eps=eps, tol=tol)
