# acrkn/services/cell_service.py
"""
Factorized recurrent Kalman cell.

The latent state z = [upper; lower] has n = 2m entries. Only the upper half
is observed (H = [I 0]), and the covariance keeps three diagonals
(σu, σl, σs), which turns the Kalman update into elementwise operations.
"""

import logging
from typing import Tuple

import numpy as np

from domain.errors import CellError
from domain.models import FactorizedBelief, KalmanGain, LatentObservation, TransitionBank
from utils.layers import dense, init_dense
from utils.params import ParamStore
from utils.tensor import (
    Tensor,
    clamp_abs,
    concat,
    diag_embed,
    diagonal,
    elu_plus_one,
    matmul,
    matvec,
    relu,
    reshape,
    select,
    softmax,
    sqrt,
    take,
    transpose,
)

logger = logging.getLogger(__name__)

SIGMA_TRANS_INIT = 0.05
BASIS_NOISE_STD = 0.05
OFF_BLOCK_SCALE = 0.2
PSD_TOL = 1e-12
NEGATIVE_VARIANCE_TOL = 1e-12


def band_mask(m: int, bandwidth: int) -> np.ndarray:
    """n x n mask made of four m x m band blocks keeping |i - j| <= bandwidth - 1."""
    if bandwidth < 1:
        raise CellError(f"bandwidth must be >= 1, got {bandwidth}")
    i = np.arange(m)
    block = (np.abs(i[:, None] - i[None, :]) <= bandwidth - 1).astype(np.float64)
    return np.block([[block, block], [block, block]])


def create_transition_bank(
        params: ParamStore,
        m: int,
        num_basis: int,
        bandwidth: int,
        rng: np.random.Generator,
        prefix: str = "bank",
) -> TransitionBank:
    if m < 1 or num_basis < 1:
        raise CellError(f"m and num_basis must be >= 1 (m={m}, K={num_basis})")
    n = 2 * m
    mask = band_mask(m, bandwidth)

    basis = np.empty((num_basis, n, n))
    for k in range(num_basis):
        noise = rng.normal(0.0, BASIS_NOISE_STD, size=(n, n))
        a = OFF_BLOCK_SCALE * noise
        a[:m, :m] = np.eye(m) + noise[:m, :m]
        a[m:, m:] = np.eye(m) + noise[m:, m:]
        basis[k] = a * mask

    alpha_weight, alpha_bias = init_dense(params, f"{prefix}.alpha", n, num_basis, rng)
    return TransitionBank(
        m=m,
        num_basis=num_basis,
        bandwidth=bandwidth,
        basis=params.add(f"{prefix}.basis", basis, mask=np.broadcast_to(mask, basis.shape)),
        alpha_weight=alpha_weight,
        alpha_bias=alpha_bias,
        sigma_trans_raw=params.add(f"{prefix}.sigma_trans", np.full(n, np.log(SIGMA_TRANS_INIT))),
    )


def initial_belief(m: int, init_var: float = 10.0, batch_size: int = 1) -> FactorizedBelief:
    if m < 1:
        raise CellError(f"m must be >= 1, got {m}")
    if init_var <= 0:
        raise CellError(f"init_var must be positive, got {init_var}")
    zeros = np.zeros((batch_size, m))
    var = np.full((batch_size, m), float(init_var))
    return FactorizedBelief(
        z_upper=Tensor(zeros), z_lower=Tensor(zeros.copy()),
        sigma_u=Tensor(var), sigma_l=Tensor(var.copy()), sigma_s=Tensor(zeros.copy()),
    )


def latent_mean(belief: FactorizedBelief) -> Tensor:
    return concat([belief.z_upper, belief.z_lower], axis=-1)


def check_belief(belief: FactorizedBelief, tol: float = 1e-9) -> Tuple[bool, str]:
    """Returns (ok, message) for the nonnegativity and per-dimension PSD invariants."""
    su, sl, ss = belief.sigma_u.value, belief.sigma_l.value, belief.sigma_s.value
    if np.any(su < -tol) or np.any(sl < -tol):
        return False, "negative variance"
    excess = ss * ss - su * sl
    if np.any(excess > tol):
        return False, f"PSD violated by {float(np.max(excess)):.3e}"
    return True, "OK"


# ---------- update ----------

def compute_gain(prior: FactorizedBelief, obs: LatentObservation) -> KalmanGain:
    denom = prior.sigma_u + obs.sigma_obs
    if np.any(denom.value <= 0.0):
        raise CellError("Kalman gain denominator is not positive; belief or observation variance is corrupted")
    return KalmanGain(q_u=prior.sigma_u / denom, q_l=prior.sigma_s / denom)


def update(prior: FactorizedBelief, obs: LatentObservation) -> FactorizedBelief:
    gain = compute_gain(prior, obs)
    innovation = obs.w - prior.z_upper
    keep = 1.0 - gain.q_u

    sigma_l = prior.sigma_l - gain.q_l * prior.sigma_s
    if np.any(sigma_l.value < -NEGATIVE_VARIANCE_TOL):
        raise CellError(f"Posterior sigma_l negative ({float(np.min(sigma_l.value)):.3e})")
    if np.any(sigma_l.value < 0.0):
        sigma_l = relu(sigma_l)

    return FactorizedBelief(
        z_upper=prior.z_upper + gain.q_u * innovation,
        z_lower=prior.z_lower + gain.q_l * innovation,
        sigma_u=keep * prior.sigma_u,
        sigma_l=sigma_l,
        sigma_s=keep * prior.sigma_s,
    )


def update_skip(prior: FactorizedBelief) -> FactorizedBelief:
    return prior


def select_belief(observed: np.ndarray, updated: FactorizedBelief, prior: FactorizedBelief) -> FactorizedBelief:
    """Per-row choice between the updated belief (observed rows) and the prior."""
    cond = np.asarray(observed, dtype=bool)[:, None]
    return FactorizedBelief(
        z_upper=select(cond, updated.z_upper, prior.z_upper),
        z_lower=select(cond, updated.z_lower, prior.z_lower),
        sigma_u=select(cond, updated.sigma_u, prior.sigma_u),
        sigma_l=select(cond, updated.sigma_l, prior.sigma_l),
        sigma_s=select(cond, updated.sigma_s, prior.sigma_s),
    )


# ---------- predict ----------

def transition_coefficients(bank: TransitionBank, z) -> Tensor:
    return softmax(dense(z, (bank.alpha_weight, bank.alpha_bias)), axis=-1)


def compose_transition(bank: TransitionBank, z) -> Tensor:
    """A_t = sum_k alpha_k(z) A^(k); returns (B, n, n)."""
    n = bank.n
    alpha = transition_coefficients(bank, z)
    flat = reshape(bank.basis, (bank.num_basis, n * n))
    return reshape(matmul(alpha, flat), alpha.shape[:-1] + (n, n))


def transition_noise(bank: TransitionBank) -> Tensor:
    return elu_plus_one(bank.sigma_trans_raw)


def dense_covariance(belief: FactorizedBelief) -> Tensor:
    upper = concat([diag_embed(belief.sigma_u), diag_embed(belief.sigma_s)], axis=-1)
    lower = concat([diag_embed(belief.sigma_s), diag_embed(belief.sigma_l)], axis=-1)
    return concat([upper, lower], axis=-2)


def predict(posterior: FactorizedBelief, bank: TransitionBank, control) -> FactorizedBelief:
    """
    z- = A_t z+ + b(a_t);  Σ- = A_t Σ+ A_t^T + diag(σ_trans),
    projected back onto the three block diagonals.
    """
    m, n = bank.m, bank.n
    z = latent_mean(posterior)
    if control.shape[-1] != n:
        raise CellError(f"Control increment has length {control.shape[-1]}, expected {n}")

    a_t = compose_transition(bank, z)
    z_prior = matvec(a_t, z) + control

    cov = matmul(matmul(a_t, dense_covariance(posterior)), transpose(a_t)) + diag_embed(transition_noise(bank))
    diag = diagonal(cov)
    sigma_u = take(diag, 0, m)
    sigma_l = take(diag, m, n)
    sigma_s = diagonal(cov, offset=m)

    excess = sigma_s.value ** 2 - sigma_u.value * sigma_l.value
    violations = int(np.sum(excess > PSD_TOL))
    if violations:
        bank.clamp_count += violations
        logger.debug("PSD clamp on %d entries (total %d)", violations, bank.clamp_count)
        sigma_s = clamp_abs(sigma_s, sqrt(sigma_u * sigma_l))

    return FactorizedBelief(
        z_upper=take(z_prior, 0, m),
        z_lower=take(z_prior, m, n),
        sigma_u=sigma_u,
        sigma_l=sigma_l,
        sigma_s=sigma_s,
    )
