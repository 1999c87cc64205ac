# acrkn/services/control_service.py

import logging
from typing import Optional, Sequence

import numpy as np

from domain.errors import ConfigError, NumericsError
from domain.models import CONTROL_KINDS, ControlModel
from domain.presets import get_preset
from utils.layers import dense, init_mlp, mlp_forward
from utils.params import ParamStore
from utils.tensor import Tensor, as_tensor, matmul, matvec, reshape, softmax, transpose

logger = logging.getLogger(__name__)


def default_architecture(
        kind: str,
        action_dim: int,
        n: int,
        preset: str,
        *,
        params: Optional[ParamStore] = None,
        rng: Optional[np.random.Generator] = None,
        hidden: Optional[Sequence[int]] = None,
        num_basis: Optional[int] = None,
        prefix: str = "control",
) -> ControlModel:
    """
    Build a control model with the layer table of `preset`.

    `hidden` overrides the preset's control widths (nonlinear kind);
    `num_basis` sets K_c for the locally-linear kind and defaults to the
    preset's transition-bank K.
    """
    if kind not in CONTROL_KINDS:
        raise ConfigError(f"Unknown control kind: {kind}. Expected one of {CONTROL_KINDS}")
    if action_dim < 1 or n < 2 or n % 2:
        raise ConfigError(f"Invalid control dimensions (d_a={action_dim}, n={n})")
    table = get_preset(preset)
    params = params if params is not None else ParamStore()
    rng = rng if rng is not None else np.random.default_rng(0)

    model = ControlModel(kind=kind, action_dim=action_dim, latent_dim=n)
    if kind == "linear":
        bound = 1.0 / np.sqrt(action_dim)
        model.matrix = params.add(f"{prefix}.matrix", rng.uniform(-bound, bound, size=(n, action_dim)))

    elif kind == "locally-linear":
        k_c = num_basis or table.get("num_basis", 1)
        bound = 1.0 / np.sqrt(action_dim)
        model.basis = params.add(f"{prefix}.basis", rng.uniform(-bound, bound, size=(k_c, n, action_dim)))
        beta = init_mlp(params, f"{prefix}.beta", n, [], k_c, rng)[0]
        model.beta_weight, model.beta_bias = beta

    elif kind == "nonlinear":
        widths = list(hidden) if hidden is not None else list(table["control_hidden"])
        model.hidden = widths
        model.layers = init_mlp(params, f"{prefix}.mlp", action_dim, widths, n, rng)

    logger.debug("Control model %s: d_a=%d n=%d preset=%s", kind, action_dim, n, preset)
    return model


def control_coefficients(model: ControlModel, z) -> Tensor:
    """β(z) of the locally-linear kind, a softmax over K_c."""
    return softmax(dense(z, (model.beta_weight, model.beta_bias)), axis=-1)


def control_increment(model: ControlModel, a, z) -> Tensor:
    """
    Latent increment b(a_t) of length n for a batch of actions (B, d_a).
    Only the locally-linear kind reads z.
    """
    a = as_tensor(a)
    if a.shape[-1] != model.action_dim:
        raise NumericsError(f"Action has length {a.shape[-1]}, control model expects {model.action_dim}")

    if model.kind == "linear":
        return matmul(a, transpose(model.matrix))
    if model.kind == "locally-linear":
        beta = control_coefficients(model, z)
        k_c = model.basis.shape[0]
        flat = reshape(model.basis, (k_c, model.latent_dim * model.action_dim))
        b_t = reshape(matmul(beta, flat), beta.shape[:-1] + (model.latent_dim, model.action_dim))
        return matvec(b_t, a)
    if model.kind == "nonlinear":
        return mlp_forward(model.layers, a)
    return Tensor(np.zeros(a.shape[:-1] + (model.latent_dim,)))
