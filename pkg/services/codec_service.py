# acrkn/services/codec_service.py
"""
Encoder and decoders around the cell.

encode:        o_t                   -> N(w_t, σ_obs)
decode_obs:    z⁻_{t+1}              -> normalized observation delta
decode_var:    (σu, σl) of a belief  -> predictive variance of that delta
decode_action: (z⁺_t, o_{t+1})       -> normalized action delta to a_{t-1}
"""

from typing import Sequence

import numpy as np

from domain.errors import ConfigError
from domain.models import DecoderNet, EncoderNet, FactorizedBelief, LatentObservation
from utils.layers import dense, init_dense, init_mlp, mlp_forward
from utils.params import ParamStore
from utils.tensor import Tensor, concat, elu_plus_one, relu


def create_encoder(
        params: ParamStore,
        input_dim: int,
        m: int,
        hidden: Sequence[int],
        rng: np.random.Generator,
        prefix: str = "encoder",
) -> EncoderNet:
    if input_dim < 1 or m < 1:
        raise ConfigError(f"Invalid encoder dimensions (input={input_dim}, m={m})")
    widths = [input_dim, *hidden]
    layers = [init_dense(params, f"{prefix}.{i}", widths[i], widths[i + 1], rng) for i in range(len(hidden))]
    return EncoderNet(
        input_dim=input_dim,
        latent_dim=m,
        hidden=layers,
        mean_head=init_dense(params, f"{prefix}.mean", widths[-1], m, rng),
        var_head=init_dense(params, f"{prefix}.var", widths[-1], m, rng),
    )


def create_decoder(
        params: ParamStore,
        input_dim: int,
        output_dim: int,
        hidden: Sequence[int],
        rng: np.random.Generator,
        prefix: str,
        positive: bool = False,
) -> DecoderNet:
    if input_dim < 1 or output_dim < 1:
        raise ConfigError(f"Invalid decoder dimensions for {prefix} (input={input_dim}, output={output_dim})")
    return DecoderNet(
        input_dim=input_dim,
        output_dim=output_dim,
        layers=init_mlp(params, prefix, input_dim, hidden, output_dim, rng),
        positive=positive,
    )


def _run(net: DecoderNet, x) -> Tensor:
    if x.shape[-1] != net.input_dim:
        raise ConfigError(f"Decoder expects input length {net.input_dim}, got {x.shape[-1]}")
    out = mlp_forward(net.layers, x)
    return elu_plus_one(out) if net.positive else out


def encode(net: EncoderNet, o) -> LatentObservation:
    h = o
    for layer in net.hidden:
        h = relu(dense(h, layer))
    return LatentObservation(w=dense(h, net.mean_head), sigma_obs=elu_plus_one(dense(h, net.var_head)))


def decode_obs(net: DecoderNet, z) -> Tensor:
    return _run(net, z)


def decode_var(net: DecoderNet, belief: FactorizedBelief) -> Tensor:
    return _run(net, concat([belief.sigma_u, belief.sigma_l], axis=-1))


def decode_action(net: DecoderNet, posterior_mean, desired_next_obs) -> Tensor:
    return _run(net, concat([posterior_mean, desired_next_obs], axis=-1))
