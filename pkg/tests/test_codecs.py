import numpy as np
import pytest

from domain.errors import ConfigError
from domain.models import FactorizedBelief
from services import codec_service
from utils.gradcheck import finite_diff_check
from utils.params import ParamStore
from utils.tensor import Graph, Tensor, backward, reduce_sum


def _zero_weights(params, prefix):
    for p in params.group(prefix):
        if p.name.endswith(".weight"):
            p.value[...] = 0.0


def test_zero_weight_encoder_returns_biases(rng):
    params = ParamStore()
    net = codec_service.create_encoder(params, 2, 3, [4], rng)
    _zero_weights(params, "encoder")
    obs = codec_service.encode(net, rng.normal(size=(1, 2)))
    np.testing.assert_allclose(obs.w.value[0], net.mean_head[1].value)
    bias = net.var_head[1].value
    np.testing.assert_allclose(obs.sigma_obs.value[0], np.where(bias >= 0, bias + 1, np.exp(bias)))


def test_encoder_variance_stays_positive_for_very_negative_raw_output(rng):
    params = ParamStore()
    net = codec_service.create_encoder(params, 2, 1, [], rng)
    net.var_head[0].value[...] = 0.0
    net.var_head[1].value[...] = -20.0
    sigma = codec_service.encode(net, np.ones((1, 2))).sigma_obs.value[0, 0]
    assert sigma > 0
    assert sigma == pytest.approx(2.06e-9, rel=1e-2)


def test_zero_weight_decoder_returns_bias(rng):
    params = ParamStore()
    net = codec_service.create_decoder(params, 6, 2, [5], rng, "obs_decoder")
    _zero_weights(params, "obs_decoder")
    out = codec_service.decode_obs(net, rng.normal(size=(4, 6)))
    np.testing.assert_allclose(out.value, np.tile(net.layers[-1][1].value, (4, 1)))


def test_identity_decoder_passes_latent_through(rng):
    params = ParamStore()
    net = codec_service.create_decoder(params, 2, 2, [], rng, "obs_decoder")
    net.layers[0][0].value[...] = np.eye(2)
    net.layers[0][1].value[...] = 0.0
    z = rng.normal(size=(1, 2))
    np.testing.assert_allclose(codec_service.decode_obs(net, z).value, z)


def test_variance_decoder_reads_the_variances(rng):
    params = ParamStore()
    net = codec_service.create_decoder(params, 4, 2, [8], rng, "var_decoder", positive=True)
    belief = FactorizedBelief(
        z_upper=Tensor(np.zeros((1, 2))), z_lower=Tensor(np.zeros((1, 2))),
        sigma_u=Tensor(rng.uniform(0.5, 2, (1, 2))), sigma_l=Tensor(rng.uniform(0.5, 2, (1, 2))),
        sigma_s=Tensor(np.zeros((1, 2))),
    )
    scaled = FactorizedBelief(
        z_upper=belief.z_upper, z_lower=belief.z_lower,
        sigma_u=belief.sigma_u * 4.0, sigma_l=belief.sigma_l * 4.0, sigma_s=belief.sigma_s,
    )
    first = codec_service.decode_var(net, belief).value
    second = codec_service.decode_var(net, scaled).value
    assert np.all(first > 0) and np.all(second > 0)
    assert not np.array_equal(first, second)


def test_zero_weight_action_decoder_holds_last_action(rng):
    params = ParamStore()
    net = codec_service.create_decoder(params, 6 + 2, 1, [4], rng, "action_decoder")
    for p in params:
        p.value[...] = 0.0
    delta = codec_service.decode_action(net, rng.normal(size=(1, 6)), rng.normal(size=(1, 2)))
    previous = np.array([[0.7]])
    np.testing.assert_array_equal((delta + previous).value, previous)


def test_decoder_input_length_checked(rng):
    params = ParamStore()
    net = codec_service.create_decoder(params, 6 + 2, 1, [4], rng, "action_decoder")
    with pytest.raises(ConfigError):
        codec_service.decode_action(net, np.zeros((1, 6)), np.zeros((1, 3)))


def test_codec_gradients_reach_both_action_decoder_inputs(rng):
    params = ParamStore()
    net = codec_service.create_decoder(params, 4 + 2, 1, [5], rng, "action_decoder")
    z = params.add("z", rng.normal(size=(2, 4)))
    desired = params.add("desired", rng.normal(size=(2, 2)))
    objective = lambda: reduce_sum(codec_service.decode_action(net, z, desired) * 1.7)
    report = finite_diff_check(objective, params, tol=1e-5)
    assert report.passed, report.flagged

    params.zero_grad()
    with Graph() as graph:
        grads = backward(graph, objective())
    assert np.any(grads["z"] != 0) and np.any(grads["desired"] != 0)


def test_encoder_gradients(rng):
    params = ParamStore()
    net = codec_service.create_encoder(params, 3, 2, [6], rng)
    o = rng.normal(size=(4, 3))
    weights = rng.normal(size=(4, 2))

    def objective():
        obs = codec_service.encode(net, o)
        return reduce_sum(obs.w * weights + obs.sigma_obs)

    report = finite_diff_check(objective, params, tol=1e-5)
    assert report.passed, report.flagged
