import numpy as np
import pytest

from domain.errors import CellError
from domain.models import FactorizedBelief, LatentObservation
from services import cell_service
from utils.gradcheck import finite_diff_check
from utils.params import ParamStore
from utils.tensor import Tensor, elu_plus_one, reduce_sum, reshape, take


def random_belief(rng, batch, m, var_range=(0.1, 5.0)):
    su = rng.uniform(*var_range, size=(batch, m))
    sl = rng.uniform(*var_range, size=(batch, m))
    ss = rng.uniform(-0.99, 0.99, size=(batch, m)) * np.sqrt(su * sl)
    return FactorizedBelief(
        z_upper=Tensor(rng.normal(size=(batch, m))),
        z_lower=Tensor(rng.normal(size=(batch, m))),
        sigma_u=Tensor(su), sigma_l=Tensor(sl), sigma_s=Tensor(ss),
    )


def dense_update(belief, w, r):
    """Per-dimension 2x2 Kalman update with H = [1, 0]."""
    su, sl, ss = belief.sigma_u.value, belief.sigma_l.value, belief.sigma_s.value
    cov = np.stack([np.stack([su, ss], -1), np.stack([ss, sl], -1)], -2)  # (B, m, 2, 2)
    mean = np.stack([belief.z_upper.value, belief.z_lower.value], -1)
    gain = cov[..., :, 0] / (su + r)[..., None]
    mean = mean + gain * (w - mean[..., 0])[..., None]
    kh = np.zeros_like(cov)
    kh[..., :, 0] = gain
    cov = (np.eye(2) - kh) @ cov
    return mean, cov


def test_scalar_update_matches_dense_update(rng):
    prior = random_belief(rng, batch=1000, m=1)
    w = rng.normal(size=(1000, 1))
    r = rng.uniform(0.05, 5.0, size=(1000, 1))
    post = cell_service.update(prior, LatentObservation(w=Tensor(w), sigma_obs=Tensor(r)))
    mean, cov = dense_update(prior, w, r)

    np.testing.assert_allclose(post.z_upper.value, mean[..., 0], rtol=0, atol=1e-12)
    np.testing.assert_allclose(post.z_lower.value, mean[..., 1], rtol=0, atol=1e-12)
    np.testing.assert_allclose(post.sigma_u.value, cov[..., 0, 0], rtol=0, atol=1e-12)
    np.testing.assert_allclose(post.sigma_s.value, cov[..., 0, 1], rtol=0, atol=1e-12)
    np.testing.assert_allclose(post.sigma_l.value, cov[..., 1, 1], rtol=0, atol=1e-12)


def test_gain_bounds_and_sigma_u_non_increase(rng):
    prior = random_belief(rng, batch=200, m=4)
    obs = LatentObservation(w=Tensor(rng.normal(size=(200, 4))), sigma_obs=Tensor(rng.uniform(0.01, 10, (200, 4))))
    gain = cell_service.compute_gain(prior, obs)
    assert np.all(gain.q_u.value >= 0.0) and np.all(gain.q_u.value <= 1.0)
    post = cell_service.update(prior, obs)
    assert np.all(post.sigma_u.value <= prior.sigma_u.value)


def test_zero_prior_variance_keeps_prior_mean():
    prior = FactorizedBelief(
        z_upper=Tensor([[1.0]]), z_lower=Tensor([[2.0]]),
        sigma_u=Tensor([[0.0]]), sigma_l=Tensor([[1.0]]), sigma_s=Tensor([[0.0]]),
    )
    post = cell_service.update(prior, LatentObservation(w=Tensor([[5.0]]), sigma_obs=Tensor([[1.0]])))
    assert post.z_upper.value[0, 0] == 1.0 and post.z_lower.value[0, 0] == 2.0


def test_equal_variances_split_the_difference():
    prior = FactorizedBelief(
        z_upper=Tensor([[0.0]]), z_lower=Tensor([[0.0]]),
        sigma_u=Tensor([[1.0]]), sigma_l=Tensor([[1.0]]), sigma_s=Tensor([[0.0]]),
    )
    post = cell_service.update(prior, LatentObservation(w=Tensor([[2.0]]), sigma_obs=Tensor([[1.0]])))
    assert post.z_upper.value[0, 0] == pytest.approx(1.0)
    assert post.sigma_u.value[0, 0] == pytest.approx(0.5)


def test_corrupted_belief_raises():
    prior = FactorizedBelief(
        z_upper=Tensor([[0.0]]), z_lower=Tensor([[0.0]]),
        sigma_u=Tensor([[-1.0]]), sigma_l=Tensor([[1.0]]), sigma_s=Tensor([[0.0]]),
    )
    with pytest.raises(CellError):
        cell_service.update(prior, LatentObservation(w=Tensor([[0.0]]), sigma_obs=Tensor([[0.5]])))


def test_update_skip_is_identity(rng):
    prior = random_belief(rng, 2, 3)
    assert cell_service.update_skip(prior) is prior


def test_initial_belief_validation():
    belief = cell_service.initial_belief(3, 10.0, batch_size=2)
    assert belief.sigma_u.shape == (2, 3)
    assert np.all(belief.sigma_s.value == 0.0)
    with pytest.raises(CellError):
        cell_service.initial_belief(3, 0.0)


@pytest.mark.parametrize("m,bandwidth,expected", [
    (3, 1, np.eye(3)),
    (3, 2, np.array([[1, 1, 0], [1, 1, 1], [0, 1, 1]])),
])
def test_band_mask_blocks(m, bandwidth, expected):
    mask = cell_service.band_mask(m, bandwidth)
    assert mask.shape == (2 * m, 2 * m)
    for rows in (slice(0, m), slice(m, 2 * m)):
        for cols in (slice(0, m), slice(m, 2 * m)):
            np.testing.assert_array_equal(mask[rows, cols], expected)


def test_predict_matches_dense_oracle_for_bandwidth_one(rng):
    worst = 0.0
    for case in range(500):
        m = int(rng.integers(1, 9))
        params = ParamStore()
        bank = cell_service.create_transition_bank(params, m, num_basis=3, bandwidth=1, rng=rng)
        post = random_belief(rng, batch=1, m=m)
        control = rng.normal(size=(1, 2 * m))
        prior = cell_service.predict(post, bank, Tensor(control))

        z = np.concatenate([post.z_upper.value, post.z_lower.value], -1)[0]
        logits = z @ bank.alpha_weight.value + bank.alpha_bias.value
        alpha = np.exp(logits - logits.max())
        alpha /= alpha.sum()
        a = np.tensordot(alpha, bank.basis.value, axes=1)
        noise = np.where(bank.sigma_trans_raw.value >= 0, bank.sigma_trans_raw.value + 1,
                         np.exp(bank.sigma_trans_raw.value))
        z_expected = a @ z + control[0]
        for i in range(m):
            ai = np.array([[a[i, i], a[i, m + i]], [a[m + i, i], a[m + i, m + i]]])
            si = np.array([[post.sigma_u.value[0, i], post.sigma_s.value[0, i]],
                           [post.sigma_s.value[0, i], post.sigma_l.value[0, i]]])
            expected = ai @ si @ ai.T + np.diag([noise[i], noise[m + i]])
            got = np.array([[prior.sigma_u.value[0, i], prior.sigma_s.value[0, i]],
                            [prior.sigma_s.value[0, i], prior.sigma_l.value[0, i]]])
            worst = max(worst, float(np.max(np.abs(got - expected))))
        worst = max(worst, float(np.max(np.abs(
            np.concatenate([prior.z_upper.value, prior.z_lower.value], -1)[0] - z_expected))))
        assert bank.clamp_count == 0, f"clamp fired in case {case}"
    assert worst <= 1e-12


def test_transition_coefficients_sum_to_one(rng):
    params = ParamStore()
    bank = cell_service.create_transition_bank(params, 4, num_basis=5, bandwidth=2, rng=rng)
    alpha = cell_service.transition_coefficients(bank, Tensor(rng.normal(size=(7, 8)))).value
    assert np.all(alpha >= 0)
    np.testing.assert_allclose(alpha.sum(axis=-1), 1.0, atol=1e-12)


def test_psd_clamp_fires_and_is_counted():
    params = ParamStore()
    bank = cell_service.create_transition_bank(params, 1, num_basis=1, bandwidth=1, rng=np.random.default_rng(0))
    bank.basis.value[...] = np.eye(2)
    bad = FactorizedBelief(
        z_upper=Tensor([[0.0]]), z_lower=Tensor([[0.0]]),
        sigma_u=Tensor([[1.0]]), sigma_l=Tensor([[1.0]]), sigma_s=Tensor([[2.0]]),
    )
    prior = cell_service.predict(bad, bank, Tensor(np.zeros((1, 2))))
    assert bank.clamp_count == 1
    assert prior.sigma_s.value[0, 0] == pytest.approx(1.05)
    ok, _ = cell_service.check_belief(prior)
    assert ok


def test_belief_stays_valid_over_long_sequences(rng):
    m = 4
    params = ParamStore()
    bank = cell_service.create_transition_bank(params, m, num_basis=3, bandwidth=2, rng=rng)
    bank.basis.value *= 0.8
    belief = cell_service.initial_belief(m, 10.0, batch_size=5)
    for step in range(200):
        if rng.random() < 0.5:
            obs = LatentObservation(w=Tensor(rng.normal(size=(5, m))),
                                    sigma_obs=Tensor(rng.uniform(0.05, 3.0, size=(5, m))))
            belief = cell_service.update(belief, obs)
        else:
            belief = cell_service.update_skip(belief)
        belief = cell_service.predict(belief, bank, Tensor(rng.normal(scale=0.1, size=(5, 2 * m))))
        ok, msg = cell_service.check_belief(belief)
        assert ok, f"step {step}: {msg}"


def test_predict_rejects_wrong_control_length(rng):
    params = ParamStore()
    bank = cell_service.create_transition_bank(params, 2, num_basis=2, bandwidth=1, rng=rng)
    with pytest.raises(CellError):
        cell_service.predict(cell_service.initial_belief(2), bank, Tensor(np.zeros((1, 3))))


def test_gradients_through_five_cell_steps(rng):
    m = 2
    params = ParamStore()
    bank = cell_service.create_transition_bank(params, m, num_basis=2, bandwidth=2, rng=rng)
    w = params.add("w", rng.normal(size=(5, 1, m)))
    r_raw = params.add("r", rng.normal(size=(5, 1, m)))
    control = params.add("b", rng.normal(scale=0.1, size=(5, 1, 2 * m)))

    def objective():
        belief = cell_service.initial_belief(m, 2.0)
        total = None
        for t in range(5):
            obs = LatentObservation(w=_row(w, t),
                                    sigma_obs=elu_plus_one(_row(r_raw, t)))
            belief = cell_service.update(belief, obs)
            belief = cell_service.predict(belief, bank, _row(control, t))
            term = reduce_sum(belief.z_upper * belief.z_lower + belief.sigma_u + belief.sigma_s)
            total = term if total is None else total + term
        return total

    report = finite_diff_check(objective, params, tol=1e-5)
    assert report.passed, report.flagged


def _row(param, t):
    return reshape(take(param, t, t + 1, axis=0), param.shape[1:])
