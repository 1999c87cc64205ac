import json

import numpy as np
import pytest

from domain.errors import DataError
from domain.models import Episodes, SyntheticSystem
from services import data_service


def _episodes(obs, actions, ids=None):
    return Episodes(
        observations=[np.asarray(o, dtype=np.float64) for o in obs],
        actions=[np.asarray(a, dtype=np.float64) for a in actions],
        episode_ids=list(ids if ids is not None else range(len(obs))),
    )


def _batch(episodes=3, length=100):
    return data_service.to_batch(_episodes(
        [np.zeros((length, 1))] * episodes, [np.zeros((length, 1))] * episodes,
    ))


# ---------- synthetic systems ----------

def test_pendulum_at_rest_stays_at_rest():
    system = SyntheticSystem(kind="pendulum-lag")
    states = data_service.simulate_states(system, np.zeros((200, 1)))
    assert np.all(states["theta"] == 0.0)
    assert np.all(states["omega"] == 0.0)


def test_fast_lag_matches_direct_drive():
    actions = data_service.telegraph_actions(SyntheticSystem(), 300, np.random.default_rng(0))
    fast = data_service.simulate_states(SyntheticSystem(tau=1e-4), actions, 0.3, 0.0)
    direct = data_service.simulate_states(SyntheticSystem(), actions, 0.3, 0.0, lag=False)
    assert np.max(np.abs(fast["theta"] - direct["theta"])) < 1e-3


def test_lag_delays_the_applied_torque():
    system = SyntheticSystem(tau=0.25, dt=0.02)
    states = data_service.simulate_states(system, np.ones((50, 1)))
    u = states["u"]
    assert u[0] == 0.0
    assert np.all(np.diff(u) > 0) and np.all(u < 1.0)
    assert u[1] == pytest.approx(1.0 - np.exp(-0.02 / 0.25))


def test_unforced_damped_pendulum_loses_energy():
    system = SyntheticSystem(kind="pendulum-lag", damping=0.3)
    states = data_service.simulate_states(system, np.zeros((1000, 1)), theta0=0.8, omega0=0.0)
    energy = data_service.pendulum_energy(system, states["theta"], states["omega"])
    assert np.all(np.diff(energy) <= 1e-6)
    assert energy[-1] < 0.1 * energy[0]


def test_dead_zone_absorbs_small_commands():
    actions = 0.05 * np.where(np.arange(300) % 2 == 0, 1.0, -1.0)[:, None]
    dead_zone = data_service.simulate_states(SyntheticSystem(kind="antagonistic-backlash", backlash=0.2), actions)
    plain = data_service.simulate_states(SyntheticSystem(kind="pendulum-lag"), actions)
    assert np.all(dead_zone["theta"] == 0.0)
    assert np.any(plain["theta"] != 0.0)


def test_dead_zone_has_no_memory():
    system = SyntheticSystem(kind="antagonistic-backlash", backlash=0.2)
    actions = np.concatenate([np.full((100, 1), 1.0), np.full((200, 1), 0.05)])
    u = data_service.simulate_states(system, actions)["u"]
    # back inside the zone the torque decays to zero instead of holding the last edge
    assert abs(u[-1]) < 1e-6


@pytest.mark.parametrize("command, applied", [(1.0, 0.9), (-1.0, -0.9), (0.1, 0.0), (-0.3, -0.2)])
def test_dead_zone_shifts_large_commands(command, applied):
    system = SyntheticSystem(kind="antagonistic-backlash", backlash=0.2)
    u = data_service.simulate_states(system, np.full((300, 1), command))["u"]
    assert u[-1] == pytest.approx(applied, abs=1e-9)


def test_linear_integrator_sums_actions():
    system = SyntheticSystem(kind="linear-integrator", gain=2.0, dt=0.1)
    actions = np.random.default_rng(4).normal(size=(20, 1))
    theta = data_service.simulate_states(system, actions, theta0=0.5)["theta"]
    expected = 0.5 + 2.0 * 0.1 * np.concatenate([[0.0], np.cumsum(actions[:-1, 0])])
    np.testing.assert_allclose(theta, expected, atol=1e-12)


def test_simulation_is_deterministic():
    system = SyntheticSystem(noise_std=0.01)
    first = data_service.simulate(system, 3, 40, seed=9)
    second = data_service.simulate(system, 3, 40, seed=9)
    other = data_service.simulate(system, 3, 40, seed=10)
    for a, b in zip(first.observations + first.actions, second.observations + second.actions):
        np.testing.assert_array_equal(a, b)
    assert not np.array_equal(first.observations[0], other.observations[0])


def test_telegraph_actions_stay_in_range():
    system = SyntheticSystem(action_limit=1.5, switch_prob=0.2)
    a = data_service.telegraph_actions(system, 1000, np.random.default_rng(1))
    assert a.shape == (1000, 1)
    assert np.all(np.abs(a) <= 1.5)


def test_invalid_systems_rejected():
    with pytest.raises(DataError):
        SyntheticSystem(kind="rocket")
    with pytest.raises(DataError):
        SyntheticSystem(dt=0.0)
    with pytest.raises(DataError, match=">= 2"):
        data_service.simulate(SyntheticSystem(), 2, 1, seed=0)


# ---------- normalization ----------

def test_normalization_maps_to_unit_scale():
    episodes = _episodes([[[1.0], [3.0]]], [[[0.0], [2.0]]])
    stats = data_service.fit_norm(episodes)
    np.testing.assert_allclose(data_service.apply_norm(stats, [[1.0], [3.0]]), [[-1.0], [1.0]])
    np.testing.assert_allclose(data_service.apply_norm(stats, [[0.0], [2.0]], "act"), [[-1.0], [1.0]])
    raw = np.array([[0.25], [7.0]])
    np.testing.assert_allclose(data_service.invert_norm(stats, data_service.apply_norm(stats, raw)), raw)


def test_zero_variance_channel_rejected():
    episodes = _episodes([[[1.0, 2.0], [3.0, 2.0]]], [[[0.0], [1.0]]])
    with pytest.raises(DataError, match="2"):
        data_service.fit_norm(episodes)


# ---------- masking ----------

def test_prefix_mask():
    batch = data_service.mask_prefix(_batch(2, 500), 300)
    assert batch.obs_mask.sum(axis=1).tolist() == [300, 300]
    assert batch.obs_mask[:, :300].all() and not batch.obs_mask[:, 300:].any()
    with pytest.raises(DataError):
        data_service.mask_prefix(_batch(1, 10), 10)


def test_random_mask_drops_exact_count_and_keeps_first_step():
    batch = data_service.mask_random(_batch(4, 100), 0.75, seed=5)
    assert ((~batch.obs_mask).sum(axis=1) == 75).all()
    assert batch.obs_mask[:, 0].all()
    again = data_service.mask_random(_batch(4, 100), 0.75, seed=5)
    np.testing.assert_array_equal(batch.obs_mask, again.obs_mask)


def test_random_mask_rejects_bad_fraction():
    with pytest.raises(DataError):
        data_service.mask_random(_batch(1, 10), 1.0, seed=0)


# ---------- batching and splits ----------

def test_to_batch_targets_are_next_observations():
    obs = np.arange(5.0)[:, None]
    batch = data_service.to_batch(_episodes([obs], [np.zeros((5, 1))]))
    np.testing.assert_array_equal(batch.target_next_obs[0, :4, 0], [1, 2, 3, 4])
    assert batch.target_mask[0].tolist() == [True, True, True, True, False]


def test_make_batches_group_by_length():
    episodes = _episodes(
        [np.zeros((4, 1))] * 5 + [np.zeros((6, 1))] * 3,
        [np.zeros((4, 1))] * 5 + [np.zeros((6, 1))] * 3,
    )
    batches = data_service.make_batches(episodes, 2, np.random.default_rng(0))
    assert sorted(i for b in batches for i in b.episode_ids) == list(range(8))
    assert all(b.num_episodes <= 2 for b in batches)
    assert sorted(b.length for b in batches) == [4, 4, 4, 6, 6]


def test_split_is_four_to_one_and_deterministic():
    train, test = data_service.split_episodes(range(10), seed=3)
    assert len(train) == 8 and len(test) == 2
    assert not set(train) & set(test)
    assert (train, test) == data_service.split_episodes(range(10), seed=3)


def test_slice_windows():
    episodes = _episodes([np.arange(10.0)[:, None]], [np.zeros((10, 1))])
    windows = data_service.slice_windows(episodes, 4)
    assert len(windows) == 2
    np.testing.assert_array_equal(windows.observations[1][:, 0], [4, 5, 6, 7])
    with pytest.raises(DataError):
        data_service.slice_windows(episodes, 11)


# ---------- CSV ----------

def test_load_csv_sorts_shuffled_rows(tmp_path):
    path = tmp_path / "traj.csv"
    path.write_text(
        "episode,t,o_1,o_2,a_1\n"
        "1,1,0.5,1.5,0.1\n"
        "0,2,2.0,2.0,0.2\n"
        "0,0,0.0,0.0,0.0\n"
        "1,0,0.4,1.4,0.0\n"
        "0,1,1.0,1.0,0.1\n"
    )
    episodes = data_service.load_csv(path)
    assert episodes.episode_ids == [0, 1]
    assert episodes.observations[0].shape == (3, 2)
    assert episodes.actions[1].shape == (2, 1)
    np.testing.assert_array_equal(episodes.observations[0][:, 0], [0.0, 1.0, 2.0])


def test_load_csv_reports_gap(tmp_path):
    path = tmp_path / "traj.csv"
    path.write_text("episode,t,o_1,a_1\n0,0,0,0\n0,2,1,0\n")
    with pytest.raises(DataError, match="Episode 0"):
        data_service.load_csv(path)


def test_load_csv_reports_line_of_bad_value(tmp_path):
    path = tmp_path / "traj.csv"
    path.write_text("episode,t,o_1,a_1\n0,0,0,0\n0,1,abc,0\n")
    with pytest.raises(DataError, match="Line 3"):
        data_service.load_csv(path)


def test_load_csv_needs_observation_and_action_columns(tmp_path):
    path = tmp_path / "traj.csv"
    path.write_text("episode,t,o_1\n0,0,0\n0,1,1\n")
    with pytest.raises(DataError, match="a_1"):
        data_service.load_csv(path)


def test_dataset_directory_roundtrip(tmp_path):
    system = SyntheticSystem()
    episodes = data_service.simulate(system, 5, 12, seed=2)
    manifest = data_service.write_dataset(tmp_path, episodes, system, seed=2)
    assert json.loads((tmp_path / data_service.MANIFEST_FILE).read_text())["length"] == 12

    loaded, read_back = data_service.load_dataset(tmp_path)
    assert read_back == manifest
    assert len(read_back.train_ids) == 4 and len(read_back.test_ids) == 1
    for a, b in zip(loaded.observations, episodes.observations):
        np.testing.assert_array_equal(a, b)


def test_csv_floats_read_back_exactly(tmp_path):
    values = np.random.default_rng(11).normal(scale=3.0, size=(2000, 1))
    values[:5, 0] = [0.1, -0.3, 1e-300, 2.0 ** -1074, 123456789.123456789]
    episodes = _episodes([values[:1000], values[1000:]], [-values[:1000], -values[1000:]])
    data_service.write_csv(episodes, tmp_path / "exact.csv")

    loaded = data_service.load_csv(tmp_path / "exact.csv")
    for a, b in zip(loaded.observations + loaded.actions, episodes.observations + episodes.actions):
        np.testing.assert_array_equal(a, b)


def test_bare_csv_gets_a_split(tmp_path):
    episodes = data_service.simulate(SyntheticSystem(), 5, 6, seed=0)
    data_service.write_csv(episodes, tmp_path / "plain.csv")
    _, manifest = data_service.load_dataset(tmp_path / "plain.csv", seed=1)
    assert sorted(manifest.train_ids + manifest.test_ids) == list(range(5))
    assert manifest.system is None
