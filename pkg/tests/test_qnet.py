import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from levelk.qnet import (
    AdamState,
    NetworkConfig,
    NetworkWeights,
    dumps_weights,
    forward,
    gradient,
    greedy,
    init_weights,
    load_weights,
    loads_weights,
    optimizer_step,
    save_weights,
    value_and_advantage,
)
from levelk.traffic import OBS_DIM, SENTINEL

NET = NetworkConfig()


def weights(seed=0, config=NET):
    return init_weights(config, np.random.default_rng(seed))


def observations(n, seed=1, config=NET):
    return np.random.default_rng(seed).normal(size=(n, config.input_dim))


def test_input_matches_observation_size():
    assert NET.input_dim == OBS_DIM


class TestForward:
    def test_aggregation_example(self):
        w = weights()
        w["value_w"][...] = 0.0
        w["value_b"][...] = 1.0
        w["adv_w"][...] = 0.0
        w["adv_b"][...] = [0.0, 2.0, -2.0, 0.0, 0.0, 0.0]
        np.testing.assert_allclose(forward(w, observations(1)[0]), [1, 3, -1, 1, 1, 1], atol=1e-15)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_dueling_identity(self, seed):
        w = weights(seed)
        obs = observations(5, seed)
        q = forward(w, obs)
        v, _ = value_and_advantage(w, obs)
        np.testing.assert_allclose((q - v[:, None]).mean(axis=1), 0.0, atol=1e-12)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 2**32 - 1), st.floats(-100, 100, allow_nan=False))
    def test_advantage_shift(self, seed, c):
        w = weights(seed)
        obs = observations(5, seed)
        shifted = w.copy()
        shifted["adv_b"][...] += c
        np.testing.assert_allclose(forward(shifted, obs), forward(w, obs), atol=1e-9)
        assert np.array_equal(greedy(shifted, obs), greedy(w, obs))

    def test_sentinel_slot_permutation(self):
        w = weights()
        obs = observations(1)[0]
        obs[4 + 5 * 4 : 4 + 8 * 4] = np.tile(SENTINEL, 3)
        obs[4 + 5 * 4] = 1.0  # make slot 5 differ from 6 and 7 so the swap below is non-trivial
        swapped = obs.copy()
        swapped[4 + 5 * 4 : 4 + 6 * 4], swapped[4 + 6 * 4 : 4 + 7 * 4] = obs[4 + 6 * 4 : 4 + 7 * 4], obs[4 + 5 * 4 : 4 + 6 * 4]
        assert np.array_equal(forward(w, obs), forward(w, swapped))

    def test_shared_encoder(self):
        # every slot is processed by the same two layers
        assert {name for name, _ in NET.layer_shapes() if name.startswith("enc")} == {
            "enc1_w", "enc1_b", "enc2_w", "enc2_b"}
        assert dict(NET.layer_shapes())["enc1_w"] == (4, 32)

    def test_batch_matches_single(self):
        w, obs = weights(), observations(4)
        q = forward(w, obs)
        for i in range(4):
            np.testing.assert_allclose(forward(w, obs[i]), q[i], rtol=0, atol=1e-12)

    def test_non_finite_weights_rejected(self):
        w = weights()
        w["trunk_w"][0, 0] = np.nan
        with pytest.raises(ValueError, match="weights"):
            forward(w, observations(1)[0])

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            NetworkWeights(NET, {"enc1_w": np.zeros((3, 3))})


class TestGradient:
    def test_zero_residual(self):
        w, obs = weights(), observations(6)
        actions = np.arange(6)
        y = forward(w, obs)[np.arange(6), actions]
        loss, g, td = gradient(w, obs, actions, y)
        assert loss == 0.0 and np.all(g.vector == 0.0) and np.all(td == 0.0)

    def test_weights_linear(self):
        w, obs = weights(), observations(6)
        actions = np.array([0, 1, 2, 3, 4, 5])
        y = np.random.default_rng(5).normal(size=6)
        iw = np.random.default_rng(6).uniform(0.1, 1.0, size=6)
        l1, g1, _ = gradient(w, obs, actions, y, iw)
        l2, g2, _ = gradient(w, obs, actions, y, 2 * iw)
        assert l2 == 2 * l1
        assert np.array_equal(g2.vector, 2 * g1.vector)

    @staticmethod
    def check_finite_differences(config, seed, batch=5):
        rng = np.random.default_rng(seed)
        w = weights(seed, config)
        obs = observations(batch, seed, config)
        actions = rng.integers(0, config.n_actions, batch)
        y = rng.normal(size=batch)
        iw = rng.uniform(0.2, 1.0, batch)
        _, g, _ = gradient(w, obs, actions, y, iw)
        h = 1e-5
        base = w.vector.copy()
        fd = np.empty_like(base)
        for k in range(base.size):
            base[k] += h
            lp = gradient(NetworkWeights.from_vector(config, base), obs, actions, y, iw)[0]
            base[k] -= 2 * h
            lm = gradient(NetworkWeights.from_vector(config, base), obs, actions, y, iw)[0]
            base[k] += h
            fd[k] = (lp - lm) / (2 * h)
        scale = np.maximum(np.abs(fd), np.abs(g.vector))
        err = np.abs(fd - g.vector)
        # coordinates whose derivative is numerically zero are compared absolutely
        assert np.all((err <= 1e-4 * scale) | (scale < 1e-7))

    def test_finite_differences_full_network(self):
        self.check_finite_differences(NET, 2024)

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_finite_differences_randomized(self, seed):
        small = NetworkConfig(enc1=6, enc2=8, ego_hidden=5, trunk=7)
        self.check_finite_differences(small, seed, batch=7)

    def test_td_errors(self):
        w, obs = weights(), observations(3)
        y = np.array([1.0, 2.0, 3.0])
        _, _, td = gradient(w, obs, [0, 1, 2], y)
        np.testing.assert_allclose(td, y - forward(w, obs)[np.arange(3), [0, 1, 2]])

    def test_rejects_non_finite_targets(self):
        with pytest.raises(ValueError):
            gradient(weights(), observations(1), [0], [np.inf])

    def test_rejects_empty_batch(self):
        with pytest.raises(ValueError):
            gradient(weights(), observations(0), [], [])


def adam_reference(theta, grads, lr=1e-3, b1=0.9, b2=0.999, eps=1e-8):
    m = v = 0.0
    for t, g in enumerate(grads, start=1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        theta -= lr * (m / (1 - b1**t)) / (math.sqrt(v / (1 - b2**t)) + eps)
    return theta


def scalar_net():
    cfg = NetworkConfig(ego_dim=1, slot_dim=1, n_slots=1, enc1=1, enc2=1, ego_hidden=1, trunk=1, n_actions=1)
    return cfg, NetworkWeights.from_vector(cfg, np.full(_size(cfg), 0.5))


def _size(cfg):
    return sum(int(np.prod(s)) for _, s in cfg.layer_shapes())


class TestAdam:
    def test_zero_gradient(self):
        w = weights()
        new, state = optimizer_step(w, NetworkWeights(NET), AdamState(lr=1e-2))
        assert new.equals(w) and state.step == 1

    def test_one_step_scalar(self):
        cfg, w = scalar_net()
        g = NetworkWeights.from_vector(cfg, np.full(_size(cfg), -0.3))
        new, _ = optimizer_step(w, g, AdamState(lr=1e-3))
        expected = 0.5 - 1e-3 * (-0.3) / (0.3 + 1e-8)
        np.testing.assert_allclose(new.vector, expected, rtol=0, atol=1e-15)

    def test_two_steps_match_reference(self):
        cfg, w = scalar_net()
        g = NetworkWeights.from_vector(cfg, np.full(_size(cfg), 0.7))
        state = AdamState(lr=1e-3)
        for _ in range(2):
            w, state = optimizer_step(w, g, state)
        np.testing.assert_allclose(w.vector, adam_reference(0.5, [0.7, 0.7]), rtol=0, atol=1e-15)

    def test_inputs_untouched(self):
        w = weights()
        before = w.vector.copy()
        _, g, _ = gradient(w, observations(3), [0, 1, 2], [1.0, 1.0, 1.0])
        optimizer_step(w, g, AdamState())
        assert np.array_equal(w.vector, before)


class TestWeightsFile:
    def test_round_trip(self, tmp_path):
        w = weights(3)
        p1, p2 = tmp_path / "a.lkqn", tmp_path / "b.lkqn"
        save_weights(w, p1, "merge", 3)
        loaded, task, level = load_weights(p1)
        assert (task, level) == ("merge", 3)
        assert loaded.equals(w)
        save_weights(loaded, p2, task, level)
        assert p1.read_bytes() == p2.read_bytes()
        obs = observations(7)
        assert np.array_equal(forward(loaded, obs), forward(w, obs))

    def test_header(self):
        blob = dumps_weights(weights(), "keep_lane", 2)
        assert blob[:4] == b"LKQN"
        assert blob[-8:] == np.float64(weights()["adv_b"][-1]).astype("<f8").tobytes()
        assert len(blob) == 4 + 4 + 8 + 1 + 1 + 8 * _size(NET)

    def test_fingerprint_mismatch(self):
        blob = dumps_weights(weights(), "merge", 1)
        with pytest.raises(ValueError, match="configuration"):
            loads_weights(blob, NetworkConfig(trunk=32))

    def test_fingerprint_depends_on_dims(self):
        assert NET.fingerprint() == NetworkConfig().fingerprint()
        assert NET.fingerprint() != NetworkConfig(enc2=32).fingerprint()

    @pytest.mark.parametrize("mutate", [
        lambda b: b"XXXX" + b[4:],
        lambda b: b[:4] + (7).to_bytes(4, "little") + b[8:],
        lambda b: b[:-8],
        lambda b: b + b"\0",
        lambda b: b[:10],
    ])
    def test_corrupt(self, mutate):
        with pytest.raises(ValueError):
            loads_weights(mutate(dumps_weights(weights(), "merge", 1)))

    def test_unknown_task(self):
        with pytest.raises(ValueError):
            dumps_weights(weights(), "overtake", 1)
