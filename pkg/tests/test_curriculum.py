import json
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from levelk.curriculum import (
    MANIFEST,
    TIMING,
    CurriculumConfig,
    LevelTrainingFailed,
    PolicyRegistry,
    admissible_levels,
    make_env_factory,
    populate_environment,
    run_curriculum,
    task_of,
    warm_start,
)
from levelk.qnet import NetworkConfig, init_weights, load_weights
from levelk.sim import InitialSceneParams
from levelk.traffic import BOTTOM_LANE, TOP_LANE
from levelk.train import TrainConfig, TrainingDiverged, read_curve

NET = NetworkConfig()


def registry_up_to(n, seed=0):
    reg = PolicyRegistry()
    rng = np.random.default_rng(seed)
    for k in range(1, n + 1):
        reg.register(k, init_weights(NET, rng))
    return reg


TINY = CurriculumConfig(
    max_level=1,
    train=TrainConfig(total_steps=40, warmup=10, batch_size=4, target_sync=10, eps_decay_steps=20, eval_interval=20,
                      eval_episodes=1),
    scene=InitialSceneParams(n_cars=(10, 12)),
    seed=5,
)


class TestParity:
    def test_task_of(self):
        assert [task_of(k) for k in range(1, 6)] == ["merge", "keep_lane", "merge", "keep_lane", "merge"]

    def test_admissible(self):
        assert admissible_levels(1, BOTTOM_LANE) == [0] and admissible_levels(1, TOP_LANE) == [0]
        assert admissible_levels(3, BOTTOM_LANE) == [0, 1] and admissible_levels(3, TOP_LANE) == [0, 2]
        assert admissible_levels(6, BOTTOM_LANE) == [0, 1, 3, 5]
        assert admissible_levels(6, TOP_LANE) == [0, 2, 4]


class TestRegistry:
    def test_registry_parity(self):
        reg = registry_up_to(5)
        assert reg.levels == [0, 1, 2, 3, 4, 5]
        assert all(reg[k].task == task_of(k) for k in range(1, 6))
        assert reg[0].weights is None

    def test_contiguous(self):
        reg = PolicyRegistry()
        with pytest.raises(ValueError):
            reg.register(2, init_weights(NET, np.random.default_rng(0)))
        with pytest.raises(ValueError):
            reg.register(0, init_weights(NET, np.random.default_rng(0)))
        with pytest.raises(KeyError):
            reg[1]


class TestPopulate:
    def test_level_one_all_rule_based(self):
        lanes = np.array([0, 1] * 20)
        out = populate_environment(1, PolicyRegistry(), lanes, np.random.default_rng(0))
        assert all(b.kind == "level0" for b in out)
        assert [b.task for b in out] == ["merge", "keep_lane"] * 20

    def test_level_three_sets(self):
        lanes = np.array([0, 1] * 500)
        out = populate_environment(3, registry_up_to(2), lanes, np.random.default_rng(1))
        assert {b.level for b, l in zip(out, lanes) if l == BOTTOM_LANE} == {0, 1}
        assert {b.level for b, l in zip(out, lanes) if l == TOP_LANE} == {0, 2}

    def test_level_five_frequencies(self):
        n = 100_000
        reg = registry_up_to(4)
        for lane, admissible in ((BOTTOM_LANE, [0, 1, 3]), (TOP_LANE, [0, 2, 4])):
            out = populate_environment(5, reg, np.full(n, lane), np.random.default_rng(lane))
            levels = np.array([b.level for b in out])
            for k in admissible:
                assert abs(np.mean(levels == k) - 1 / 3) <= 0.02 / 3
            assert set(levels) == set(admissible)

    def test_missing_level(self):
        with pytest.raises(KeyError):
            populate_environment(3, registry_up_to(1), [0, 1], np.random.default_rng(0))

    @settings(max_examples=40, deadline=None)
    @given(st.integers(1, 6), st.lists(st.sampled_from([0, 1]), min_size=1, max_size=50), st.integers(0, 2**32 - 1))
    def test_invariants(self, k, lanes, seed):
        out = populate_environment(k, registry_up_to(5), np.array(lanes), np.random.default_rng(seed))
        for b, lane in zip(out, lanes):
            assert b.level < k
            if b.level > 0:
                assert b.kind == "policy" and b.task == task_of(b.level)
                assert b.task == ("merge" if lane == BOTTOM_LANE else "keep_lane")


class TestWarmStart:
    def test_fresh_for_first_two(self):
        reg = registry_up_to(2)
        for k in (1, 2):
            w = warm_start(k, reg, np.random.default_rng(9))
            assert not w.equals(reg[1].weights) and not w.equals(reg[2].weights)

    def test_same_task_copy(self):
        reg = registry_up_to(4)
        assert warm_start(3, reg, np.random.default_rng(0)).equals(reg[1].weights)
        w4 = warm_start(4, reg, np.random.default_rng(0))
        assert w4.equals(reg[2].weights) and w4 is not reg[2].weights
        w4["adv_b"][0] += 1.0
        assert not w4.equals(reg[2].weights)

    def test_missing(self):
        with pytest.raises(KeyError):
            warm_start(3, PolicyRegistry(), np.random.default_rng(0))


def test_env_factory_uses_lower_levels():
    reg = registry_up_to(2)
    env = make_env_factory(3, reg, replace(TINY, max_level=3))()
    assert env.task == "merge" and set(env.policies) == {1, 2} and not env.stop_at_success
    assert make_env_factory(3, reg, replace(TINY, max_level=3), training=False)().stop_at_success
    env.reset(np.random.default_rng(0))
    levels = {b.level for b in env.scene.behaviors if b.kind == "policy"}
    assert levels <= {1, 2}


class TestRun:
    def test_single_level(self, tmp_path):
        reg = run_curriculum(TINY, tmp_path)
        assert reg.levels == [0, 1]
        assert sorted(p.name for p in tmp_path.iterdir()) == sorted(
            ["level_1.lkqn", "curve_level_1.csv", MANIFEST, TIMING])
        w, task, level = load_weights(tmp_path / "level_1.lkqn")
        assert (task, level) == ("merge", 1) and w.equals(reg[1].weights)
        assert [row[0] for row in read_curve(tmp_path / "curve_level_1.csv")] == [20, 40]
        manifest = json.loads((tmp_path / MANIFEST).read_text())
        assert manifest["master_seed"] == 5 and manifest["levels"][0]["seed_entropy"] == [5, 1]
        assert PolicyRegistry.load(tmp_path)[1].weights.equals(w)

    def test_three_levels_deterministic(self, tmp_path):
        cfg = replace(TINY, max_level=3)
        run_curriculum(cfg, tmp_path / "a")
        run_curriculum(cfg, tmp_path / "b")
        for name in ("level_1.lkqn", "level_2.lkqn", "level_3.lkqn", MANIFEST, "curve_level_3.csv"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
        manifest = json.loads((tmp_path / "a" / MANIFEST).read_text())
        assert [e["task"] for e in manifest["levels"]] == ["merge", "keep_lane", "merge"]
        assert [e["warm_start"] for e in manifest["levels"]] == [None, None, 1]

    def test_failure_names_level(self, monkeypatch):
        import levelk.curriculum as cur

        real = cur.train_level

        def flaky(factory, init, cfg, rng, net, progress, eval_factory):
            if factory().task == "keep_lane":
                raise TrainingDiverged("non-finite loss")
            return real(factory, init, cfg, rng, net, progress, eval_factory)

        monkeypatch.setattr(cur, "train_level", flaky)
        with pytest.raises(LevelTrainingFailed) as info:
            run_curriculum(replace(TINY, max_level=3))
        assert info.value.level == 2 and isinstance(info.value.__cause__, TrainingDiverged)

    def test_config_validation(self):
        with pytest.raises(ValueError):
            CurriculumConfig(max_level=0)

    def test_fingerprint_sensitive(self):
        assert TINY.fingerprint() == replace(TINY).fingerprint()
        assert TINY.fingerprint() != replace(TINY, seed=6).fingerprint()
