import json

import numpy as np
import pytest
from scipy.optimize import brentq

from platoonrl.highway_env import (
    Action,
    ConfigurationError,
    EnvConfig,
    HighwayEnv,
    IDMParams,
    VehicleKind,
    VehicleState,
    check_collisions,
    hdv_policy,
    idm_acceleration,
    observe,
)


def make_env(**kw):
    env = HighwayEnv(EnvConfig(**kw))
    env.reset()
    return env


def vehicle(id, x, lane=0, v=25.0, kind=VehicleKind.AV, **kw):
    return VehicleState(id=id, kind=kind, x=x, lane=lane, y=4.0 * lane, v=v, target_speed=v, target_lane=lane, **kw)


def random_rollout(density, seed, action_seed, steps=100):
    env = HighwayEnv(EnvConfig(density_level=density))
    env.reset(seed)
    rng = np.random.default_rng(action_seed)
    frames = []
    for _ in range(steps):
        if all(env.done):
            break
        res = env.step([int(a) for a in rng.integers(0, 5, 4)])
        frames.append((env.snapshot(), res))
    return env, frames


class TestReset:
    @pytest.mark.parametrize("density, lo, hi", [(1, 1, 2), (2, 2, 3), (3, 3, 4)])
    def test_hdv_counts(self, density, lo, hi):
        seen = set()
        for seed in range(40):
            env = HighwayEnv(EnvConfig(density_level=density))
            env.reset(seed)
            assert len(env.avs) == 4
            seen.add(len(env.hdvs))
        assert seen == set(range(lo, hi + 1))

    def test_density1_seed42(self):
        env = HighwayEnv(EnvConfig(density_level=1))
        env.reset(42)
        assert len(env.avs) == 4 and len(env.hdvs) in (1, 2)

    def test_deterministic(self):
        a = make_env(density_level=3, seed=7).snapshot()
        b = make_env(density_level=3, seed=7).snapshot()
        assert a == b

    def test_platoon_layout(self):
        for seed in range(20):
            env = HighwayEnv(EnvConfig(density_level=3))
            env.reset(seed)
            avs = env.avs
            assert [av.id for av in avs] == [1, 2, 3, 4]
            assert len({av.lane for av in avs}) == 1
            gaps = [avs[i].x - avs[i + 1].x for i in range(3)]
            assert all(36.0 <= g <= 60.0 for g in gaps)
            assert all(20.0 <= av.v <= 30.0 and av.target_speed == av.v for av in avs)
            for h in env.hdvs:
                assert 80.0 <= h.x - avs[0].x <= 200.0
                assert 20.0 <= h.v <= 25.0 and 20.0 <= h.desired_speed <= 25.0
            assert check_collisions(env.vehicles) == []

    def test_placement_failure(self):
        env = HighwayEnv(EnvConfig(n_hdvs=4, hdv_ahead=(80.0, 81.0)))
        with pytest.raises(ConfigurationError):
            env.reset(0)

    @pytest.mark.parametrize("bad", [dict(density_level=4), dict(n_avs=3), dict(lanes=3)])
    def test_invalid_config(self, bad):
        with pytest.raises(ConfigurationError):
            HighwayEnv(EnvConfig(**bad))


class TestStep:
    def test_idle_empty_road(self):
        env = make_env(n_hdvs=0, seed=3)
        before = env.snapshot()
        res = env.step([Action.IDLE] * 4)
        for old, new in zip(before, env.vehicles):
            assert new.x == pytest.approx(old.x + old.v * 1.0, rel=1e-12)
            assert new.v == old.v
        assert not any(res.done)

    def test_faster_clipped(self):
        env = make_env(n_hdvs=0)
        av = env.avs[0]
        av.v = av.target_speed = 30.0
        env.step([Action.FASTER, Action.IDLE, Action.IDLE, Action.IDLE])
        assert av.target_speed == 30.0 and av.v == pytest.approx(30.0)

    def test_slower_clipped(self):
        env = make_env(n_hdvs=0)
        for _ in range(4):
            env.step([Action.SLOWER] * 4)
        assert all(av.target_speed == 20.0 for av in env.avs)

    def test_lane_change_completes_in_two_seconds(self):
        env = make_env(n_hdvs=0)
        lane = env.avs[0].lane
        act = Action.LANE_RIGHT if lane == 0 else Action.LANE_LEFT
        env.step([act] + [Action.IDLE] * 3)
        assert 0.0 < abs(env.avs[0].y - 4.0 * lane) < 4.0
        env.step([Action.IDLE] * 4)
        assert env.avs[0].y == 4.0 * (1 - lane) and env.avs[0].lane == 1 - lane

    def test_lane_target_clipped(self):
        env = make_env(n_hdvs=0)
        lane = env.avs[0].lane
        act = Action.LANE_LEFT if lane == 0 else Action.LANE_RIGHT
        env.step([act] * 4)
        assert all(av.target_lane == lane and av.y == 4.0 * lane for av in env.avs)

    def test_collision_sets_flags_and_penalty(self):
        env = make_env(n_hdvs=0)
        a1, a2 = env.avs[0], env.avs[1]
        a2.x = a1.x - 4.0
        a2.v = a2.target_speed = a1.v
        res = env.step([Action.IDLE] * 4)
        assert a1.crashed and a2.crashed
        assert res.info["reward_parts"][1]["r_c"] == -1.0
        assert res.info["reward_parts"][2]["r_c"] == -1.0
        assert res.done[0] and res.done[1]
        assert res.raw_rewards[0] < -180 and res.raw_rewards[1] < -180
        assert {tuple(c["pair"]) for c in res.info["collisions"]} == {(1, 2)}

    def test_invalid_action(self):
        env = make_env()
        with pytest.raises(ValueError):
            env.step([0, 1, 2, 5])
        with pytest.raises(ValueError):
            env.step([0, 1, 2])

    def test_episode_length(self):
        env = make_env(n_hdvs=0, seed=1)
        for k in range(100):
            res = env.step([Action.SLOWER] * 4)
            if k < 99:
                assert not any(res.done)
        assert all(res.done)
        with pytest.raises(RuntimeError):
            env.step([1] * 4)

    def test_shared_reward_groups(self):
        env = make_env(n_hdvs=0, seed=2)
        res = env.step([Action.IDLE] * 4)
        # all four AVs lie within 150 m of each other, so every agent shares the same mean
        assert np.allclose(res.shared_rewards, np.mean(res.raw_rewards))

    def test_trace_record_is_json(self):
        env = make_env(density_level=2)
        actions = [1, 3, 4, 1]
        res = env.step(actions)
        rec = json.loads(json.dumps(env.trace_record(res, actions, episode=1)))
        assert rec["step"] == 1 and len(rec["avs"]) == 4
        assert {"id", "kind", "x", "y", "lane", "v", "crashed"} <= set(rec["vehicles"][0])


class TestObserve:
    def test_alone(self):
        cfg = EnvConfig()
        ego = vehicle(1, 0.0, v=24.0)
        obs = observe([ego], ego, cfg)
        assert obs.shape == (5, 5)
        assert np.array_equal(obs[0], [1.0, 0.0, 0.0, 24.0 / 30.0, 0.0])
        assert not obs[1:].any()

    def test_out_of_range_excluded(self):
        cfg = EnvConfig()
        ego, far = vehicle(1, 0.0), vehicle(2, 200.0)
        assert not observe([ego, far], ego, cfg)[1:].any()

    def test_neighbor_normalisation(self):
        cfg = EnvConfig()
        ego, other = vehicle(1, 0.0), vehicle(2, 100.0)
        obs = observe([ego, other], ego, cfg)
        assert np.allclose(obs[1], [1.0, 100.0 / 150.0, 0.0, 0.0, 0.0])

    def test_ordering_and_cap(self):
        cfg = EnvConfig()
        ego = vehicle(1, 0.0)
        others = [vehicle(i, dx, lane=1) for i, dx in zip(range(2, 8), [-30.0, 30.0, 10.0, 140.0, -90.0, 60.0])]
        obs = observe([ego] + others, ego, cfg)
        assert np.allclose(obs[1:, 1] * 150.0, [10.0, -30.0, 30.0, 60.0])
        assert np.allclose(obs[1:, 2], 0.5)

    def test_locality_over_rollouts(self):
        for seed in range(3):
            _, frames = random_rollout(3, seed, seed + 100)
            for _, res in frames:
                for obs in res.observations:
                    present = obs[:, 0] == 1.0
                    assert np.all(np.abs(obs[present, 1]) * 150.0 <= 150.0 + 1e-9)
                    assert not obs[~present].any()


class TestIDM:
    P = IDMParams()

    def test_free_road_equilibrium(self):
        assert idm_acceleration(22.0, 22.0, self.P) == pytest.approx(0.0, abs=1e-12)

    def test_stopped_leader_brakes(self):
        cfg = EnvConfig()
        hdv = vehicle(5, 0.0, v=22.0, kind=VehicleKind.HDV, desired_speed=22.0)
        leader = vehicle(6, 10.0, v=0.0, kind=VehicleKind.HDV, desired_speed=22.0)
        assert hdv_policy([hdv, leader], hdv, cfg) < -10.0

    def test_equilibrium_gap(self):
        v, v0 = 21.0, 24.0
        # oracle: root of the IDM acceleration in the gap at equal speeds
        s_eq = brentq(lambda s: idm_acceleration(v, v0, self.P, s, v), 1.0, 500.0, xtol=1e-13)
        assert self.P.equilibrium_gap(v, v0) == pytest.approx(s_eq, rel=1e-9)
        cfg = EnvConfig()
        hdv = vehicle(5, 0.0, v=v, kind=VehicleKind.HDV, desired_speed=v0)
        leader = vehicle(6, s_eq + 5.0, v=v, kind=VehicleKind.HDV, desired_speed=v0)
        assert hdv_policy([hdv, leader], hdv, cfg) == pytest.approx(0.0, abs=1e-9)

    def test_rejects_av(self):
        with pytest.raises(ValueError):
            hdv_policy([vehicle(1, 0.0)], vehicle(1, 0.0), EnvConfig())

    def test_hdvs_keep_lane(self):
        env, frames = random_rollout(3, 5, 6)
        for snap, _ in frames:
            for v in snap[4:]:
                assert v.y == 4.0 * v.lane and v.lane == v.target_lane


class TestCollisions:
    def test_longitudinal_overlap(self):
        assert check_collisions([vehicle(1, 0.0), vehicle(2, 4.0)]) == [(1, 2)]

    def test_adjacent_lanes(self):
        assert check_collisions([vehicle(1, 0.0, lane=0), vehicle(2, 0.0, lane=1)]) == []

    def test_never_self(self):
        v = vehicle(1, 0.0)
        assert check_collisions([v]) == []

    def test_touching_is_not_overlap(self):
        assert check_collisions([vehicle(1, 0.0), vehicle(2, 5.0)]) == []


class TestTrajectoryProperties:
    def test_determinism(self):
        _, a = random_rollout(2, 11, 12)
        _, b = random_rollout(2, 11, 12)
        assert [s for s, _ in a] == [s for s, _ in b]
        assert [r.shared_rewards for _, r in a] == [r.shared_rewards for _, r in b]

    def test_invariants(self):
        for seed in range(6):
            env, frames = random_rollout(3, seed, 1000 + seed)
            frozen = {}
            for snap, res in frames:
                for v in snap:
                    assert v.v >= 0.0
                    assert v.lane in (0, 1) and 0.0 <= v.y <= 4.0
                    if v.kind is VehicleKind.AV:
                        assert 20.0 <= v.target_speed <= 30.0
                    if v.id in frozen:
                        assert (v.x, v.y, v.v) == frozen[v.id]
                    elif v.crashed:
                        frozen[v.id] = (v.x, v.y, v.v)
                for c in res.info["collisions"]:
                    a, b = c["pair"]
                    assert a < b
            assert len(frames) <= 100

    def test_collision_steps_below_bound(self):
        for seed in range(6):
            _, frames = random_rollout(3, seed, 50 + seed)
            for _, res in frames:
                for i, parts in res.info["reward_parts"].items():
                    if parts["r_c"] < 0:
                        assert res.raw_rewards[i - 1] < -180
