"""Two-lane straight highway with a four-AV platoon and IDM-driven HDV traffic.

AVs take discrete meta-actions once per decision step; low-level proportional
controllers then track the resulting speed and lane targets over a number of
physics substeps. HDVs follow the Intelligent Driver Model and never change
lanes. Everything is driven by a single seeded generator so a trajectory is
reproducible from ``(config, seed, actions)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from enum import Enum, IntEnum
from typing import Optional, Sequence

import numpy as np

from . import reward as rw


class Action(IntEnum):
    LANE_LEFT = 0
    IDLE = 1
    LANE_RIGHT = 2
    FASTER = 3
    SLOWER = 4


N_ACTIONS = len(Action)


class VehicleKind(str, Enum):
    AV = "AV"
    HDV = "HDV"


class ConfigurationError(ValueError):
    pass


# HDV counts per density level (inclusive ranges).
HDV_RANGE = {1: (1, 2), 2: (2, 3), 3: (3, 4)}

N_OBS_ROWS = 5
N_OBS_FEATURES = 5
DX_SCALE = 150.0
DY_SCALE = 8.0
SPEED_SCALE = 30.0


@dataclass(slots=True)
class VehicleState:
    id: int
    kind: VehicleKind
    x: float
    lane: int
    y: float
    v: float
    target_speed: float
    target_lane: int
    crashed: bool = False
    length: float = 5.0
    width: float = 2.0
    vy: float = 0.0
    desired_speed: float = 0.0  # IDM free speed, HDVs only

    @property
    def moving_speed(self) -> float:
        # crashed vehicles keep their last v for bookkeeping but are stationary
        return 0.0 if self.crashed else self.v

    @property
    def moving_vy(self) -> float:
        return 0.0 if self.crashed else self.vy


@dataclass(frozen=True)
class IDMParams:
    max_accel: float = 3.0
    comfort_decel: float = 2.0
    jam_distance: float = 2.0
    time_gap: float = 1.0
    exponent: float = 4.0

    def equilibrium_gap(self, v: float, desired_speed: float) -> float:
        """Bumper-to-bumper gap at which a follower at the leader's speed has zero acceleration."""
        return (self.jam_distance + v * self.time_gap) / math.sqrt(1.0 - (v / desired_speed) ** self.exponent)


@dataclass(frozen=True)
class EnvConfig:
    density_level: int = 1
    n_avs: int = 4
    # None draws the count from HDV_RANGE at reset; an explicit value bypasses
    # the density table (used by tests and sandbox scenarios).
    n_hdvs: Optional[int] = None
    episode_steps: int = 100
    decision_dt: float = 1.0
    physics_substeps: int = 15
    sensing_range: float = 150.0
    lanes: int = 2
    lane_width: float = 4.0
    road_length: float = 2000.0
    seed: int = 0

    # AV low-level control
    speed_gain: float = 1.0
    max_accel: float = 5.0
    speed_step: float = 5.0
    lateral_gain: float = 15.0
    max_lateral_speed: float = 2.0

    # initial placement
    platoon_leader_x: float = 200.0
    platoon_gap: tuple = (36.0, 60.0)
    av_speed: tuple = (20.0, 30.0)
    hdv_speed: tuple = (20.0, 25.0)
    hdv_ahead: tuple = (80.0, 200.0)
    hdv_min_gap: float = 25.0
    placement_retries: int = 100

    idm: IDMParams = field(default_factory=IDMParams)
    weights: rw.RewardWeights = field(default_factory=rw.RewardWeights)

    def validate(self) -> None:
        if self.density_level not in HDV_RANGE:
            raise ConfigurationError(f"density_level must be 1, 2 or 3, got {self.density_level}")
        if self.n_avs != 4:
            raise ConfigurationError(f"the platoon has exactly 4 AVs, got {self.n_avs}")
        if self.lanes != 2:
            raise ConfigurationError("only two-lane roads are supported")
        if self.n_hdvs is not None and self.n_hdvs < 0:
            raise ConfigurationError("n_hdvs must be non-negative")
        if self.episode_steps <= 0 or self.physics_substeps <= 0 or self.decision_dt <= 0:
            raise ConfigurationError("episode_steps, physics_substeps and decision_dt must be positive")

    @property
    def substep_dt(self) -> float:
        return self.decision_dt / self.physics_substeps

    def lane_center(self, lane: int) -> float:
        return lane * self.lane_width


@dataclass
class StepResult:
    observations: list  # one (5, 5) array per AV
    raw_rewards: list
    shared_rewards: list
    done: list
    info: dict


def check_collisions(vehicles: Sequence[VehicleState]) -> list[tuple[int, int]]:
    """Id pairs ``(a, b)`` with ``a < b`` whose axis-aligned footprints overlap."""
    pairs = []
    n = len(vehicles)
    for i in range(n):
        a = vehicles[i]
        for j in range(i + 1, n):
            b = vehicles[j]
            if abs(a.x - b.x) < 0.5 * (a.length + b.length) and abs(a.y - b.y) < 0.5 * (a.width + b.width):
                pairs.append((min(a.id, b.id), max(a.id, b.id)))
    return pairs


def idm_acceleration(
    v: float,
    desired_speed: float,
    params: IDMParams,
    gap: Optional[float] = None,
    leader_speed: Optional[float] = None,
) -> float:
    """IDM acceleration; ``gap`` is bumper-to-bumper, None means free road."""
    acc = 1.0 - (v / desired_speed) ** params.exponent
    if gap is not None:
        dv = v - leader_speed
        s_star = params.jam_distance + max(
            0.0, v * params.time_gap + v * dv / (2.0 * math.sqrt(params.max_accel * params.comfort_decel))
        )
        acc -= (s_star / max(gap, 0.1)) ** 2
    return params.max_accel * acc


def nearest_leader(
    vehicles: Sequence[VehicleState], ego: VehicleState, max_distance: float
) -> Optional[VehicleState]:
    """Closest vehicle strictly ahead of ``ego`` in its lane within ``max_distance``."""
    best = None
    best_dx = max_distance
    for other in vehicles:
        if other.id == ego.id or other.lane != ego.lane:
            continue
        dx = other.x - ego.x
        if 0.0 < dx <= best_dx:
            best, best_dx = other, dx
    return best


def hdv_policy(vehicles: Sequence[VehicleState], vehicle: VehicleState, config: EnvConfig) -> float:
    if vehicle.kind is not VehicleKind.HDV:
        raise ValueError(f"vehicle {vehicle.id} is not an HDV")
    leader = nearest_leader(vehicles, vehicle, config.sensing_range)
    if leader is None:
        return idm_acceleration(vehicle.v, vehicle.desired_speed, config.idm)
    gap = leader.x - vehicle.x - 0.5 * (leader.length + vehicle.length)
    return idm_acceleration(vehicle.v, vehicle.desired_speed, config.idm, gap, leader.moving_speed)


def observe(vehicles: Sequence[VehicleState], ego: VehicleState, config: EnvConfig) -> np.ndarray:
    """Ego-relative neighbor features, shape ``(N_OBS_ROWS, 5)``.

    Columns are ``is_present, dx/150, dy/8, dvx/30, dvy/30``. Row 0 is the ego
    itself and carries its absolute speed in the velocity columns.
    """
    obs = np.zeros((N_OBS_ROWS, N_OBS_FEATURES))
    obs[0] = (1.0, 0.0, 0.0, ego.moving_speed / SPEED_SCALE, ego.moving_vy / SPEED_SCALE)
    for row, other in enumerate(neighbors(vehicles, ego, config), start=1):
        obs[row] = (
            1.0,
            (other.x - ego.x) / DX_SCALE,
            (other.y - ego.y) / DY_SCALE,
            (other.moving_speed - ego.moving_speed) / SPEED_SCALE,
            (other.moving_vy - ego.moving_vy) / SPEED_SCALE,
        )
    return obs


def neighbors(vehicles: Sequence[VehicleState], ego: VehicleState, config: EnvConfig) -> list[VehicleState]:
    """Up to ``N_OBS_ROWS - 1`` vehicles within sensing range, nearest first."""
    near = [o for o in vehicles if o.id != ego.id and abs(o.x - ego.x) <= config.sensing_range]
    near.sort(key=lambda o: (abs(o.x - ego.x), o.x - ego.x, o.id))
    return near[: N_OBS_ROWS - 1]


class HighwayEnv:
    """Multi-agent platoon environment.

    ``reset`` and ``step`` return per-AV lists ordered by platoon index
    (element 0 is the leader, AV id 1).
    """

    def __init__(self, config: EnvConfig = EnvConfig()):
        config.validate()
        self.config = config
        self.vehicles: list[VehicleState] = []
        self.rng = np.random.default_rng(config.seed)
        self.step_count = 0
        self.done = [True] * config.n_avs
        self._final_obs: dict[int, np.ndarray] = {}

    @property
    def avs(self) -> list[VehicleState]:
        return self.vehicles[: self.config.n_avs]

    @property
    def hdvs(self) -> list[VehicleState]:
        return self.vehicles[self.config.n_avs :]

    def reset(self, seed: Optional[int] = None) -> list[np.ndarray]:
        cfg = self.config
        self.rng = np.random.default_rng(cfg.seed if seed is None else seed)
        rng = self.rng
        if cfg.n_hdvs is None:
            lo, hi = HDV_RANGE[cfg.density_level]
            n_hdvs = int(rng.integers(lo, hi + 1))
        else:
            n_hdvs = cfg.n_hdvs

        lane = int(rng.integers(0, cfg.lanes))
        avs = []
        x = cfg.platoon_leader_x
        for i in range(cfg.n_avs):
            if i > 0:
                x -= rng.uniform(*cfg.platoon_gap)
            v = rng.uniform(*cfg.av_speed)
            avs.append(
                VehicleState(
                    id=i + 1, kind=VehicleKind.AV, x=x, lane=lane, y=cfg.lane_center(lane),
                    v=v, target_speed=v, target_lane=lane,
                )
            )
        if avs[-1].x - 0.5 * avs[-1].length < 0:
            raise ConfigurationError("platoon does not fit behind the configured leader position")

        hdvs = self._place_hdvs(n_hdvs, avs[0].x)
        self.vehicles = avs + hdvs
        self.step_count = 0
        self.done = [False] * cfg.n_avs
        self._final_obs = {}
        return [observe(self.vehicles, av, cfg) for av in self.avs]

    def _place_hdvs(self, n: int, leader_x: float) -> list[VehicleState]:
        cfg = self.config
        rng = self.rng
        for _ in range(cfg.placement_retries):
            spots = [(leader_x + rng.uniform(*cfg.hdv_ahead), int(rng.integers(0, cfg.lanes))) for _ in range(n)]
            ok = all(
                abs(a[0] - b[0]) >= cfg.hdv_min_gap
                for k, a in enumerate(spots) for b in spots[k + 1 :] if a[1] == b[1]
            ) and all(x + 2.5 <= cfg.road_length for x, _ in spots)
            if ok:
                break
        else:
            raise ConfigurationError(
                f"could not place {n} HDVs without overlap after {cfg.placement_retries} attempts"
            )
        hdvs = []
        for k, (x, lane) in enumerate(sorted(spots)):
            v = rng.uniform(*cfg.hdv_speed)
            desired = rng.uniform(*cfg.hdv_speed)
            hdvs.append(
                VehicleState(
                    id=cfg.n_avs + k + 1, kind=VehicleKind.HDV, x=x, lane=lane, y=cfg.lane_center(lane),
                    v=v, target_speed=desired, target_lane=lane, desired_speed=desired,
                )
            )
        return hdvs

    def observe(self, agent_id: int) -> np.ndarray:
        ego = self.vehicles[agent_id - 1]
        if ego.crashed and agent_id in self._final_obs:
            return self._final_obs[agent_id].copy()
        return observe(self.vehicles, ego, self.config)

    def _apply_action(self, av: VehicleState, action: int) -> None:
        cfg = self.config
        lo, hi = cfg.weights.v_min, cfg.weights.v_max
        if action == Action.LANE_LEFT:
            av.target_lane = max(0, av.target_lane - 1)
        elif action == Action.LANE_RIGHT:
            av.target_lane = min(cfg.lanes - 1, av.target_lane + 1)
        elif action == Action.FASTER:
            av.target_speed = min(hi, av.target_speed + cfg.speed_step)
        elif action == Action.SLOWER:
            av.target_speed = max(lo, av.target_speed - cfg.speed_step)

    def _substep(self) -> list[tuple[int, int]]:
        cfg = self.config
        dt = cfg.substep_dt
        accels = []
        for veh in self.vehicles:
            if veh.crashed:
                accels.append(0.0)
            elif veh.kind is VehicleKind.AV:
                a = cfg.speed_gain * (veh.target_speed - veh.v)
                accels.append(min(cfg.max_accel, max(-cfg.max_accel, a)))
            else:
                accels.append(hdv_policy(self.vehicles, veh, cfg))
        for veh, a in zip(self.vehicles, accels):
            if veh.crashed:
                continue
            v_new = max(0.0, veh.v + a * dt)
            veh.x += 0.5 * (veh.v + v_new) * dt
            veh.v = v_new
            if veh.kind is VehicleKind.AV:
                err = cfg.lane_center(veh.target_lane) - veh.y
                vy = min(cfg.max_lateral_speed, max(-cfg.max_lateral_speed, cfg.lateral_gain * err))
                veh.vy = vy
                veh.y += vy * dt
                if abs(cfg.lane_center(veh.target_lane) - veh.y) < 1e-9:
                    veh.y = cfg.lane_center(veh.target_lane)
                    veh.vy = 0.0
                veh.lane = min(cfg.lanes - 1, max(0, int(round(veh.y / cfg.lane_width))))

        new_pairs = []
        by_id = {veh.id: veh for veh in self.vehicles}
        for a, b in check_collisions(self.vehicles):
            va, vb = by_id[a], by_id[b]
            if va.crashed and vb.crashed:
                continue
            va.crashed = vb.crashed = True
            va.vy = vb.vy = 0.0
            new_pairs.append((a, b))
        return new_pairs

    def headway(self, ego: VehicleState) -> float:
        """Distance to the nearest same-lane vehicle ahead, capped at sensing range."""
        leader = nearest_leader(self.vehicles, ego, self.config.sensing_range)
        d = self.config.sensing_range if leader is None else leader.x - ego.x
        return max(d, 0.5)

    def raw_reward(self, av: VehicleState, collided: bool) -> tuple[float, dict]:
        w = self.config.weights
        r_c = rw.collision_penalty(collided)
        r_os = rw.overtake_speed_reward(av.v, w)
        r_h = rw.headway_reward(self.headway(av), max(av.v, 1e-6), w)
        r_f = 0.0 if av.id == 1 else rw.following_reward(av, self.vehicles[av.id - 2], w)
        parts = {"r_c": r_c, "r_os": r_os, "r_h": r_h, "r_f": r_f}
        return rw.vehicle_reward(r_c, r_os, r_h, r_f, w), parts

    def step(self, actions: Sequence[Optional[int]]) -> StepResult:
        cfg = self.config
        if all(self.done):
            raise RuntimeError("episode finished; call reset()")
        if len(actions) != cfg.n_avs:
            raise ValueError(f"expected {cfg.n_avs} actions, got {len(actions)}")
        live = [not d for d in self.done]
        for av, act, alive in zip(self.avs, actions, live):
            if not alive:
                continue
            if act is None or int(act) != act or not 0 <= int(act) < N_ACTIONS:
                raise ValueError(f"invalid action {act!r} for AV {av.id}")
            self._apply_action(av, int(act))

        crashed_before = {veh.id for veh in self.vehicles if veh.crashed}
        collisions = []
        for k in range(cfg.physics_substeps):
            for pair in self._substep():
                collisions.append({"pair": list(pair), "substep": k})
        self.step_count += 1

        raw, parts = {}, {}
        for av, alive in zip(self.avs, live):
            if alive:
                collided = av.crashed and av.id not in crashed_before
                raw[av.id], parts[av.id] = self.raw_reward(av, collided)

        observations, groups = [], {}
        for av, alive in zip(self.avs, live):
            if not alive:
                observations.append(self._final_obs[av.id].copy())
                continue
            near = neighbors(self.vehicles, av, cfg)
            groups[av.id] = [av.id] + [o.id for o in near if o.id in raw]
            obs = observe(self.vehicles, av, cfg)
            observations.append(obs)
            if av.crashed:
                self._final_obs[av.id] = obs
        shared = rw.local_shared_reward(raw, groups)

        at_limit = self.step_count >= cfg.episode_steps
        for i, av in enumerate(self.avs):
            if live[i] and (av.crashed or at_limit):
                self.done[i] = True
                self._final_obs.setdefault(av.id, observations[i])

        ids = [av.id for av in self.avs]
        return StepResult(
            observations=observations,
            raw_rewards=[raw.get(i, 0.0) for i in ids],
            shared_rewards=[shared.get(i, 0.0) for i in ids],
            done=list(self.done),
            info={
                "step": self.step_count,
                "live": live,
                "collisions": collisions,
                "reward_parts": parts,
                "speeds": {veh.id: veh.v for veh in self.vehicles},
                "positions": {veh.id: (veh.x, veh.y) for veh in self.vehicles},
            },
        )

    def snapshot(self) -> list[VehicleState]:
        return [replace(v) for v in self.vehicles]

    def trace_record(self, result: StepResult, actions: Sequence[Optional[int]], episode: int) -> dict:
        """JSON-serialisable record of the state after ``result``."""
        return {
            "episode": episode,
            "step": result.info["step"],
            "vehicles": [
                {"id": v.id, "kind": v.kind.value, "x": v.x, "y": v.y, "lane": v.lane, "v": v.v, "crashed": v.crashed}
                for v in self.vehicles
            ],
            "avs": [
                {
                    "id": av.id,
                    "live": result.info["live"][i],
                    "action": None if actions[i] is None or not result.info["live"][i] else int(actions[i]),
                    "raw_reward": result.raw_rewards[i],
                    "shared_reward": result.shared_rewards[i],
                    "collided": result.info["reward_parts"].get(av.id, {}).get("r_c", 0.0) < 0,
                }
                for i, av in enumerate(self.avs)
            ],
            "collisions": result.info["collisions"],
        }
