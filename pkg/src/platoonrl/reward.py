"""Per-vehicle platoon-overtaking reward and neighborhood reward sharing."""

from __future__ import annotations

import math
from dataclasses import dataclass, asdict
from typing import Mapping, Sequence


@dataclass(frozen=True)
class RewardWeights:
    w_c: float = 200.0
    w_os: float = 1.0
    w_h: float = 4.0
    w_f: float = 5.0
    k1: float = 0.25
    k2: float = 0.3
    t_h: float = 1.2
    v_min: float = 20.0
    v_max: float = 30.0

    def __post_init__(self):
        for name, value in asdict(self).items():
            if not value > 0:
                raise ValueError(f"reward constant {name} must be positive, got {value}")
        if self.v_max <= self.v_min:
            raise ValueError("v_max must exceed v_min")

    @property
    def danger_distance(self) -> float:
        """Upper edge of the danger band (t_h * v_max)."""
        return self.t_h * self.v_max

    @property
    def follow_range(self) -> float:
        """Gap (2 s at v_max) within which the gap-keeping term is paid."""
        return 2.0 * self.v_max


DEFAULT_WEIGHTS = RewardWeights()


def overtake_speed_reward(v: float, weights: RewardWeights = DEFAULT_WEIGHTS) -> float:
    r = (v - weights.v_min) / (weights.v_max - weights.v_min)
    return min(1.0, max(0.0, r))


def collision_penalty(collided: bool) -> float:
    return -1.0 if collided else 0.0


def headway_reward(d_headway: float, v: float, weights: RewardWeights = DEFAULT_WEIGHTS) -> float:
    """Log ratio of distance headway to the threshold distance ``t_h * v``.

    Negative inside the danger band, zero at exactly ``t_h`` seconds of
    headway, positive beyond.
    """
    if d_headway <= 0 or v <= 0:
        raise ValueError(f"headway reward needs d_headway > 0 and v > 0, got {d_headway}, {v}")
    return math.log(d_headway / (weights.t_h * v))


def following_reward(ego, predecessor, weights: RewardWeights = DEFAULT_WEIGHTS) -> float:
    """Gap-keeping plus lane-keeping reward relative to the platoon predecessor.

    ``ego`` and ``predecessor`` only need ``x`` and ``lane`` attributes. Both
    terms are additive: the gap term pays ``0.3*k1*|dx|/(t_h*v_max)`` while
    ``|dx| <= 2*v_max`` and the lane term pays ``0.7*k2`` when the two
    vehicles share a lane.
    """
    gap = abs(predecessor.x - ego.x)
    r = 0.0
    if gap <= weights.follow_range:
        r += 0.3 * weights.k1 * gap / weights.danger_distance
    if ego.lane == predecessor.lane:
        r += 0.7 * weights.k2
    return r


def vehicle_reward(
    r_c: float, r_os: float, r_h: float, r_f: float, weights: RewardWeights = DEFAULT_WEIGHTS
) -> float:
    return weights.w_c * r_c + weights.w_os * r_os + weights.w_h * r_h + weights.w_f * r_f


def local_shared_reward(
    raw_rewards: Mapping[int, float], neighbor_sets: Mapping[int, Sequence[int]]
) -> dict[int, float]:
    """Average each agent's raw reward over itself and its close AV neighbors."""
    shared = {}
    for ego, members in neighbor_sets.items():
        members = set(members)
        if ego not in members:
            raise ValueError(f"neighbor set of agent {ego} must contain the agent itself")
        shared[ego] = math.fsum(raw_rewards[j] for j in sorted(members)) / len(members)
    return shared
