"""NoisyNet multi-agent DQN training loop and the epsilon-greedy MADQN baseline.

All AVs act through one shared online network (unless ``shared_network`` is
turned off) and each agent keeps its own replay buffer. In the noisy variant
every action is greedy under a freshly sampled noise draw; the baseline uses
a noise-free network with annealed epsilon-greedy exploration.
"""

from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Optional, Sequence

import numpy as np

from . import noisy_net as nn
from .highway_env import N_ACTIONS, N_OBS_FEATURES, N_OBS_ROWS, EnvConfig, HighwayEnv

log = logging.getLogger(__name__)


class Algo(str, Enum):
    NOISY_MADQN = "noisy-madqn"
    MADQN = "madqn"


@dataclass
class Transition:
    s: np.ndarray
    a: int
    r: float
    s_next: np.ndarray
    done: bool


@dataclass
class Batch:
    s: np.ndarray
    a: np.ndarray
    r: np.ndarray
    s_next: np.ndarray
    done: np.ndarray

    def __len__(self):
        return len(self.a)

    @classmethod
    def concat(cls, batches: Sequence["Batch"]) -> "Batch":
        return cls(*(np.concatenate([getattr(b, f) for b in batches]) for f in ("s", "a", "r", "s_next", "done")))

    @classmethod
    def from_transitions(cls, transitions: Sequence[Transition]) -> "Batch":
        return cls(
            np.stack([t.s for t in transitions]),
            np.array([t.a for t in transitions], dtype=np.int64),
            np.array([t.r for t in transitions], dtype=float),
            np.stack([t.s_next for t in transitions]),
            np.array([t.done for t in transitions], dtype=bool),
        )


class ReplayBuffer:
    """Fixed-capacity FIFO of transitions with uniform sampling."""

    def __init__(self, capacity: int, obs_shape: tuple = (N_OBS_ROWS, N_OBS_FEATURES)):
        if capacity <= 0:
            raise ValueError("capacity must be positive")
        self.capacity = capacity
        self.s = np.zeros((capacity,) + obs_shape)
        self.s_next = np.zeros((capacity,) + obs_shape)
        self.a = np.zeros(capacity, dtype=np.int64)
        self.r = np.zeros(capacity)
        self.done = np.zeros(capacity, dtype=bool)
        self.cursor = 0
        self.size = 0

    def __len__(self):
        return self.size

    def push(self, t: Transition) -> None:
        if not 0 <= t.a < N_ACTIONS:
            raise ValueError(f"action {t.a} out of range")
        if not math.isfinite(t.r):
            raise ValueError("reward must be finite")
        i = self.cursor
        self.s[i], self.a[i], self.r[i], self.s_next[i], self.done[i] = t.s, t.a, t.r, t.s_next, t.done
        self.cursor = (i + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def _ordered(self) -> np.ndarray:
        """Storage slots from oldest to newest."""
        if self.size < self.capacity:
            return np.arange(self.size)
        return (np.arange(self.capacity) + self.cursor) % self.capacity

    def __getitem__(self, k: int) -> Transition:
        i = self._ordered()[k]
        return Transition(self.s[i].copy(), int(self.a[i]), float(self.r[i]), self.s_next[i].copy(), bool(self.done[i]))

    def sample(self, batch_size: int, rng: np.random.Generator) -> Batch:
        if self.size == 0:
            raise ValueError("cannot sample from an empty buffer")
        idx = rng.integers(0, self.size, size=batch_size)
        return Batch(self.s[idx], self.a[idx], self.r[idx], self.s_next[idx], self.done[idx])


@dataclass
class TrainerConfig:
    algo: Algo = Algo.NOISY_MADQN
    gamma: float = 0.99
    lr: float = 5e-4
    batch_size: int = 32
    target_sync_every: int = 200
    episodes: int = 200
    steps_per_episode: int = 100
    buffer_capacity: int = 10_000
    warmup: int = 500
    reward_scale: float = 200.0
    sigma0: float = 0.5
    noisy_layers: tuple = nn.DEFAULT_NOISY
    shared_network: bool = True
    adam_betas: tuple = (0.9, 0.999)
    adam_eps: float = 1e-8
    epsilon_start: float = 1.0
    epsilon_end: float = 0.05
    epsilon_decay_episodes: int = 150

    def __post_init__(self):
        self.algo = Algo(self.algo)
        self.noisy_layers = tuple(self.noisy_layers)
        self.adam_betas = tuple(self.adam_betas)
        # gamma = 0 is allowed for the one-step regression checks
        if not 0 <= self.gamma <= 1:
            raise ValueError("gamma must lie in [0, 1]")
        for name in ("batch_size", "target_sync_every", "episodes", "steps_per_episode", "buffer_capacity"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.lr <= 0 or self.reward_scale <= 0:
            raise ValueError("lr and reward_scale must be positive")

    def epsilon(self, episode: int) -> float:
        """Baseline exploration rate for a 0-based episode index."""
        frac = min(1.0, episode / self.epsilon_decay_episodes) if self.epsilon_decay_episodes > 0 else 1.0
        return self.epsilon_start + (self.epsilon_end - self.epsilon_start) * frac

    def build_network(self, rng: np.random.Generator) -> nn.QNetworkParams:
        noisy = self.noisy_layers if self.algo is Algo.NOISY_MADQN else ()
        return nn.init_network(rng, sigma0=self.sigma0, noisy=noisy)


class Adam:
    def __init__(self, params: nn.QNetworkParams, lr: float, betas=(0.9, 0.999), eps: float = 1e-8):
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in params.named_arrays()}
        self.v = {k: np.zeros_like(v) for k, v in params.named_arrays()}

    def step(self, params: nn.QNetworkParams, grads: nn.QGradients) -> None:
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        g = dict(grads.named_arrays())
        for key, p in params.named_arrays():
            m, v = self.m[key], self.v[key]
            m *= self.b1
            m += (1.0 - self.b1) * g[key]
            v *= self.b2
            v += (1.0 - self.b2) * g[key] ** 2
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def greedy(q: np.ndarray) -> int:
    # np.argmax returns the first maximum, i.e. the lowest tied index
    return int(np.argmax(q))


def select_action(net: nn.QNetworkParams, obs: np.ndarray, rng: np.random.Generator) -> int:
    """Greedy action under a freshly sampled noise draw; no epsilon branch."""
    noise = nn.sample_network_noise(net, rng)
    return greedy(nn.q_forward(net, noise, obs))


def select_action_baseline(net: nn.QNetworkParams, obs: np.ndarray, epsilon: float, rng: np.random.Generator) -> int:
    if not 0.0 <= epsilon <= 1.0:
        raise ValueError("epsilon must lie in [0, 1]")
    if rng.random() < epsilon:
        return int(rng.integers(N_ACTIONS))
    return greedy(nn.q_forward(net, None, obs))


def td_targets(
    target_net: nn.QNetworkParams, batch: Batch, gamma: float, target_noise: Optional[nn.NetworkNoise] = None
) -> np.ndarray:
    """``r`` at terminal transitions, ``r + gamma * max_a Q_target(s', a)`` otherwise."""
    if gamma == 0:
        return batch.r.astype(float).copy()
    q_next = nn.q_forward(target_net, target_noise, batch.s_next).max(axis=-1)
    return np.where(batch.done, batch.r, batch.r + gamma * q_next)


def td_loss_and_grads(
    online: nn.QNetworkParams,
    target: nn.QNetworkParams,
    batch: Batch,
    gamma: float,
    online_noise: Optional[nn.NetworkNoise],
    target_noise: Optional[nn.NetworkNoise],
) -> tuple[float, nn.QGradients]:
    y = td_targets(target, batch, gamma, target_noise)
    q, cache = nn.forward(online, online_noise, batch.s)
    rows = np.arange(len(batch))
    err = q[rows, batch.a] - y
    dq = np.zeros_like(q)
    dq[rows, batch.a] = 2.0 * err / len(batch)
    return float(np.mean(err**2)), nn.backward(online, online_noise, cache, dq)


@dataclass
class Learner:
    """Online network, target network and optimizer state."""

    online: nn.QNetworkParams
    target: nn.QNetworkParams
    optimizer: Adam
    updates: int = 0

    @classmethod
    def create(cls, net: nn.QNetworkParams, cfg: TrainerConfig) -> "Learner":
        return cls(net, net.copy(), Adam(net, cfg.lr, cfg.adam_betas, cfg.adam_eps))


def train_step(
    learner: Learner,
    buffers: Sequence[ReplayBuffer],
    config: TrainerConfig,
    rng: np.random.Generator,
    min_size: Optional[int] = None,
) -> Optional[float]:
    """One gradient step on ``batch_size`` transitions from each buffer.

    Returns the loss measured before the update, or None when some buffer
    holds fewer than ``max(batch_size, min_size)`` transitions.
    """
    need = max(config.batch_size, min_size or 0)
    if any(len(b) < need for b in buffers):
        return None
    batch = Batch.concat([b.sample(config.batch_size, rng) for b in buffers])
    noisy = config.algo is Algo.NOISY_MADQN
    online_noise = nn.sample_network_noise(learner.online, rng) if noisy else None
    target_noise = nn.sample_network_noise(learner.target, rng) if noisy else None
    loss, grads = td_loss_and_grads(learner.online, learner.target, batch, config.gamma, online_noise, target_noise)
    learner.optimizer.step(learner.online, grads)
    learner.updates += 1
    return loss


def sync_target(online: nn.QNetworkParams, target: nn.QNetworkParams, step_count: int, config: TrainerConfig) -> bool:
    """Copy online into target when ``step_count`` is a multiple of the sync period."""
    if step_count % config.target_sync_every != 0:
        return False
    target.assign(online)
    return True


CSV_COLUMNS = [
    "episode", "seed", "density", "algo",
    "return_agent_1", "return_agent_2", "return_agent_3", "return_agent_4",
    "mean_return", "loss_mean", "collisions", "avg_speed",
]


@dataclass
class EpisodeStats:
    episode: int
    returns: list
    loss_mean: float
    collisions: int
    avg_speed: float

    @property
    def mean_return(self) -> float:
        return math.fsum(self.returns) / len(self.returns)


@dataclass
class TrainingRecord:
    seed: int
    density: int
    algo: Algo
    episodes: list = field(default_factory=list)

    @property
    def mean_returns(self) -> np.ndarray:
        return np.array([e.mean_return for e in self.episodes])

    def rows(self) -> list[list]:
        return [
            [e.episode, self.seed, self.density, self.algo.value, *e.returns, e.mean_return, e.loss_mean, e.collisions, e.avg_speed]
            for e in self.episodes
        ]

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(CSV_COLUMNS)
        writer.writerows(self.rows())
        return buf.getvalue()


@dataclass
class TrainingResult:
    record: TrainingRecord
    networks: list  # one per agent when untied, otherwise a single shared net


TraceSink = Callable[[dict], None]


def run_training(
    env_config: EnvConfig,
    trainer_config: TrainerConfig,
    seed: int,
    trace: Optional[TraceSink] = None,
    progress: Optional[Callable[[EpisodeStats], None]] = None,
) -> TrainingResult:
    """Run the full training protocol; deterministic given ``seed``.

    ``trace`` receives one JSON-ready dict per decision step.
    """
    cfg = trainer_config
    env_cfg = EnvConfig(**{**env_config.__dict__, "episode_steps": cfg.steps_per_episode})
    env = HighwayEnv(env_cfg)
    n = env_cfg.n_avs
    init_ss, env_ss, act_ss, train_ss = np.random.SeedSequence(seed).spawn(4)
    init_rng = np.random.default_rng(init_ss)
    env_rng = np.random.default_rng(env_ss)
    act_rng = np.random.default_rng(act_ss)
    train_rng = np.random.default_rng(train_ss)

    if cfg.shared_network:
        learners = [Learner.create(cfg.build_network(init_rng), cfg)]
    else:
        learners = [Learner.create(cfg.build_network(init_rng), cfg) for _ in range(n)]
    buffers = [ReplayBuffer(cfg.buffer_capacity) for _ in range(n)]
    noisy = cfg.algo is Algo.NOISY_MADQN
    record = TrainingRecord(seed=seed, density=env_cfg.density_level, algo=cfg.algo)

    def policy_for(i: int) -> Learner:
        return learners[0] if cfg.shared_network else learners[i]

    for episode in range(cfg.episodes):
        obs = env.reset(int(env_rng.integers(2**31)))
        returns = [0.0] * n
        losses = []
        speeds = []
        eps = cfg.epsilon(episode)
        while not all(env.done):
            live = [not d for d in env.done]
            actions: list = [None] * n
            for i in range(n):
                if not live[i]:
                    continue
                net = policy_for(i).online
                if noisy:
                    actions[i] = select_action(net, obs[i], act_rng)
                else:
                    actions[i] = select_action_baseline(net, obs[i], eps, act_rng)
            result = env.step(actions)
            for i in range(n):
                if not live[i]:
                    continue
                crashed = env.avs[i].crashed
                buffers[i].push(
                    Transition(obs[i], actions[i], result.shared_rewards[i] / cfg.reward_scale, result.observations[i], crashed)
                )
                returns[i] += result.shared_rewards[i]
                speeds.append(env.avs[i].v)
            if trace is not None:
                rec = env.trace_record(result, actions, episode + 1)
                trace(rec)
            obs = result.observations

            if cfg.shared_network:
                loss = train_step(learners[0], buffers, cfg, train_rng, cfg.warmup)
                if loss is not None:
                    losses.append(loss)
                    sync_target(learners[0].online, learners[0].target, learners[0].updates, cfg)
            else:
                for i, learner in enumerate(learners):
                    loss = train_step(learner, [buffers[i]], cfg, train_rng, cfg.warmup)
                    if loss is not None:
                        losses.append(loss)
                        sync_target(learner.online, learner.target, learner.updates, cfg)

        stats = EpisodeStats(
            episode=episode + 1,
            returns=returns,
            loss_mean=float(np.mean(losses)) if losses else float("nan"),
            collisions=sum(av.crashed for av in env.avs),
            avg_speed=float(np.mean(speeds)) if speeds else float("nan"),
        )
        record.episodes.append(stats)
        if progress is not None:
            progress(stats)
        log.debug("episode %d mean return %.2f", stats.episode, stats.mean_return)

    return TrainingResult(record=record, networks=[lr.online for lr in learners])
