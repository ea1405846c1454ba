"""Experiment grid runner, Table-2 style summaries, evaluation and trace audits."""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import logging
import math
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from . import __version__
from . import noisy_net as nn
from .highway_env import EnvConfig, HighwayEnv, IDMParams
from .marl_trainer import Algo, TrainerConfig, greedy, run_training
from .reward import RewardWeights

log = logging.getLogger(__name__)

BINS = ((1, 40), (41, 80), (81, 120), (121, 160), (161, 200))
RETURN_DEFINITION = (
    "episode return = mean over the 4 AVs of the summed shared (neighborhood-averaged) "
    "reward, unscaled; bin value = mean over episodes in the bin and over seeds"
)
COLLISION_BOUND = -180.0


@dataclass
class ExperimentConfig:
    densities: list = field(default_factory=lambda: [1, 2, 3])
    seeds: list = field(default_factory=lambda: [0, 1])
    algos: list = field(default_factory=lambda: [Algo.NOISY_MADQN.value, Algo.MADQN.value])
    episodes: int = 200
    out: str = "runs"
    workers: int = 1
    trace_every: int = 1
    env: dict = field(default_factory=dict)
    trainer: dict = field(default_factory=dict)
    reward: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.densities or not self.seeds or not self.algos:
            raise ValueError("densities, seeds and algos must all be non-empty")
        bad = [d for d in self.densities if d not in (1, 2, 3)]
        if bad:
            raise ValueError(f"densities must be drawn from 1, 2, 3; got {bad}")
        self.algos = [Algo(a).value for a in self.algos]
        if self.episodes <= 0 or self.workers <= 0 or self.trace_every < 0:
            raise ValueError("episodes and workers must be positive, trace_every non-negative")
        _check_keys(self.env, EnvConfig, "env", exclude={"density_level", "seed", "weights"})
        _check_keys(self.trainer, TrainerConfig, "trainer", exclude={"algo", "episodes"})
        _check_keys(self.reward, RewardWeights, "reward")

    @classmethod
    def from_dict(cls, doc: dict) -> "ExperimentConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(doc) - known)
        if unknown:
            raise ValueError(f"unknown config keys: {', '.join(unknown)}")
        return cls(**doc)

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def env_config(self, density: int) -> EnvConfig:
        env = dict(self.env)
        if "idm" in env:
            env["idm"] = IDMParams(**env["idm"])
        for key in ("platoon_gap", "av_speed", "hdv_speed", "hdv_ahead"):
            if key in env:
                env[key] = tuple(env[key])
        return EnvConfig(density_level=density, weights=RewardWeights(**self.reward), **env)

    def trainer_config(self, algo: str) -> TrainerConfig:
        return TrainerConfig(algo=algo, episodes=self.episodes, **self.trainer)

    def runs(self) -> list[tuple[int, int, str]]:
        return [(d, s, a) for d in self.densities for s in self.seeds for a in self.algos]


def _check_keys(overrides: dict, cls, label: str, exclude: Iterable[str] = ()) -> None:
    allowed = {f.name for f in dataclasses.fields(cls)} - set(exclude)
    unknown = sorted(set(overrides) - allowed)
    if unknown:
        raise ValueError(f"unknown {label} override keys: {', '.join(unknown)}")


def run_name(density: int, seed: int, algo: str) -> str:
    return f"density{density}_seed{seed}_{Algo(algo).value}"


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def code_version() -> str:
    """Package version plus a digest of the package sources."""
    h = hashlib.sha256()
    for src in sorted(Path(__file__).parent.glob("*.py")):
        h.update(src.name.encode())
        h.update(src.read_bytes())
    return f"{__version__}+{h.hexdigest()[:12]}"


def run_single(config: ExperimentConfig, density: int, seed: int, algo: str) -> dict:
    """Train one (density, seed, algo) cell and write its artifacts."""
    run_dir = Path(config.out) / run_name(density, seed, algo)
    run_dir.mkdir(parents=True, exist_ok=True)
    env_cfg = config.env_config(density)
    trainer_cfg = config.trainer_config(algo)

    trace_path = run_dir / "trace.jsonl"
    files = []
    with open(trace_path, "w") as trace_fh:
        def sink(rec: dict) -> None:
            ep = rec["episode"]
            if config.trace_every and (ep % config.trace_every == 0 or ep == config.episodes or ep == 1):
                trace_fh.write(json.dumps(rec, separators=(",", ":")) + "\n")

        result = run_training(env_cfg, trainer_cfg, seed, trace=sink if config.trace_every else None)

    csv_path = run_dir / "run.csv"
    csv_path.write_text(result.record.to_csv())
    files += [csv_path, trace_path]
    meta = {"density": density, "seed": seed, "algo": Algo(algo).value, "episodes": config.episodes}
    if len(result.networks) == 1:
        ckpt = run_dir / "checkpoint.json"
        nn.save_checkpoint(ckpt, result.networks[0], meta)
        files.append(ckpt)
    else:
        for i, net in enumerate(result.networks, start=1):
            ckpt = run_dir / f"checkpoint_agent{i}.json"
            nn.save_checkpoint(ckpt, net, {**meta, "agent": i})
            files.append(ckpt)
    cfg_path = run_dir / "config.json"
    cfg_path.write_text(
        json.dumps(
            {"env": _jsonable(dataclasses.asdict(env_cfg)), "trainer": _jsonable(dataclasses.asdict(trainer_cfg)), "seed": seed},
            indent=2,
            sort_keys=True,
        )
    )
    files.append(cfg_path)
    return {**meta, "status": "ok", "files": [str(p) for p in files]}


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, Algo):
        return obj.value
    return obj


def _run_guarded(args) -> dict:
    config, density, seed, algo = args
    try:
        return run_single(config, density, seed, algo)
    except Exception as exc:  # recorded in the manifest, the grid carries on
        log.error("run %s failed: %s", run_name(density, seed, algo), exc)
        return {
            "density": density, "seed": seed, "algo": Algo(algo).value, "episodes": config.episodes,
            "status": "failed", "error": f"{type(exc).__name__}: {exc}", "traceback": traceback.format_exc(),
            "files": [],
        }


def run_experiment(config: ExperimentConfig) -> dict:
    """Run every grid cell and write ``manifest.json``; returns the manifest."""
    out = Path(config.out)
    out.mkdir(parents=True, exist_ok=True)
    jobs = [(config, d, s, a) for d, s, a in config.runs()]
    if config.workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=config.workers) as pool:
            results = list(pool.map(_run_guarded, jobs))
    else:
        results = [_run_guarded(job) for job in jobs]

    for res in results:
        res["files"] = [{"path": str(Path(p).relative_to(out)), "sha256": sha256_file(p)} for p in res["files"]]
    manifest = {
        "code_version": code_version(),
        "config": config.to_dict(),
        "runs": results,
        "failed": sum(r["status"] != "ok" for r in results),
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return manifest


# -- summaries --------------------------------------------------------------


@dataclass
class BinnedSummary:
    """Bin means keyed by ``(density, algo)``."""

    bins: dict
    edges: tuple = BINS

    def best_flags(self) -> dict:
        """For each (density, algo), whether it holds the highest value per bin among its density."""
        flags = {}
        for (density, algo), values in self.bins.items():
            rivals = [v for (d, _), v in self.bins.items() if d == density]
            flags[(density, algo)] = [len(rivals) > 1 and values[k] == max(r[k] for r in rivals) for k in range(len(values))]
        return flags

    def to_csv(self) -> str:
        lines = []
        header = ["density", "algo"] + [f"ep_{a}_{b}" for a, b in self.edges] + [f"best_{a}_{b}" for a, b in self.edges]
        lines.append(",".join(header))
        flags = self.best_flags()
        for key in sorted(self.bins):
            values = self.bins[key]
            lines.append(",".join([str(key[0]), key[1], *map(repr, values), *(str(int(f)) for f in flags[key])]))
        return "\n".join(lines) + "\n"

    def to_text(self) -> str:
        flags = self.best_flags()
        cols = [f"{a}~{b}" for a, b in self.edges]
        rows = []
        for key in sorted(self.bins):
            cells = [f"{v:.2f}{'*' if f else ''}" for v, f in zip(self.bins[key], flags[key])]
            rows.append([f"density {key[0]}", key[1], *cells])
        header = ["Density", "Method", *cols]
        widths = [max(len(r[i]) for r in rows + [header]) for i in range(len(header))]
        fmt = lambda r: "  ".join(c.rjust(w) if i >= 2 else c.ljust(w) for i, (c, w) in enumerate(zip(r, widths)))
        out = [f"# {RETURN_DEFINITION}", "# * marks the higher value per bin within a density", fmt(header)]
        out += [fmt(r) for r in rows]
        return "\n".join(out) + "\n"


def read_run_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def summarize(csv_paths: Sequence, edges=BINS) -> BinnedSummary:
    """Bin the per-episode mean returns of each (density, algo) across seeds."""
    per_seed: dict = {}
    for path in csv_paths:
        for row in read_run_csv(path):
            key = (int(row["density"]), row["algo"])
            per_seed.setdefault(key, {}).setdefault(int(row["seed"]), {})[int(row["episode"])] = float(row["mean_return"])
    if not per_seed:
        raise ValueError("no run rows to summarize")
    last = edges[-1][1]
    bins = {}
    for key, seeds in per_seed.items():
        for seed, eps in seeds.items():
            missing = [e for e in range(1, last + 1) if e not in eps]
            if missing:
                raise ValueError(f"run {key} seed {seed} does not cover episodes 1..{last} (missing {missing[:5]}...)")
        curve = np.mean([[eps[e] for e in range(1, last + 1)] for eps in seeds.values()], axis=0)
        bins[key] = [float(np.mean(curve[a - 1 : b])) for a, b in edges]
    return BinnedSummary(bins=bins, edges=tuple(edges))


def write_summary(summary: BinnedSummary, out_dir) -> tuple[Path, Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    csv_path, txt_path = out_dir / "summary.csv", out_dir / "summary.txt"
    csv_path.write_text(summary.to_csv())
    txt_path.write_text(summary.to_text())
    return csv_path, txt_path


# -- evaluation -------------------------------------------------------------


@dataclass
class EvaluationMetrics:
    episodes: int
    mean_return: float
    collision_rate: float
    mean_speed: float
    overtakes: int
    returns: list

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def evaluate(
    net: nn.QNetworkParams, env_config: EnvConfig, episodes: int, seed: int
) -> EvaluationMetrics:
    """Roll out the noise-free greedy policy (means only) for ``episodes`` episodes."""
    env = HighwayEnv(env_config)
    rng = np.random.default_rng(seed)
    n = env_config.n_avs
    returns, speeds = [], []
    crashed = overtakes = 0
    for _ in range(episodes):
        obs = env.reset(int(rng.integers(2**31)))
        ep_return = [0.0] * n
        leader = env.avs[0]
        was_ahead = {h.id: h.x > leader.x for h in env.hdvs}
        passed = set()
        while not all(env.done):
            live = [not d for d in env.done]
            actions = [greedy(nn.q_forward(net, None, obs[i])) if live[i] else None for i in range(n)]
            result = env.step(actions)
            for i in range(n):
                if live[i]:
                    ep_return[i] += result.shared_rewards[i]
                    speeds.append(env.avs[i].v)
            for h in env.hdvs:
                if h.x > leader.x:
                    was_ahead[h.id] = True
                elif h.x < leader.x and was_ahead[h.id]:
                    passed.add(h.id)
            obs = result.observations
        overtakes += len(passed)
        crashed += sum(av.crashed for av in env.avs)
        returns.append(math.fsum(ep_return) / n)
    return EvaluationMetrics(
        episodes=episodes,
        mean_return=float(np.mean(returns)) if returns else float("nan"),
        collision_rate=crashed / (episodes * n) if episodes else 0.0,
        mean_speed=float(np.mean(speeds)) if speeds else float("nan"),
        overtakes=overtakes,
        returns=returns,
    )


def evaluate_checkpoint(
    path, env_config: EnvConfig, episodes: int, seed: int, expected: Optional[nn.QNetworkParams] = None
) -> EvaluationMetrics:
    return evaluate(nn.load_checkpoint(path, expected), env_config, episodes, seed)


# -- trace audit ------------------------------------------------------------


class TraceError(ValueError):
    pass


def iter_trace(path):
    """Yield ``(line_number, record)`` from a JSON-lines trace."""
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise TraceError(f"{path}:{lineno}: malformed trace line ({exc.msg})") from exc
            if not isinstance(rec, dict) or "step" not in rec or "vehicles" not in rec:
                raise TraceError(f"{path}:{lineno}: trace record lacks 'step' or 'vehicles'")
            yield lineno, rec


@dataclass
class AuditReport:
    collision_steps: int = 0
    violations: list = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations


def audit_traces(paths: Sequence, bound: float = COLLISION_BOUND) -> AuditReport:
    """Check that every AV collision step carries a vehicle reward below ``bound``."""
    report = AuditReport()
    for path in paths:
        for lineno, rec in iter_trace(path):
            for av in rec.get("avs", []):
                if av.get("collided"):
                    report.collision_steps += 1
                    if not av["raw_reward"] < bound:
                        report.violations.append(
                            {"file": str(path), "line": lineno, "episode": rec.get("episode"), "step": rec["step"],
                             "av": av["id"], "raw_reward": av["raw_reward"]}
                        )
    return report
