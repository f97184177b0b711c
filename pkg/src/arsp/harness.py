"""Experiment orchestration: configs, self-play training with periodic greedy
evaluation, cooperation statistics, the adaptation study and plot data."""

from __future__ import annotations

import csv
import glob
import hashlib
import json
import logging
import math
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy import stats

from .agent import AgentConfig, ARSPAgent
from .envs import COOPERATE, EnvConfig, make_env
from .network import load_params, save_params
from .opponents import AdaptationConfig, ScriptedOpponent, evaluate_vs_opponent

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
GRID_GAMES = ("MonsterHunt", "Escalation")


@dataclass
class ExperimentConfig:
    env: EnvConfig = field(default_factory=EnvConfig)
    agents: list[AgentConfig] = field(default_factory=lambda: [AgentConfig(), AgentConfig()])
    total_episodes: int = 5000
    eval_period: int = 50
    eval_episodes: int = 30
    seeds: list[int] = field(default_factory=lambda: [0, 1, 2, 3, 4])
    checkpoint_period: int = 0
    output_dir: str = "runs"
    name: str = ""

    def __post_init__(self):
        if len(self.agents) != 2:
            raise ValueError("self-play needs exactly two agent configs")
        if self.total_episodes < 0 or self.eval_period <= 0 or self.eval_episodes <= 0:
            raise ValueError("episode counts must be non-negative and periods positive")

    @property
    def run_name(self) -> str:
        return self.name or f"{self.env.game}-{self.agents[0].variant}"

    def to_dict(self) -> dict:
        d = asdict(self)
        d["schema_version"] = SCHEMA_VERSION
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = dict(d)
        version = d.pop("schema_version", SCHEMA_VERSION)
        if version != SCHEMA_VERSION:
            raise ValueError(f"unsupported config schema version {version}")
        env = EnvConfig(**d.pop("env", {}))
        agents = [AgentConfig(**a) for a in d.pop("agents", [{}, {}])]
        return cls(env=env, agents=agents, **d)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def config_hash(self) -> str:
        """Digest of everything that affects results (not seeds or output paths)."""
        d = self.to_dict()
        for k in ("seeds", "output_dir", "name"):
            d.pop(k)
        d["env"].pop("seed")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]


def default_config(game: str = "ISH", variant: str = "arsp", **agent_overrides) -> ExperimentConfig:
    """Protocol defaults: 5k episodes for matrix games, 20k for grid worlds.

    Grid worlds take one learner step every 4 environment steps.
    """
    env = EnvConfig(game)
    if game in GRID_GAMES:
        agent_overrides.setdefault("learn_every", 4)
    agents = [AgentConfig(variant=variant, **agent_overrides) for _ in range(2)]
    episodes = 20_000 if game in GRID_GAMES else 5000
    return ExperimentConfig(env=env, agents=agents, total_episodes=episodes)


@dataclass
class MetricsRow:
    seed: int
    episode: int
    env_steps: int
    return_0: float
    return_1: float
    global_return: float
    cooperation: float
    quantile_loss: float
    aux_loss: float
    c_t1: float
    c_t2: float


METRIC_FIELDS = list(MetricsRow.__dataclass_fields__)


@dataclass
class StepRecord:
    observations: list
    actions: tuple[int, int]
    rewards: tuple[float, float]
    mutual: bool


def measure_cooperation(trajectories, env_kind: str) -> float:
    """Matrix games: fraction of (C, C) steps.  Grid worlds: mutual events per episode.

    ``trajectories`` is a list of episodes, each a list of :class:`StepRecord`.
    """
    if not trajectories:
        return float("nan")
    if env_kind in GRID_GAMES:
        return float(np.mean([sum(bool(s.mutual) for s in ep) for ep in trajectories]))
    steps = [s for ep in trajectories for s in ep]
    cc = sum(1 for s in steps if s.actions[0] == COOPERATE and s.actions[1] == COOPERATE)
    return cc / len(steps)


def play_greedy(params_pair, env_config: EnvConfig, episodes: int):
    """Roll out both frozen greedy policies; returns trajectories."""
    from .agent import select_action_greedy

    env = make_env(env_config)
    out = []
    for _ in range(episodes):
        obs = env.reset()
        ep = []
        done = False
        while not done:
            acts = (select_action_greedy(params_pair[0], obs[0]),
                    select_action_greedy(params_pair[1], obs[1]))
            res = env.step(acts)
            ep.append(StepRecord(obs, acts, (float(res.rewards[0]), float(res.rewards[1])),
                                 bool(res.info.get("mutual", False))))
            obs = res.observations
            done = res.done
        out.append(ep)
    return out


def dump_trajectories(path, trajectories) -> None:
    """CSV with one row per (episode, step, agent): observation, action, reward."""
    if not trajectories:
        raise ValueError("no trajectories to write")
    dim = len(trajectories[0][0].observations[0])
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["episode", "step", "agent"] + [f"obs_{k}" for k in range(dim)] + ["action", "reward"])
        for e, ep in enumerate(trajectories):
            for t, s in enumerate(ep):
                for i in range(2):
                    w.writerow([e, t, i] + [repr(float(x)) for x in s.observations[i]]
                               + [s.actions[i], repr(s.rewards[i])])


def _seed_for(seed: int, *path: int) -> int:
    return int(np.random.SeedSequence([seed, *path]).generate_state(1)[0])


def _evaluate(agents, config: ExperimentConfig, seed: int, episode: int):
    env_cfg = EnvConfig(config.env.game, config.env.horizon, _seed_for(seed, 1, episode),
                        config.env.payoff)
    trajs = play_greedy([a.params for a in agents], env_cfg, config.eval_episodes)
    returns = np.array([[sum(s.rewards[i] for s in ep) for i in range(2)] for ep in trajs])
    mean = returns.mean(axis=0)
    return mean, measure_cooperation(trajs, config.env.game)


@dataclass
class RunResult:
    run_dir: Path
    rows: list[MetricsRow]
    error: str | None = None


def run_dir_for(config: ExperimentConfig, seed: int) -> Path:
    return Path(config.output_dir) / config.run_name / f"seed{seed}"


def _fmt(x) -> str:
    return repr(float(x)) if isinstance(x, (float, np.floating)) else str(x)


def run_training(config: ExperimentConfig, seed: int, run_dir=None) -> RunResult:
    """Train two independent learners in self-play for one seed.

    Every ``eval_period`` episodes (and before training) both greedy policies
    are frozen and played for ``eval_episodes`` on a separately seeded
    environment.  Writes ``config.json``, ``metrics.csv`` and the final
    ``agent{0,1}.npz`` checkpoints into ``run_dir``.
    """
    run_dir = Path(run_dir) if run_dir is not None else run_dir_for(config, seed)
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "config.json").write_text(config.to_json())
    chash = config.config_hash()

    env_cfg = EnvConfig(config.env.game, config.env.horizon, _seed_for(seed, 0), config.env.payoff)
    env = make_env(env_cfg)
    n_opp_actions = env.n_actions
    agents = [ARSPAgent(cfg, env.obs_dim, env.n_actions, (n_opp_actions,), _seed_for(seed, 2, i))
              for i, cfg in enumerate(config.agents)]

    rows: list[MetricsRow] = []
    losses: list[tuple[float, float]] = []
    steps = 0
    error = None

    def record(episode):
        mean, coop = _evaluate(agents, config, seed, episode)
        ql = float(np.mean([l[0] for l in losses])) if losses else float("nan")
        al = float(np.mean([l[1] for l in losses])) if losses else float("nan")
        c1, c2 = agents[0].coefficients()
        rows.append(MetricsRow(seed, episode, steps, float(mean[0]), float(mean[1]),
                               float(mean.sum()), float(coop), ql, al, c1, c2))
        losses.clear()

    metrics_path = run_dir / "metrics.csv"
    with open(metrics_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(METRIC_FIELDS)

        def flush():
            r = rows[-1]
            writer.writerow([_fmt(getattr(r, k)) for k in METRIC_FIELDS])
            fh.flush()

        record(0)
        flush()
        try:
            for episode in range(1, config.total_episodes + 1):
                obs = env.reset()
                done = False
                while not done:
                    acts = [agents[0].act(obs[0]), agents[1].act(obs[1])]
                    res = env.step(acts)
                    for i, ag in enumerate(agents):
                        out = ag.observe(obs[i], acts[i], res.rewards[i], res.observations[i],
                                         [acts[1 - i]], res.done)
                        if out is not None:
                            losses.append(out)
                    obs = res.observations
                    done = res.done
                    steps += 1
                if episode % config.eval_period == 0:
                    record(episode)
                    flush()
                if config.checkpoint_period and episode % config.checkpoint_period == 0:
                    ck = run_dir / "checkpoints"
                    ck.mkdir(exist_ok=True)
                    for i, ag in enumerate(agents):
                        save_params(ck / f"ep{episode}_agent{i}.npz", ag.params, chash)
        except FloatingPointError as exc:
            error = str(exc)
            log.error("seed %d aborted: %s", seed, error)
            (run_dir / "diagnostic.json").write_text(json.dumps(
                {"seed": seed, "env_steps": steps, "error": error,
                 "agent_steps": [a.t for a in agents],
                 "learner_steps": [a.opt.step for a in agents]}, indent=2))

    for i, ag in enumerate(agents):
        save_params(run_dir / f"agent{i}.npz", ag.params, chash)
    return RunResult(run_dir, rows, error)


def read_metrics(path) -> list[dict]:
    with open(path, newline="") as fh:
        return [{k: float(v) if k not in ("seed", "episode", "env_steps") else int(v)
                 for k, v in row.items()} for row in csv.DictReader(fh)]


def run_experiment(config: ExperimentConfig, reuse: bool = False) -> list[RunResult]:
    """Run every seed in ``config.seeds``.

    With ``reuse``, a seed whose run directory already holds a completed run of
    the same config hash is read back instead of retrained (runs are
    deterministic, so the files would be identical).
    """
    results = []
    for seed in config.seeds:
        rd = run_dir_for(config, seed)
        if reuse and _is_complete(rd, config):
            rows = [MetricsRow(**r) for r in read_metrics(rd / "metrics.csv")]
            results.append(RunResult(rd, rows))
            continue
        log.info("training %s seed %d", config.run_name, seed)
        results.append(run_training(config, seed, rd))
    return results


def _is_complete(run_dir: Path, config: ExperimentConfig) -> bool:
    try:
        saved = ExperimentConfig.load(run_dir / "config.json")
        _, chash = load_params(run_dir / "agent1.npz")
        rows = read_metrics(run_dir / "metrics.csv")
    except (OSError, ValueError, KeyError, TypeError):
        return False
    return (saved.config_hash() == config.config_hash() == chash
            and bool(rows) and rows[-1]["episode"] == config.total_episodes)


def confidence_interval(values, level: float = 0.95):
    """Mean and t-distribution half-width across seeds (half-width NaN if n < 2)."""
    x = np.asarray(values, dtype=float)
    mean = float(x.mean())
    if len(x) < 2:
        return mean, float("nan")
    sem = x.std(ddof=1) / math.sqrt(len(x))
    return mean, float(stats.t.ppf(0.5 + level / 2.0, len(x) - 1) * sem)


def emit_plot_data(run_dirs, out_path, metrics=("global_return", "cooperation")) -> list[dict]:
    """Aggregate per-seed metrics into mean and 95% CI per evaluation point."""
    if isinstance(run_dirs, (str, Path)):
        run_dirs = sorted(glob.glob(str(run_dirs)))
    tables = [read_metrics(Path(d) / "metrics.csv") for d in run_dirs]
    if not tables:
        raise ValueError("no runs to aggregate")
    if len(tables) < 2:
        warnings.warn("fewer than 2 seeds: confidence intervals omitted", stacklevel=2)
    n = min(len(t) for t in tables)
    out = []
    for k in range(n):
        pts = [t[k] for t in tables]
        row = {"episode": pts[0]["episode"],
               "env_steps": int(np.mean([p["env_steps"] for p in pts])),
               "n_seeds": len(pts)}
        for m in metrics:
            mean, half = confidence_interval([p[m] for p in pts])
            row[f"{m}_mean"] = mean
            row[f"{m}_ci_low"] = "" if math.isnan(half) else mean - half
            row[f"{m}_ci_high"] = "" if math.isnan(half) else mean + half
        out.append(row)
    with open(out_path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(out[0]))
        w.writeheader()
        for row in out:
            w.writerow({k: _fmt(v) for k, v in row.items()})
    return out


ABLATION_SUITES = {
    "escalation": ("Escalation", ("arsp", "no-tv", "no-rs", "no-aom", "arsp-cvar", "qrdqn")),
    "monsterhunt": ("MonsterHunt", ("arsp", "no-tv", "no-rs", "no-aom", "arsp-cvar", "qrdqn")),
    "ish": ("ISH", ("arsp", "no-aom", "qrdqn")),
    "ipd": ("IPD", ("arsp", "no-aom", "qrdqn")),
}


def ablation_configs(suite: str, **overrides) -> list[ExperimentConfig]:
    if suite not in ABLATION_SUITES:
        raise ValueError(f"unknown suite {suite!r}; choose from {sorted(ABLATION_SUITES)}")
    game, variants = ABLATION_SUITES[suite]
    configs = []
    for v in variants:
        cfg = default_config(game, v)
        for k, val in overrides.items():
            setattr(cfg, k, val)
        configs.append(cfg)
    return configs


ADAPTATION_FIELDS = ["env", "opponent_type", "aom_enabled", "mean_return", "std", "episodes"]


def run_adaptation_study(arsp_runs, no_aom_runs, game: str, out_path=None, episodes: int = 100,
                         defector_runs=None, adapt_config: AdaptationConfig | None = None,
                         seed: int = 12345) -> list[dict]:
    """Compare adapting ARSP checkpoints with ARSP-No-Aom checkpoints.

    Each run directory supplies ``agent0.npz`` (the agent under test) and
    ``agent1.npz`` (its training partner, used as the cooperative opponent).
    The defecting opponent is scripted AlwaysDefect in matrix games and the
    greedy policy of ``defector_runs`` (selfish checkpoints) in grid worlds.
    Returns one row per (opponent type, aom flag), averaged over runs.
    """
    if game in GRID_GAMES and not defector_runs:
        raise ValueError("grid-world adaptation needs selfish defector checkpoints")
    rows = []
    for aom, runs in ((False, no_aom_runs), (True, arsp_runs)):
        for opp_type in ("CC", "CD"):
            means = []
            for k, rd in enumerate(runs):
                rd = Path(rd)
                if not (rd / "agent0.npz").exists():
                    raise FileNotFoundError(f"missing checkpoint in {rd}")
                params, _ = load_params(rd / "agent0.npz")
                if opp_type == "CC":
                    partner, _ = load_params(rd / "agent1.npz")
                    opponent = ScriptedOpponent("FrozenCheckpoint", partner)
                elif game in GRID_GAMES:
                    selfish, _ = load_params(Path(defector_runs[k % len(defector_runs)]) / "agent1.npz")
                    opponent = ScriptedOpponent("FrozenCheckpoint", selfish)
                else:
                    opponent = ScriptedOpponent("AlwaysDefect")
                env_cfg = EnvConfig(game, seed=_seed_for(seed, k))
                res = evaluate_vs_opponent(params, opponent, env_cfg, episodes, adapt=aom,
                                           adapt_config=adapt_config)
                means.append(res.mean_return)
            rows.append({"env": game, "opponent_type": opp_type, "aom_enabled": aom,
                         "mean_return": float(np.mean(means)),
                         "std": float(np.std(means, ddof=1)) if len(means) > 1 else 0.0,
                         "episodes": episodes})
    if out_path is not None:
        with open(out_path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=ADAPTATION_FIELDS)
            w.writeheader()
            for r in rows:
                w.writerow({k: _fmt(v) for k, v in r.items()})
    return rows
