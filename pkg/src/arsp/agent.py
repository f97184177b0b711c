"""Independent ARSP learner: replay, annealed risk-seeking action selection,
distributional TD targets and the joint quantile + opponent-modelling update."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from .distributional import (
    CVaR,
    WangTransform,
    distortion_weights,
    left_truncated_variance,
    quantile_huber_loss,
)
from .network import (
    OptimizerState,
    backprop_joint,
    forward_joint,
    forward_quantiles,
    init_params,
    optimizer_step,
)

VARIANTS = ("arsp", "arsp-cvar", "no-tv", "no-rs", "no-aom", "qrdqn")


@dataclass
class AgentConfig:
    variant: str = "arsp"
    n_quantiles: int = 32
    gamma: float = 0.99
    lam: float = -0.75
    c1: float = 1.0
    c2: float = 200.0
    kappa: float = 1.0
    cvar_alpha: float = 0.25
    replay_capacity: int = 50_000
    batch_size: int = 32
    learn_every: int = 1
    warmup: int = 500
    random_warmup: bool = True
    target_sync: int = 200
    use_target_network: bool = True
    aux_weight: float = 1.0
    lr: float = 5e-4
    hidden: int = 64
    epsilon_start: float = 1.0
    epsilon_end: float = 0.05
    epsilon_decay_steps: int = 10_000

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; choose from {VARIANTS}")
        if not 0.0 < self.gamma <= 1.0:
            raise ValueError("gamma must lie in (0, 1]")
        if self.c1 < 0 or self.c2 < 0:
            raise ValueError("bonus scales c1, c2 must be non-negative")
        if self.variant == "no-rs":
            self.c1 = 0.0
        elif self.variant == "no-tv":
            self.c2 = 0.0
        elif self.variant == "no-aom":
            self.aux_weight = 0.0
        elif self.variant == "qrdqn":
            self.c1 = self.c2 = 0.0
            self.aux_weight = 0.0

    @property
    def measure(self):
        if self.variant == "arsp-cvar":
            return CVaR(self.cvar_alpha, "seeking")
        return WangTransform(self.lam)

    def to_dict(self) -> dict:
        return asdict(self)


def anneal_coefficient(c: float, t: int) -> float:
    """c * sqrt(ln t / t); zero at t = 1 and decaying for t >= 3."""
    if t < 1:
        raise ValueError("anneal step t starts at 1")
    return c * math.sqrt(math.log(t) / t)


def epsilon_at(config: AgentConfig, t: int) -> float:
    frac = min(1.0, max(0, t - 1) / max(1, config.epsilon_decay_steps))
    return config.epsilon_start + frac * (config.epsilon_end - config.epsilon_start)


def action_scores(quantiles, c_t1: float, c_t2: float, weights) -> np.ndarray:
    """Q + c_t1 * Psi + c_t2 * sqrt(sigma_+^2) for each row of ``quantiles``."""
    M = quantiles.shape[-1]
    q = quantiles.mean(axis=-1)
    score = q
    if c_t1:
        score = score + c_t1 * (quantiles @ weights) / M
    if c_t2:
        score = score + c_t2 * np.sqrt(left_truncated_variance(quantiles))
    return score


def select_action_train(params, observation, t: int, config: AgentConfig,
                        weights=None, rng=None) -> int:
    """Training-time action at anneal step ``t``; lowest index wins ties."""
    if config.variant == "qrdqn":
        if rng is None:
            raise ValueError("epsilon-greedy selection needs a random generator")
        if rng.random() < epsilon_at(config, t):
            return int(rng.integers(params.n_actions))
        return select_action_greedy(params, observation)
    if weights is None:
        weights = distortion_weights(config.measure, config.n_quantiles)
    theta = forward_quantiles(params, observation)
    score = action_scores(theta, anneal_coefficient(config.c1, t),
                          anneal_coefficient(config.c2, t), weights)
    return int(np.argmax(score))


def select_action_greedy(params, observation) -> int:
    return int(np.argmax(forward_quantiles(params, observation).mean(axis=-1)))


def td_targets(target_params, next_obs, rewards, dones, gamma: float) -> np.ndarray:
    """Quantile targets r + gamma * theta_j(o', a*) with a* the greedy mean-Q action.

    Works on a single transition (returns shape (M,)) or a batch ((B, M)).
    Terminal transitions get r for every j.
    """
    single = np.ndim(rewards) == 0
    next_obs = np.atleast_2d(next_obs)
    rewards = np.atleast_1d(np.asarray(rewards, dtype=float))
    dones = np.atleast_1d(np.asarray(dones, dtype=float))
    theta = forward_quantiles(target_params, next_obs)  # (B, A, M)
    best = theta.mean(axis=-1).argmax(axis=-1)
    nxt = theta[np.arange(len(best)), best]
    out = rewards[:, None] + gamma * (1.0 - dones[:, None]) * nxt
    return out[0] if single else out


@dataclass
class Batch:
    obs: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    next_obs: np.ndarray
    opponent_actions: np.ndarray
    dones: np.ndarray


class ReplayBuffer:
    """Fixed-capacity ring buffer of transitions with a seeded sampler."""

    def __init__(self, capacity: int, obs_dim: int, n_opponents: int, seed=None):
        self.capacity = capacity
        self.obs = np.zeros((capacity, obs_dim))
        self.next_obs = np.zeros((capacity, obs_dim))
        self.actions = np.zeros(capacity, dtype=np.int64)
        self.rewards = np.zeros(capacity)
        self.dones = np.zeros(capacity)
        self.opponent_actions = np.zeros((capacity, n_opponents), dtype=np.int64)
        self.size = 0
        self.pos = 0
        self.rng = np.random.default_rng(seed)

    def __len__(self):
        return self.size

    def push(self, obs, action, reward, next_obs, opponent_actions, done):
        i = self.pos
        self.obs[i] = obs
        self.actions[i] = action
        self.rewards[i] = reward
        self.next_obs[i] = next_obs
        self.opponent_actions[i] = opponent_actions
        self.dones[i] = float(done)
        self.pos = (i + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def sample(self, batch_size: int) -> Batch:
        if batch_size > self.size:
            raise ValueError(f"cannot sample {batch_size} from {self.size} stored transitions")
        if self.size >= batch_size * batch_size:
            # rejection sampling: uniform over distinct index sets, cheaper than choice()
            while True:
                idx = self.rng.integers(self.size, size=batch_size)
                if len(np.unique(idx)) == batch_size:
                    break
        else:
            idx = self.rng.choice(self.size, size=batch_size, replace=False)
        return Batch(self.obs[idx], self.actions[idx], self.rewards[idx], self.next_obs[idx],
                     self.opponent_actions[idx], self.dones[idx])


def learn_step(params, target_params, buffer: ReplayBuffer, state: OptimizerState,
               config: AgentConfig):
    """Sample a batch, take one joint optimizer step and sync the target on schedule.

    Returns ``(params, state, quantile_loss, aux_loss)``; ``params`` and
    ``state`` are updated in place.
    """
    b = buffer.sample(config.batch_size)
    source = target_params if config.use_target_network else params
    targets = td_targets(source, b.next_obs, b.rewards, b.dones, config.gamma)

    use_aux = config.aux_weight != 0.0
    cache = forward_joint(params, b.obs, b.next_obs if use_aux else None)
    rows = np.arange(config.batch_size)
    loss, dpred = quantile_huber_loss(cache.quantiles[rows, b.actions], targets, config.kappa)
    dq = np.zeros_like(cache.quantiles)
    dq[rows, b.actions] = dpred
    bundle = backprop_joint(params, cache, dq, b.opponent_actions if use_aux else None,
                            config.aux_weight, loss)
    if not (math.isfinite(bundle.quantile_loss) and math.isfinite(bundle.aux_loss)):
        raise FloatingPointError(
            f"non-finite loss at learner step {state.step + 1}: "
            f"quantile={bundle.quantile_loss}, aux={bundle.aux_loss}")
    # without the auxiliary term the predictor gradient and its Adam moments stay
    # exactly zero, so the predictor head is left bit-identical
    optimizer_step(params, bundle.grads, state)
    if config.use_target_network and state.step % config.target_sync == 0:
        target_params.assign(params)
    return params, state, bundle.quantile_loss, bundle.aux_loss


class ARSPAgent:
    """One decentralised learner: own network, target copy, optimizer and replay."""

    def __init__(self, config: AgentConfig, obs_dim: int, n_actions: int,
                 opponent_actions=(2,), seed: int = 0):
        self.config = config
        seeds = np.random.SeedSequence(seed).spawn(3)
        net_seed = int(seeds[0].generate_state(1)[0])
        self.params = init_params(obs_dim, n_actions, len(opponent_actions), opponent_actions,
                                  config.n_quantiles, net_seed, hidden=config.hidden)
        self.target = self.params.copy()
        self.opt = OptimizerState(lr=config.lr)
        self.buffer = ReplayBuffer(config.replay_capacity, obs_dim, len(opponent_actions), seeds[1])
        self.rng = np.random.default_rng(seeds[2])
        self.weights = distortion_weights(config.measure, config.n_quantiles)
        self.t = 0
        self.last_losses: tuple[float, float] | None = None

    def act(self, observation) -> int:
        self.t += 1
        if self.config.random_warmup and self.t <= self.config.warmup:
            # the bonus rule is deterministic, so an untrained net would never try the other actions
            return int(self.rng.integers(self.params.n_actions))
        return select_action_train(self.params, observation, self.t, self.config,
                                   self.weights, self.rng)

    def greedy(self, observation) -> int:
        return select_action_greedy(self.params, observation)

    def coefficients(self) -> tuple[float, float]:
        t = max(self.t, 1)
        return anneal_coefficient(self.config.c1, t), anneal_coefficient(self.config.c2, t)

    def observe(self, obs, action, reward, next_obs, opponent_actions, done):
        """Store a transition and learn if the schedule says so.

        Returns ``(quantile_loss, aux_loss)`` when a learner step ran, else None.
        """
        cfg = self.config
        self.buffer.push(obs, action, reward, next_obs, opponent_actions, done)
        if len(self.buffer) < max(cfg.warmup, cfg.batch_size) or self.t % cfg.learn_every:
            return None
        _, _, ql, al = learn_step(self.params, self.target, self.buffer, self.opt, cfg)
        self.last_losses = (ql, al)
        return ql, al
