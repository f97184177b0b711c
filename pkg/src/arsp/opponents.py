"""Opponent modelling: the auxiliary prediction loss, scripted test opponents
and test-time adaptation of (encoder, predictor) from observed opponent actions."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .agent import select_action_greedy
from .envs import COOPERATE, DEFECT, EnvConfig, make_env
from .network import (
    NetworkParams,
    OptimizerState,
    backprop_joint,
    forward_joint,
    optimizer_step,
)

OPPONENT_KINDS = ("AlwaysCooperate", "AlwaysDefect", "TitForTat", "GrimTrigger", "FrozenCheckpoint")


def aux_loss(params: NetworkParams, obs, next_obs, opponent_actions):
    """Opponent-prediction loss averaged over opponents, with its gradients.

    Returns ``(loss, grads)`` where ``grads`` is a :class:`NetworkParams` whose
    decision-head entries are exactly zero.
    """
    if opponent_actions is None:
        raise ValueError("opponent actions are required")
    obs = np.atleast_2d(obs)
    acts = np.asarray(opponent_actions)
    if acts.ndim < 2:
        acts = acts.reshape(len(obs), -1)
    cache = forward_joint(params, obs, np.atleast_2d(next_obs))
    bundle = backprop_joint(params, cache, None, acts, aux_weight=1.0)
    return bundle.aux_loss, bundle.grads


@dataclass
class ScriptedOpponent:
    """Fixed test-time partner, deterministic given its history.

    ``history`` passed to :meth:`act` is the sequence of the *partner's* past
    actions in the current episode (the partner being the agent under test).
    """

    kind: str
    params: NetworkParams | None = None

    def __post_init__(self):
        if self.kind not in OPPONENT_KINDS:
            raise ValueError(f"unknown opponent {self.kind!r}; choose from {OPPONENT_KINDS}")
        if self.kind == "FrozenCheckpoint" and self.params is None:
            raise ValueError("FrozenCheckpoint needs network parameters")

    def act(self, observation, history) -> int:
        if self.kind == "FrozenCheckpoint":
            return select_action_greedy(self.params, observation)
        return scripted_action(self.kind, history)


def scripted_action(kind: str, history) -> int:
    if kind == "AlwaysCooperate":
        return COOPERATE
    if kind == "AlwaysDefect":
        return DEFECT
    if kind == "TitForTat":
        return COOPERATE if len(history) == 0 else int(history[-1])
    if kind == "GrimTrigger":
        return DEFECT if DEFECT in list(history) else COOPERATE
    raise ValueError(f"{kind!r} is not a scripted strategy")


@dataclass
class AdaptationConfig:
    lr: float = 1e-3
    updates_per_step: int = 1
    groups: tuple[str, ...] = ("encoder", "predictor")

    def __post_init__(self):
        bad = set(self.groups) - {"encoder", "predictor"}
        if bad:
            raise ValueError(f"test-time adaptation may only update encoder/predictor, not {sorted(bad)}")

    def keys(self, params: NetworkParams) -> tuple[str, ...]:
        keys = ()
        if "encoder" in self.groups:
            keys += params.encoder_keys
        if "predictor" in self.groups:
            keys += params.predictor_keys
        return keys


def adapt_step(params: NetworkParams, state: OptimizerState, transitions,
               config: AdaptationConfig):
    """Minimise the opponent-prediction loss on ``transitions`` w.r.t. (encoder, predictor).

    ``transitions`` is an ``(obs, next_obs, opponent_actions)`` triple, single
    or batched.  Updates ``params`` in place and returns ``(params, state, loss)``.
    """
    keys = config.keys(params)
    assert not set(keys) & set(params.decision_keys), "decision head is frozen at test time"
    obs, next_obs, opp = transitions
    loss = float("nan")
    for _ in range(config.updates_per_step):
        loss, grads = aux_loss(params, obs, next_obs, opp)
        optimizer_step(params, grads, state, keys)
    return params, state, loss


@dataclass
class EvalResult:
    mean_return: float
    std_return: float
    opponent_mean_return: float
    episodes: int
    cooperation: float
    prediction_accuracy: float | None = None
    returns: list[float] = field(default_factory=list)
    episode_accuracy: list[float] = field(default_factory=list)
    episode_aux_loss: list[float] = field(default_factory=list)


def evaluate_vs_opponent(params: NetworkParams, opponent: ScriptedOpponent, env_config: EnvConfig,
                         episodes: int = 100, adapt: bool = False,
                         adapt_config: AdaptationConfig | None = None) -> EvalResult:
    """Play ``episodes`` games with the checkpoint as player 0 against ``opponent``.

    The agent acts greedily.  With ``adapt`` on, a private copy of the network
    takes one auxiliary-loss step per environment step on the latest transition
    and keeps adapting across episodes; the caller's ``params`` are untouched.
    ``cooperation`` is the fraction of mutually cooperative steps in matrix
    games and mutual events per episode in grid worlds.
    """
    adapt_config = adapt_config or AdaptationConfig()
    net = params.copy() if adapt else params
    state = OptimizerState(lr=adapt_config.lr)
    env = make_env(env_config)
    returns, opp_returns = [], []
    ep_acc, ep_loss = [], []
    mutual = 0
    steps = 0
    correct = 0
    for _ in range(episodes):
        obs = env.reset()
        history: list[int] = []
        done = False
        total = np.zeros(2)
        hits, losses = 0, []
        while not done:
            a0 = select_action_greedy(net, obs[0])
            a1 = opponent.act(obs[1], history)
            res = env.step([a0, a1])
            history.append(a0)
            total += res.rewards
            mutual += bool(res.info.get("mutual", False))
            steps += 1
            if adapt:
                logits = forward_joint(net, obs[0], res.observations[0]).opponent_outputs[0]
                hits += int(np.argmax(logits[0]) == a1)
                _, _, loss = adapt_step(net, state, (obs[0], res.observations[0], [a1]), adapt_config)
                losses.append(loss)
            obs = res.observations
            done = res.done
        returns.append(float(total[0]))
        opp_returns.append(float(total[1]))
        if adapt:
            correct += hits
            ep_acc.append(hits / len(losses))
            ep_loss.append(float(np.mean(losses)))
    coop = mutual / steps if env_config.is_matrix else mutual / episodes
    return EvalResult(
        mean_return=float(np.mean(returns)),
        std_return=float(np.std(returns)),
        opponent_mean_return=float(np.mean(opp_returns)),
        episodes=episodes,
        cooperation=coop,
        prediction_accuracy=correct / steps if adapt else None,
        returns=returns,
        episode_accuracy=ep_acc,
        episode_aux_loss=ep_loss,
    )
