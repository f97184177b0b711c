"""Two-player general-sum games: iterated matrix games and two 5x5 grid worlds.

Every environment is seeded through its config and owns a private
``numpy.random.Generator``, so a trajectory is a pure function of the seed and
the joint actions fed to :meth:`step`.

Matrix-game actions are 0 = cooperate (C) and 1 = defect (D).  Grid actions are
0 = up, 1 = down, 2 = left, 3 = right, 4 = stay.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

COOPERATE, DEFECT = 0, 1
START = 4
GRID = 5
CELLS = GRID * GRID
MOVES = ((-1, 0), (1, 0), (0, -1), (0, 1), (0, 0))

# payoff[own, other] -> (reward_self, reward_other)
ISH_PAYOFF = np.array([[[2.0, 2.0], [-10.0, 1.0]],
                       [[1.0, -10.0], [1.0, 1.0]]])
IPD_PAYOFF = np.array([[[2.0, 2.0], [-1.0, 3.0]],
                       [[3.0, -1.0], [0.0, 0.0]]])

DEFAULT_HORIZON = {"ISH": 10, "IPD": 10, "CustomMatrix": 10, "MonsterHunt": 20, "Escalation": 30}


@dataclass
class EnvConfig:
    game: str = "ISH"
    horizon: int | None = None
    seed: int = 0
    payoff: list | None = None  # 2x2x2 table for CustomMatrix

    def __post_init__(self):
        if self.game not in DEFAULT_HORIZON:
            raise ValueError(f"unknown game {self.game!r}")
        if self.horizon is None:
            self.horizon = DEFAULT_HORIZON[self.game]
        if self.horizon <= 0:
            raise ValueError("horizon must be positive")
        if self.game == "CustomMatrix":
            if self.payoff is None or np.shape(self.payoff) != (2, 2, 2):
                raise ValueError("CustomMatrix needs a 2x2x2 payoff table")

    @property
    def is_matrix(self) -> bool:
        return self.game in ("ISH", "IPD", "CustomMatrix")


@dataclass
class StepResult:
    observations: list[np.ndarray]
    rewards: np.ndarray
    done: bool
    info: dict = field(default_factory=dict)


@dataclass
class MatrixState:
    step: int = 0
    last: tuple[int, int] | None = None  # None is the START token


@dataclass
class GridState:
    step: int
    agents: list[tuple[int, int]]
    apples: list[tuple[int, int]] = field(default_factory=list)
    monster: tuple[int, int] | None = None
    light: tuple[int, int] | None = None
    streak: int = 0


def one_hot(index: int, size: int) -> np.ndarray:
    v = np.zeros(size)
    v[index] = 1.0
    return v


def _cell(pos) -> int:
    return pos[0] * GRID + pos[1]


def _move(pos, action):
    dr, dc = MOVES[action]
    r, c = pos[0] + dr, pos[1] + dc
    if 0 <= r < GRID and 0 <= c < GRID:
        return (r, c)
    return pos


class MatrixGame:
    """Iterated 2x2 game played by memory-1 players."""

    n_agents = 2
    n_actions = 2
    obs_dim = 5

    def __init__(self, config: EnvConfig):
        self.config = config
        if config.game == "ISH":
            self.payoff = ISH_PAYOFF
        elif config.game == "IPD":
            self.payoff = IPD_PAYOFF
        else:
            self.payoff = np.asarray(config.payoff, dtype=float)
        self.state = MatrixState()

    def reset(self):
        self.state = MatrixState()
        return [self.encode_observation(self.state, i) for i in range(2)]

    def encode_observation(self, state: MatrixState, agent: int) -> np.ndarray:
        # one-hot over {CC, CD, DC, DD, START}, own action first
        if state.last is None:
            return one_hot(START, 5)
        own, other = state.last[agent], state.last[1 - agent]
        return one_hot(2 * own + other, 5)

    def step(self, actions) -> StepResult:
        a0, a1 = (int(a) for a in actions)
        if a0 not in (0, 1) or a1 not in (0, 1):
            raise ValueError(f"matrix-game actions must be 0 or 1, got {actions}")
        s = self.state
        rewards = self.payoff[a0, a1].copy()
        s.last = (a0, a1)
        s.step += 1
        done = s.step >= self.config.horizon
        obs = [self.encode_observation(s, i) for i in range(2)]
        return StepResult(obs, rewards, done, {"joint_action": (a0, a1),
                                               "mutual": a0 == COOPERATE and a1 == COOPERATE})


class _GridGame:
    n_agents = 2
    n_actions = 5

    def __init__(self, config: EnvConfig):
        self.config = config
        self.rng = np.random.default_rng(config.seed)
        self.state: GridState | None = None

    def _free_cell(self, occupied) -> tuple[int, int]:
        taken = {_cell(p) for p in occupied}
        free = [c for c in range(CELLS) if c not in taken]
        c = free[self.rng.integers(len(free))]
        return divmod(c, GRID)

    def _distinct_cells(self, n):
        cells = self.rng.choice(CELLS, size=n, replace=False)
        return [divmod(int(c), GRID) for c in cells]

    def _check_actions(self, actions):
        acts = [int(a) for a in actions]
        if len(acts) != 2 or any(a < 0 or a >= 5 for a in acts):
            raise ValueError(f"grid actions must be two indices in 0..4, got {actions}")
        return acts


class MonsterHunt(_GridGame):
    """Two agents, two static apples and a monster chasing its closest agent."""

    obs_dim = 4 * CELLS + 1

    def reset(self):
        cells = self._distinct_cells(5)
        self.state = GridState(0, cells[:2], apples=cells[2:4], monster=cells[4])
        return [self.encode_observation(self.state, i) for i in range(2)]

    def encode_observation(self, state: GridState, agent: int) -> np.ndarray:
        obs = np.zeros(self.obs_dim)
        obs[_cell(state.agents[agent])] = 1.0
        obs[CELLS + _cell(state.agents[1 - agent])] = 1.0
        for apple in state.apples:
            obs[2 * CELLS + _cell(apple)] = 1.0
        obs[3 * CELLS + _cell(state.monster)] = 1.0
        obs[-1] = state.step / self.config.horizon
        return obs

    @staticmethod
    def monster_move(monster, agents):
        """Greedy Manhattan step toward the closest agent (agent 0 wins ties)."""
        dists = [abs(monster[0] - a[0]) + abs(monster[1] - a[1]) for a in agents]
        target = agents[int(np.argmin(dists))]
        if target[0] != monster[0]:
            return (monster[0] + (1 if target[0] > monster[0] else -1), monster[1])
        if target[1] != monster[1]:
            return (monster[0], monster[1] + (1 if target[1] > monster[1] else -1))
        return monster

    def step(self, actions) -> StepResult:
        acts = self._check_actions(actions)
        s = self.state
        s.agents = [_move(p, a) for p, a in zip(s.agents, acts)]
        s.monster = self.monster_move(s.monster, s.agents)
        rewards = np.zeros(2)

        on_monster = [p == s.monster for p in s.agents]
        catch = all(on_monster)
        if catch:
            rewards += 5.0
        elif any(on_monster):
            rewards[on_monster.index(True)] -= 10.0

        eaten = []
        for k, apple in enumerate(s.apples):
            hit = [p == apple for p in s.agents]
            if any(hit):
                rewards += 2.0 * np.array(hit, dtype=float)
                eaten.append(k)
        for k in eaten:
            others = [a for j, a in enumerate(s.apples) if j != k]
            s.apples[k] = self._free_cell(s.agents + others + [s.monster])
        if any(on_monster):
            s.monster = self._free_cell(s.agents + s.apples)

        s.step += 1
        done = s.step >= self.config.horizon
        obs = [self.encode_observation(s, i) for i in range(2)]
        return StepResult(obs, rewards, done, {"mutual": catch, "solo_hit": any(on_monster) and not catch,
                                               "apples": len(eaten)})


class Escalation(_GridGame):
    """Two agents and a light; mutual light-stepping escalates the betrayal penalty."""

    obs_dim = 3 * CELLS + 2

    def reset(self):
        cells = self._distinct_cells(3)
        self.state = GridState(0, cells[:2], light=cells[2], streak=0)
        return [self.encode_observation(self.state, i) for i in range(2)]

    def encode_observation(self, state: GridState, agent: int) -> np.ndarray:
        obs = np.zeros(self.obs_dim)
        obs[_cell(state.agents[agent])] = 1.0
        obs[CELLS + _cell(state.agents[1 - agent])] = 1.0
        obs[2 * CELLS + _cell(state.light)] = 1.0
        obs[-2] = state.step / self.config.horizon
        obs[-1] = state.streak / self.config.horizon
        return obs

    def step(self, actions) -> StepResult:
        acts = self._check_actions(actions)
        s = self.state
        s.agents = [_move(p, a) for p, a in zip(s.agents, acts)]
        on_light = [p == s.light for p in s.agents]
        rewards = np.zeros(2)
        mutual = all(on_light)
        if mutual:
            rewards += 1.0
            s.streak += 1
            r, c = s.light
            nbrs = [(r + dr, c + dc) for dr, dc in MOVES[:4]
                    if 0 <= r + dr < GRID and 0 <= c + dc < GRID]
            s.light = nbrs[self.rng.integers(len(nbrs))]
        elif any(on_light):
            rewards[on_light.index(True)] = -1.5 * s.streak
            s.streak = 0
            s.light = self._free_cell(s.agents)
        else:
            s.streak = 0

        s.step += 1
        done = s.step >= self.config.horizon
        obs = [self.encode_observation(s, i) for i in range(2)]
        return StepResult(obs, rewards, done, {"mutual": mutual, "streak": s.streak})


def make_env(config: EnvConfig):
    if config.is_matrix:
        return MatrixGame(config)
    if config.game == "MonsterHunt":
        return MonsterHunt(config)
    return Escalation(config)
