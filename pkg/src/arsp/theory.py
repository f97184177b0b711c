"""Basin of the Stag equilibrium under policy-gradient play in a 2x2 stag hunt.

Each player i plays Stag with probability theta_i and ascends the exact gradient
of its own expected payoff, with theta clamped to [0, 1].  The closed form
(eps / (1 + eps))^2, eps = (a - b) / (d - c), is the probability that both
uniform initial thetas start above the indifference point s = 1 / (1 + eps).

For steps that do not overshoot, the update is a linear map with the same
eigenvectors as the continuous flow, so the Stag basin is the half-plane
theta_1 + theta_2 > 2s and has area 2 (1 - s)^2 (:func:`flow_basin`), twice the
closed form.  Saturating steps recover the closed form but trap every
off-diagonal start in a (1, 0) <-> (0, 1) cycle that never converges.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class StagHuntPayoff:
    a: float  # both Stag
    b: float  # Hare against Stag
    c: float  # Stag against Hare
    d: float  # both Hare

    def __post_init__(self):
        if not (self.a > self.b >= self.d > self.c):
            raise ValueError(f"stag hunt needs a > b >= d > c, got {self}")

    @property
    def epsilon(self) -> float:
        return (self.a - self.b) / (self.d - self.c)

    @property
    def indifference(self) -> float:
        """Partner Stag probability at which Stag and Hare pay the same."""
        return (self.d - self.c) / (self.a - self.b - self.c + self.d)


@dataclass
class PGDynamicsConfig:
    lr: float = 0.01
    max_iters: int = 20_000
    threshold: float = 1e-3
    patience: int = 10
    trials: int = 100_000
    seed: int = 0


@dataclass
class BasinEstimate:
    estimate: float
    stderr: float
    trials: int
    converged_stag: int
    converged_hare: int
    unconverged: int

    @property
    def unconverged_fraction(self) -> float:
        return self.unconverged / self.trials

    @property
    def failed(self) -> bool:
        return self.unconverged_fraction > 0.01


def basin_closed_form(payoff: StagHuntPayoff) -> float:
    eps = payoff.epsilon
    if not 0.0 < eps < 1.0:
        raise ValueError(f"closed form needs 0 < eps < 1, got eps = {eps}")
    return eps**2 / (eps**2 + 2.0 * eps + 1.0)


def flow_basin(payoff: StagHuntPayoff) -> float:
    """Stag basin of the small-step (continuous-time) dynamics."""
    s = payoff.indifference
    if s >= 0.5:
        return 2.0 * (1.0 - s) ** 2
    return 1.0 - 2.0 * s**2


def payoff_gradient(theta_own, theta_other, payoff: StagHuntPayoff):
    """d/d theta_own of the expected payoff against a partner playing theta_other."""
    p = payoff
    return theta_other * (p.a - p.b - p.c + p.d) + (p.c - p.d)


def pg_dynamics_step(theta1, theta2, payoff: StagHuntPayoff, lr: float):
    """Simultaneous projected gradient-ascent step for both players."""
    g1 = payoff_gradient(theta1, theta2, payoff)
    g2 = payoff_gradient(theta2, theta1, payoff)
    return np.clip(theta1 + lr * g1, 0.0, 1.0), np.clip(theta2 + lr * g2, 0.0, 1.0)


def monte_carlo_basin(payoff: StagHuntPayoff, config: PGDynamicsConfig | None = None) -> BasinEstimate:
    """Fraction of uniform initialisations whose dynamics settle on (Stag, Stag).

    All trials are iterated together.  A trial counts as converged once both
    thetas sit within ``threshold`` of 0 or 1 for ``patience`` consecutive
    iterations.
    """
    cfg = config or PGDynamicsConfig()
    rng = np.random.default_rng(cfg.seed)
    t1 = rng.uniform(size=cfg.trials)
    t2 = rng.uniform(size=cfg.trials)
    streak = np.zeros(cfg.trials, dtype=np.int64)
    outcome = np.zeros(cfg.trials, dtype=np.int8)  # 1 stag, -1 hare, 0 running
    active = np.arange(cfg.trials)
    for _ in range(cfg.max_iters):
        if active.size == 0:
            break
        a1, a2 = pg_dynamics_step(t1[active], t2[active], payoff, cfg.lr)
        t1[active], t2[active] = a1, a2
        stag = (a1 >= 1.0 - cfg.threshold) & (a2 >= 1.0 - cfg.threshold)
        hare = (a1 <= cfg.threshold) & (a2 <= cfg.threshold)
        near = stag | hare
        streak[active] = np.where(near, streak[active] + 1, 0)
        done = streak[active] >= cfg.patience
        outcome[active[done & stag]] = 1
        outcome[active[done & hare]] = -1
        active = active[~done]
    n_stag = int(np.sum(outcome == 1))
    n_hare = int(np.sum(outcome == -1))
    p = n_stag / cfg.trials
    return BasinEstimate(
        estimate=p,
        stderr=math.sqrt(p * (1.0 - p) / cfg.trials),
        trials=cfg.trials,
        converged_stag=n_stag,
        converged_hare=n_hare,
        unconverged=cfg.trials - n_stag - n_hare,
    )


def lr_sensitivity(payoff: StagHuntPayoff, lrs, config: PGDynamicsConfig | None = None):
    """Monte Carlo basin estimate for each learning rate in ``lrs``."""
    base = config or PGDynamicsConfig()
    out = []
    for lr in lrs:
        cfg = PGDynamicsConfig(lr, base.max_iters, base.threshold, base.patience, base.trials, base.seed)
        out.append((lr, monte_carlo_basin(payoff, cfg)))
    return out
