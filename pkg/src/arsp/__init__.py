"""Risk-seeking distributional self-play learners for general-sum Markov games."""

from .agent import AgentConfig, ARSPAgent
from .distributional import (
    CVaR,
    WangTransform,
    distorted_expectation,
    distortion_weights,
    left_truncated_variance,
    quantile_huber_loss,
)
from .envs import EnvConfig, make_env
from .harness import ExperimentConfig, default_config, run_training
from .theory import StagHuntPayoff, basin_closed_form, monte_carlo_basin

__all__ = [
    "AgentConfig", "ARSPAgent", "CVaR", "WangTransform", "distorted_expectation",
    "distortion_weights", "left_truncated_variance", "quantile_huber_loss", "EnvConfig",
    "make_env", "ExperimentConfig", "default_config", "run_training", "StagHuntPayoff",
    "basin_closed_form", "monte_carlo_basin",
]
