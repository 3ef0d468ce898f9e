"""Conditional permutation-invariant continuous normalizing flows for set-valued data."""

from .dynamics import DynamicsConfig, DynamicsParams, divergence, init_dynamics, reg_densities, velocity
from .flow import FlowModel, ScoredSample, TrainConfig, log_prob, nll_loss, roundtrip, sample
from .ode import IntegrationResult, SolverConfig, integrate
from .tasks import Box, SceneRecord, gen_task1, gen_task2, infraction_report, overlap, rasterize

__version__ = "0.1.0"

__all__ = [
    "Box",
    "DynamicsConfig",
    "DynamicsParams",
    "FlowModel",
    "IntegrationResult",
    "SceneRecord",
    "ScoredSample",
    "SolverConfig",
    "TrainConfig",
    "divergence",
    "gen_task1",
    "gen_task2",
    "infraction_report",
    "init_dynamics",
    "integrate",
    "log_prob",
    "nll_loss",
    "overlap",
    "rasterize",
    "reg_densities",
    "roundtrip",
    "sample",
    "velocity",
]
