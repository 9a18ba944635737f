"""Globally stable, context-conditioned stochastic dynamics.

A stable latent stochastic process pushed through a conditioned invertible
network gives dynamics that are globally stochastically stable for every
context and every parameter value, with exact transition likelihoods for
behavioral-cloning training and a numerical Lyapunov verifier for checking
the certificates on any checkpoint.
"""

from .autodiff import AdamState, Mlp, ParamVector, Tensor, adam_step, backward, recording
from .datasets import (
    GoToTaskSpec,
    MorphingCycleSpec,
    ObstacleSceneSpec,
    Trajectory,
    TrajectoryDataset,
    gen_cycle_dataset,
    gen_goto_dataset,
    gen_obstacle_dataset,
    read_dataset,
    write_dataset,
)
from .errors import (
    ConditioningError,
    DatasetFormatError,
    DegenerateDensityError,
    DimensionError,
    GenerationError,
    NumericalError,
    StableFlowError,
    TrainingError,
    ValidationError,
)
from .estimator import StableDynamicsEstimator
from .flow import ConditionedFlow, CouplingLayer
from .latent import GaussianTransition, LimitCycleLatent, LinearAttractor
from .policy import ContextDynamics, Rollout, StablePolicyModel, Standardization
from .training import TrainConfig, TrainReport, dataset_nll, evaluate, train

__version__ = "0.1.0"

__all__ = [
    "AdamState", "Mlp", "ParamVector", "Tensor", "adam_step", "backward", "recording",
    "ConditionedFlow", "CouplingLayer",
    "GaussianTransition", "LimitCycleLatent", "LinearAttractor",
    "ContextDynamics", "Rollout", "StablePolicyModel", "Standardization",
    "TrainConfig", "TrainReport", "dataset_nll", "evaluate", "train",
    "StableDynamicsEstimator",
    "Trajectory", "TrajectoryDataset", "MorphingCycleSpec", "ObstacleSceneSpec",
    "GoToTaskSpec", "gen_cycle_dataset", "gen_obstacle_dataset", "gen_goto_dataset",
    "read_dataset", "write_dataset",
    "StableFlowError", "ValidationError", "DimensionError", "DatasetFormatError",
    "NumericalError", "DegenerateDensityError", "ConditioningError",
    "TrainingError", "GenerationError",
]
