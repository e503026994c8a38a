"""Federated recommender with attribute-inference attacks and adaptive upload perturbation."""

from .config import ConfigError, ExperimentConfig
from .dataset import build_shards, load_movielens, synthetic_movielens
from .evaluation import evaluate_recommender, hit_at_k
from .experiment import ExperimentReport, run_experiment, run_pipeline
from .federation import FederationConfig, run_training
from .privacy import BudgetPlan, perturb
from .recommender import Hyper, ParamSet, init_params, local_train

__all__ = [
    "BudgetPlan",
    "ConfigError",
    "ExperimentConfig",
    "ExperimentReport",
    "FederationConfig",
    "Hyper",
    "ParamSet",
    "build_shards",
    "evaluate_recommender",
    "hit_at_k",
    "init_params",
    "load_movielens",
    "local_train",
    "perturb",
    "run_experiment",
    "run_pipeline",
    "run_training",
    "synthetic_movielens",
]
