"""Task-conditioned causal representation learning on synthetic SCM data."""
from .estimators import StaticCRL, TemporalCRL
from .evaluation import EvalReport, evaluate, mcc, r2_score
from .objective import ObjectiveSpec
from .trainer import ExperimentConfig, RunRecord, compose_total_loss, grid_run, train_run

__version__ = "0.1.0"
