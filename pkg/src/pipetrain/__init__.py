"""Pipeline-parallel training with weight prediction, simulated on one machine."""

from .analyzer import CostModel, Timeline, analyze, simulate, utilization, version_lineage
from .data import BatchPlan, Dataset, batches, load_idx, normalize, synth_blobs
from .estimator import PipelineClassifier
from .experiment import ExperimentConfig, compare, run, train
from .optim import OptimizerConfig
from .partition import ModelSpec, build_model, partition
from .prediction import PredictionCache, PredictionContext, predict_weights, version_difference
from .runtime.engine import PipelineEngine
from .runtime.schedule import SCHEDULES, schedule_table

__version__ = "0.1.0"
