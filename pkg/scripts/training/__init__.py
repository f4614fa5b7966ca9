"""Configuration, training, evaluation, ablation, gradient checks and rendering."""

from scripts.training.config import (
    REGISTRY,
    CamConfig,
    ScdConfig,
    TrainConfig,
    build_train_config,
    dump_config,
    load_config,
    thread_count,
)
from scripts.training.trainer import TSCDTrainer, sample_losses, train_step
from scripts.training.evaluate import Metrics, evaluate, metrics_from_confusion, refinement_study
from scripts.training.ablation import VARIANTS, ablation_run, refinement_run
from scripts.training.gradcheck_suite import run_gradcheck
from scripts.training.render import render
