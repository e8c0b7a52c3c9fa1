"""Mask classifier, its training loop and the experiment designs."""
from .experiments import (DESIGNS, UnknownDesign, cam_heat_correlation, pearson, report_rows,
                          run_experiment, write_report_csv)
from .model import (STABLE, UNSTABLE, Model, ShapeMismatch, cam, cam_raw, forward, gradients, init_model,
                    load_checkpoint, loss_and_gradients, predict, save_checkpoint, softmax)
from .train import EXPERIMENT_CONFIG, EvalReport, LeakageError, NonFiniteLoss, TrainConfig, class_weights, evaluate, train

__all__ = [
    "DESIGNS", "UnknownDesign", "cam_heat_correlation", "pearson", "report_rows", "run_experiment",
    "write_report_csv", "STABLE", "UNSTABLE", "Model", "ShapeMismatch", "cam", "cam_raw", "forward",
    "gradients", "init_model", "load_checkpoint", "loss_and_gradients", "predict", "save_checkpoint",
    "softmax", "EXPERIMENT_CONFIG", "EvalReport", "LeakageError", "NonFiniteLoss", "TrainConfig", "class_weights",
    "evaluate", "train",
]
