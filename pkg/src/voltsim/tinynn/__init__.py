"""Desk-scale neural network kernels and models.

Forward/backward kernels are plain numpy in float64; quantized inference
routes every weight-bearing GEMM through the faulty engine so injection and
anomaly clearance reach each tagged component.
"""
from .ops import NormStats  # noqa: F401
from .models import (  # noqa: F401
    COMPONENT_TAGS,
    ControllerModel,
    EntropyPredictor,
    PlannerModel,
    RunContext,
    TransformerSpec,
    calibrate_model,
    forward,
)
from .optim import TrainConfig, TrainingError, train  # noqa: F401
from .checkpoint import load_checkpoint, save_checkpoint  # noqa: F401
