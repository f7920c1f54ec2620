"""Conditional recurrent normalizing flow (CRow) in numpy.

Invertible, GRU-conditioned affine coupling blocks with temporal context
gating, trained bidirectionally with MMD losses; supports conditional
sequence generation and exact per-step log-density.
"""
from crow.flow import (
    FlowConfig,
    FlowModel,
    SequenceSample,
    Split,
    StepResult,
    init_model,
    log_density,
    random_model,
    sequence_forward,
    sequence_generate,
    sequence_inverse,
    sequence_log_density,
    step_forward,
    step_inverse,
)
from crow.numerics import Rng
from crow.training import MmdConfig, TrainConfig, imq_kernel, mmd2, train

__version__ = "0.1.0"

__all__ = [
    "FlowConfig", "FlowModel", "MmdConfig", "Rng", "SequenceSample", "Split", "StepResult",
    "TrainConfig", "imq_kernel", "init_model", "log_density", "mmd2", "random_model",
    "sequence_forward", "sequence_generate", "sequence_inverse", "sequence_log_density",
    "step_forward", "step_inverse", "train",
]
