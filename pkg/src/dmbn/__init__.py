"""Multimodal conditional neural process for bimodal arm sequences.

Two time-injection variants are provided: the original time-as-channel
scheme and a positional-time-encoding scheme that keeps temporal
information recoverable from the learned representations.
"""

__version__ = "0.1.0"

from .model import GaussianPrediction, ModelConfig, ObservationSet, forward
from .probe import ProbeConfig, probe_report
from .synthdata import ArmGeometry, Trajectory, generate_trajectory
from .tensor import ParameterSet, Tensor, backward, grad_check
from .training import EvalMetrics, TrainConfig, evaluate, train

__all__ = [
    "ArmGeometry",
    "EvalMetrics",
    "GaussianPrediction",
    "ModelConfig",
    "ObservationSet",
    "ParameterSet",
    "ProbeConfig",
    "Tensor",
    "TrainConfig",
    "Trajectory",
    "backward",
    "evaluate",
    "forward",
    "generate_trajectory",
    "grad_check",
    "probe_report",
    "train",
    "__version__",
]
