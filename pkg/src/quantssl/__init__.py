"""Online semi-supervised learning with harmonic solutions on quantized graphs."""

__version__ = "0.1.0"

from .graph import KernelSpec, QuantizedGraph, build, build_split, kernel_weight, laplacian, normalized_laplacian
from .learner import LearnerConfig, OnlineLearner, StepRecord
from .quantizer import Centroid, CentroidSet
from .solver import LabelAssignment, SoftConfig, SolveResult, predict, solve_hard, solve_soft

__all__ = [
    "Centroid",
    "CentroidSet",
    "KernelSpec",
    "LabelAssignment",
    "LearnerConfig",
    "OnlineLearner",
    "QuantizedGraph",
    "SoftConfig",
    "SolveResult",
    "StepRecord",
    "build",
    "build_split",
    "kernel_weight",
    "laplacian",
    "normalized_laplacian",
    "predict",
    "solve_hard",
    "solve_soft",
]
