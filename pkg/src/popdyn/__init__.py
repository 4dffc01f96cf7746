"""Closed-loop recommendation simulator for studying popularity bias and its correction."""
from .ground_truth import GroundTruth, synthesize_ground_truth
from .metrics import MetricSeries, gini_of
from .simulator import SimConfig, run

__version__ = "0.1.0"

__all__ = ["GroundTruth", "MetricSeries", "SimConfig", "gini_of", "run", "synthesize_ground_truth"]
