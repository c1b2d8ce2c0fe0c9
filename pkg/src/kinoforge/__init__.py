"""Learned constant-control steering and medial-axis guidance for kinodynamic tree search."""

from .bench import BenchConfig, RunRecord, normalize, render, run_benchmark
from .controller import LookupController, MlpController, TrainConfig, predict, train
from .dataset import ControlDataset, DataGenConfig, VelocityHistogram, generate_ctrl_data
from .dynamics import Epsilons, PropagationStep, SystemSpec, propagate, propagate_batch
from .maps_io import GridMap, ProblemSet, downscale, generate_problems, load_map, parse_map, synthetic_city
from .medial_axis import MedialAxisField, attach_goal, compute_medial_axis, integrated_vector
from .planner import PlannerConfig, PlanResult, plan, replay

__version__ = "0.1.0"

__all__ = [
    "BenchConfig", "RunRecord", "normalize", "render", "run_benchmark",
    "LookupController", "MlpController", "TrainConfig", "predict", "train",
    "ControlDataset", "DataGenConfig", "VelocityHistogram", "generate_ctrl_data",
    "Epsilons", "PropagationStep", "SystemSpec", "propagate", "propagate_batch",
    "GridMap", "ProblemSet", "downscale", "generate_problems", "load_map", "parse_map", "synthetic_city",
    "MedialAxisField", "attach_goal", "compute_medial_axis", "integrated_vector",
    "PlannerConfig", "PlanResult", "plan", "replay",
]
