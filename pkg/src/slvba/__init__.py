"""Structureless visual-inertial bundle adjustment for VIO initialization."""

from .dataio import Calibration, DatasetBundle, load_bundle, load_results, save_bundle, save_results
from .evaluation import (
    MetricsReport,
    align_posyaw,
    aggregate_solve_time,
    compute_ate,
    compute_velocity_rmse,
)
from .factors import EpipolarFactor, FeatureTrack, Observation, RobustLoss, huber_weight
from .geometry import CameraIntrinsics, Extrinsics
from .pipeline import RunConfig, refine_window, run_bench
from .preintegration import ImuMeasurements, ImuNoiseModel, PreintegratedImu, preintegrate
from .problem import ProblemConfig, SolverSettings, build_structure_based, build_structureless
from .simulation import SimulationConfig, simulate
from .solver import SolveReport, apply_gauge_fix, solve, total_cost
from .state import KeyframeState

__all__ = [
    "Calibration", "DatasetBundle", "load_bundle", "load_results", "save_bundle", "save_results",
    "MetricsReport", "align_posyaw", "aggregate_solve_time", "compute_ate",
    "compute_velocity_rmse", "EpipolarFactor", "FeatureTrack", "Observation", "RobustLoss",
    "huber_weight", "CameraIntrinsics", "Extrinsics", "RunConfig", "refine_window", "run_bench",
    "ImuMeasurements", "ImuNoiseModel", "PreintegratedImu", "preintegrate", "ProblemConfig",
    "SolverSettings", "build_structure_based", "build_structureless", "SimulationConfig",
    "simulate", "SolveReport", "apply_gauge_fix", "solve", "total_cost", "KeyframeState",
]
