"""Window extraction, refinement and sliding-window benchmarking."""

from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

from .dataio import DatasetBundle
from .evaluation import MetricsReport, evaluate_window
from .factors import FeatureTrack, Observation, RobustLoss
from .preintegration import preintegrate
from .problem import ProblemConfig, SolverSettings, build_structure_based, build_structureless
from .simulation import PerturbationSpec, perturb_states
from .solver import SolveResult, solve

MODES = ("structureless", "structure-based")


@dataclass
class RunConfig:
    mode: str = "structureless"
    pairing: str = "all-pairs"
    sigma: float | None = None
    pixel_sigma: float | None = None  # None: take it from the calibration
    loss: RobustLoss = field(default_factory=RobustLoss)
    gauge: str = "fix-first-posyaw"
    settings: SolverSettings = field(default_factory=SolverSettings)
    window: int = 10
    seed: int = 0

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}; expected one of {MODES}")
        if self.window < 3:
            raise ValueError("window size must be at least 3")

    def problem_config(self, bundle: DatasetBundle) -> ProblemConfig:
        px = bundle.calib.pixel_sigma if self.pixel_sigma is None else self.pixel_sigma
        return ProblemConfig(self.pairing, self.sigma, px, self.loss, self.gauge,
                             bundle.calib.gravity, self.settings)


def window_tracks(tracks, start: int, size: int) -> list[FeatureTrack]:
    """Tracks restricted to keyframes ``[start, start + size)``, re-indexed from 0."""
    out = []
    for t in tracks:
        obs = [Observation(o.keyframe - start, o.uv, o.bearing) for o in t.observations
               if start <= o.keyframe < start + size]
        if obs:
            out.append(FeatureTrack(t.feature_id, obs))
    return out


def window_preintegrations(bundle: DatasetBundle, states, start: int, size: int):
    """One preintegration per consecutive keyframe pair, linearised at ``states``' biases."""
    kf = bundle.keyframe_ns
    return [preintegrate(bundle.imu.segment(int(kf[k]), int(kf[k + 1])),
                         states[k - start].ba, states[k - start].bg, bundle.calib.noise)
            for k in range(start, start + size - 1)]


def perturbed_initial(bundle: DatasetBundle, spec: PerturbationSpec):
    if bundle.groundtruth is None:
        raise ValueError("bundle has no ground truth to perturb")
    return perturb_states(bundle.groundtruth, spec)


def build_window(bundle: DatasetBundle, initial, start: int, config: RunConfig):
    size = min(config.window, len(bundle.keyframe_ns) - start)
    if size < 2 or start < 0:
        raise ValueError(f"window at keyframe {start} holds fewer than 2 keyframes")
    states = [s.copy() for s in initial[start:start + size]]
    preints = window_preintegrations(bundle, states, start, size)
    tracks = window_tracks(bundle.tracks, start, size)
    pc = config.problem_config(bundle)
    if config.mode == "structureless":
        return build_structureless(states, preints, tracks, bundle.calib.extrinsics, pc,
                                   intr=bundle.calib.intrinsics)
    return build_structure_based(states, preints, tracks, bundle.calib.intrinsics,
                                 bundle.calib.extrinsics, pc)


def refine_window(bundle: DatasetBundle, initial, start: int = 0,
                  config: RunConfig | None = None) -> SolveResult:
    return solve(build_window(bundle, initial, start, config or RunConfig()))


def _bench_one(args):
    bundle, initial, start, config = args
    result = refine_window(bundle, initial, start, config)
    truth = bundle.groundtruth[start:start + config.window]
    return evaluate_window(result.states, truth, result.report.solve_time_ms, start)


def run_bench(bundle: DatasetBundle, initial, config: RunConfig | None = None,
              workers: int = 1) -> MetricsReport:
    """Refine every full window position and evaluate it against ground truth.

    Rows come back in window order whatever the worker count.
    """
    config = config or RunConfig()
    if bundle.groundtruth is None:
        raise ValueError("benchmarking needs ground truth")
    n = len(bundle.keyframe_ns)
    if n < config.window:
        raise ValueError(f"bundle has {n} keyframes, fewer than the window size {config.window}")
    jobs = [(bundle, initial, start, config) for start in range(n - config.window + 1)]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(_bench_one, jobs))
    else:
        rows = [_bench_one(j) for j in jobs]
    return MetricsReport(rows)


