"""Assembly of structureless and structure-based refinement problems."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .factors import (
    MIN_BASELINE,
    EpipolarFactor,
    FeatureTrack,
    RobustLoss,
    build_epipolar_factors,
)
from .geometry import CameraIntrinsics, Extrinsics, gravity_vector
from .preintegration import PreintegratedImu, PreintegrationStack
from .state import ERROR_DIM, KeyframeState

GAUGE_POLICIES = ("fix-first-posyaw", "none")
# epipolar sigma per pixel of observation noise, in units of 1/focal length
EPIPOLAR_PIXEL_GAIN = 1.5


@dataclass
class SolverSettings:
    max_iterations: int = 50
    initial_lambda: float = 1e-4
    lambda_up: float = 10.0
    lambda_down: float = 0.5
    max_lambda: float = 1e12
    rel_cost_tol: float = 1e-8
    grad_tol: float = 1e-10
    step_tol: float = 1e-12
    min_baseline: float = MIN_BASELINE
    damping: str = "identity"  # or "marquardt": scale by diag(H)

    def __post_init__(self):
        if self.damping not in ("identity", "marquardt"):
            raise ValueError(f"unknown damping {self.damping!r}")


@dataclass
class ProblemConfig:
    """Knobs shared by both problem builders.

    ``sigma`` is the epipolar noise in triple-product units; when left
    ``None`` it is derived from ``pixel_sigma`` and the focal length.
    """

    pairing: str = "all-pairs"
    sigma: float | None = None
    pixel_sigma: float = 1.0
    loss: RobustLoss = field(default_factory=RobustLoss)
    gauge: str = "fix-first-posyaw"
    gravity: float = 9.81
    settings: SolverSettings = field(default_factory=SolverSettings)

    def epipolar_sigma(self, intr: CameraIntrinsics | None) -> float:
        if self.sigma is not None:
            return float(self.sigma)
        focal = 0.5 * (intr.fx + intr.fy) if intr is not None else 460.0
        return float(EPIPOLAR_PIXEL_GAIN * self.pixel_sigma / focal)


@dataclass
class InitializationProblem:
    mode: str
    states: list[KeyframeState]
    preints: list[PreintegratedImu]
    ext: Extrinsics
    gravity: np.ndarray
    loss: RobustLoss
    gauge: str
    settings: SolverSettings
    # structureless
    epi_i: np.ndarray | None = None
    epi_j: np.ndarray | None = None
    epi_zi: np.ndarray | None = None
    epi_zj: np.ndarray | None = None
    epi_sigma: np.ndarray | None = None
    # structure-based
    intr: CameraIntrinsics | None = None
    landmarks: np.ndarray | None = None
    landmark_ids: list[int] = field(default_factory=list)
    obs_kf: np.ndarray | None = None
    obs_lm: np.ndarray | None = None
    obs_uv: np.ndarray | None = None
    pixel_sigma: float = 1.0
    dropped_tracks: list[int] = field(default_factory=list)

    def __post_init__(self):
        if self.gauge not in GAUGE_POLICIES:
            raise ValueError(f"unknown gauge policy {self.gauge!r}")
        if len(self.preints) != len(self.states) - 1:
            raise ValueError("need exactly one IMU factor per consecutive state pair")
        n = len(self.states)
        for idx in (self.epi_i, self.epi_j, self.obs_kf):
            if idx is not None and len(idx) and (idx.min() < 0 or idx.max() >= n):
                raise ValueError("factor references an out-of-range keyframe")

    @property
    def imu_stack(self) -> PreintegrationStack:
        key = tuple(id(p) for p in self.preints)
        cached = self.__dict__.get("_imu_stack")
        if cached is None or cached[0] != key:
            cached = (key, PreintegrationStack.of(self.preints))
            self.__dict__["_imu_stack"] = cached
        return cached[1]

    @property
    def n_states(self) -> int:
        return len(self.states)

    @property
    def n_landmarks(self) -> int:
        return 0 if self.landmarks is None else len(self.landmarks)

    @property
    def error_dim(self) -> int:
        return ERROR_DIM * self.n_states + 3 * self.n_landmarks

    @property
    def n_visual_factors(self) -> int:
        if self.mode == "structureless":
            return len(self.epi_i)
        return len(self.obs_kf)

    @property
    def epipolar_factors(self) -> list[EpipolarFactor]:
        if self.mode != "structureless":
            return []
        return [EpipolarFactor(int(i), int(j), zi, zj, float(s)) for i, j, zi, zj, s in
                zip(self.epi_i, self.epi_j, self.epi_zi, self.epi_zj, self.epi_sigma)]


def _check_window(states, preints, tracks):
    if len(states) < 2:
        raise ValueError(f"need at least 2 keyframes, got {len(states)}")
    if len(preints) != len(states) - 1:
        raise ValueError(f"expected {len(states) - 1} IMU factors, got {len(preints)}")
    usable = [t for t in tracks if len(t) >= 2]
    if not usable:
        raise ValueError("no feature track is observed by two or more keyframes; "
                         "translation is unconstrained")
    for t in usable:
        for o in t.observations:
            if not 0 <= o.keyframe < len(states):
                raise ValueError(f"track {t.feature_id} references keyframe {o.keyframe} "
                                 f"outside the window of {len(states)}")
    return usable


def build_structureless(states: Sequence[KeyframeState], preints: Sequence[PreintegratedImu],
                        tracks: Sequence[FeatureTrack], ext: Extrinsics,
                        config: ProblemConfig | None = None,
                        intr: CameraIntrinsics | None = None) -> InitializationProblem:
    config = config or ProblemConfig()
    usable = _check_window(states, preints, tracks)
    sigma = config.epipolar_sigma(intr)
    factors = build_epipolar_factors(usable, config.pairing, sigma)
    return InitializationProblem(
        "structureless", [s.copy() for s in states], list(preints), ext,
        gravity_vector(config.gravity), config.loss, config.gauge, config.settings,
        epi_i=np.array([f.i for f in factors], dtype=int),
        epi_j=np.array([f.j for f in factors], dtype=int),
        epi_zi=np.array([f.z_i for f in factors], dtype=float).reshape(-1, 3),
        epi_zj=np.array([f.z_j for f in factors], dtype=float).reshape(-1, 3),
        epi_sigma=np.full(len(factors), sigma),
        intr=intr,
    )


def triangulate(centers, directions):
    """Least-squares intersection of rays ``c_k + s d_k``.

    Minimizes the summed squared perpendicular distances to the rays.
    Returns ``None`` when the rays are (close to) parallel.
    """
    A = np.zeros((3, 3))
    b = np.zeros(3)
    for c, d in zip(centers, directions):
        d = d / np.linalg.norm(d)
        P = np.eye(3) - np.outer(d, d)
        A += P
        b += P @ c
    if np.linalg.cond(A) > 1e8:
        return None
    return np.linalg.solve(A, b)


def build_structure_based(states: Sequence[KeyframeState], preints: Sequence[PreintegratedImu],
                          tracks: Sequence[FeatureTrack], intr: CameraIntrinsics,
                          ext: Extrinsics,
                          config: ProblemConfig | None = None) -> InitializationProblem:
    """Problem with one Euclidean landmark per track, triangulated from the
    initial states.  Tracks that fail triangulation or cheirality are dropped
    and listed in ``dropped_tracks``."""
    config = config or ProblemConfig()
    usable = _check_window(states, preints, tracks)
    cam_R = [s.R @ ext.R for s in states]
    cam_p = [s.p + s.R @ ext.translation for s in states]

    landmarks, ids, dropped = [], [], []
    kf, lm, uv = [], [], []
    for t in usable:
        centers = [cam_p[o.keyframe] for o in t.observations]
        dirs = [cam_R[o.keyframe] @ o.bearing for o in t.observations]
        X = triangulate(centers, dirs)
        ok = X is not None and all(
            (cam_R[o.keyframe].T @ (X - cam_p[o.keyframe]))[2] > 1e-3 for o in t.observations)
        if not ok:
            dropped.append(t.feature_id)
            continue
        for o in t.observations:
            kf.append(o.keyframe)
            lm.append(len(landmarks))
            uv.append(o.uv)
        landmarks.append(X)
        ids.append(t.feature_id)
    if not landmarks:
        raise ValueError("every track failed triangulation")
    return InitializationProblem(
        "structure-based", [s.copy() for s in states], list(preints), ext,
        gravity_vector(config.gravity), config.loss, config.gauge, config.settings,
        intr=intr, landmarks=np.array(landmarks), landmark_ids=ids,
        obs_kf=np.array(kf, dtype=int), obs_lm=np.array(lm, dtype=int),
        obs_uv=np.array(uv, dtype=float).reshape(-1, 2),
        pixel_sigma=config.pixel_sigma, dropped_tracks=dropped,
    )
