"""Trajectory accuracy metrics under the 4-DoF position+yaw gauge."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .geometry import quat_boxminus, quat_mul, rot_to_quat, rot_z
from .state import KeyframeState

ASSOCIATION_TOLERANCE_NS = 1_000_000
METRICS_HEADER = "window_index,t_start_ns,ate_pos_m,ate_rot_deg,vel_rmse_mps,solve_ms"


class AssociationError(ValueError):
    """Estimate and reference share too few timestamps."""


@dataclass(frozen=True)
class PosYawAlignment:
    """``p_ref ≈ Rz(yaw) p_est + translation``."""

    yaw: float
    translation: np.ndarray
    degenerate: bool = False

    @property
    def R(self) -> np.ndarray:
        return rot_z(self.yaw)

    def apply(self, states: Sequence[KeyframeState]) -> list[KeyframeState]:
        R = self.R
        qz = rot_to_quat(R)
        return [KeyframeState(s.t_ns, R @ s.p + self.translation, R @ s.v,
                              quat_mul(qz, s.q), s.ba.copy(), s.bg.copy()) for s in states]


def associate(estimate: Sequence[KeyframeState], reference: Sequence[KeyframeState],
              tolerance_ns: int = ASSOCIATION_TOLERANCE_NS):
    """Nearest-timestamp pairs ``(estimate_subset, reference_subset)``."""
    ref_t = np.array([s.t_ns for s in reference], dtype=np.int64)
    if len(ref_t) == 0 or len(estimate) == 0:
        raise AssociationError("empty trajectory")
    order = np.argsort(ref_t)
    ref_sorted = ref_t[order]
    est, ref = [], []
    for s in estimate:
        k = np.searchsorted(ref_sorted, s.t_ns)
        cands = [c for c in (k - 1, k) if 0 <= c < len(ref_sorted)]
        best = min(cands, key=lambda c: abs(int(ref_sorted[c]) - s.t_ns))
        if abs(int(ref_sorted[best]) - s.t_ns) <= tolerance_ns:
            est.append(s)
            ref.append(reference[order[best]])
    if not est:
        raise AssociationError(f"no timestamps match within {tolerance_ns} ns")
    return est, ref


def align_posyaw_positions(p_est, p_ref) -> PosYawAlignment:
    """Closed-form yaw + translation minimising summed squared position error."""
    p_est = np.asarray(p_est, dtype=float)
    p_ref = np.asarray(p_ref, dtype=float)
    if len(p_est) < 2 or p_est.shape != p_ref.shape:
        raise ValueError("need at least two paired positions")
    mu_e = p_est.mean(axis=0)
    mu_r = p_ref.mean(axis=0)
    e = p_est - mu_e
    r = p_ref - mu_r
    s_cos = np.sum(e[:, 0] * r[:, 0] + e[:, 1] * r[:, 1])
    s_sin = np.sum(e[:, 0] * r[:, 1] - e[:, 1] * r[:, 0])
    scale = np.sum(np.hypot(e[:, 0], e[:, 1]) * np.hypot(r[:, 0], r[:, 1]))
    degenerate = not scale > 1e-12 * max(1.0, np.abs(p_ref).max(), np.abs(p_est).max()) ** 2
    yaw = 0.0 if degenerate else float(np.arctan2(s_sin, s_cos))
    return PosYawAlignment(yaw, mu_r - rot_z(yaw) @ mu_e, degenerate)


def align_posyaw(estimate: Sequence[KeyframeState],
                 reference: Sequence[KeyframeState]) -> PosYawAlignment:
    est, ref = associate(estimate, reference)
    return align_posyaw_positions([s.p for s in est], [s.p for s in ref])


def _rmse(x) -> float:
    x = np.asarray(x, dtype=float)
    return float(np.sqrt(np.mean(x * x)))


def compute_ate(estimate: Sequence[KeyframeState], reference: Sequence[KeyframeState],
                align: bool = True) -> tuple[float, float]:
    """``(position RMSE [m], rotation RMSE [deg])`` after position+yaw alignment.

    Rotation error is the geodesic angle between aligned and reference
    orientations.
    """
    est, ref = associate(estimate, reference)
    if align:
        est = align_posyaw_positions([s.p for s in est], [s.p for s in ref]).apply(est)
    pos = [np.linalg.norm(a.p - b.p) for a, b in zip(est, ref)]
    rot = [np.linalg.norm(quat_boxminus(a.q, b.q)) for a, b in zip(est, ref)]
    return _rmse(pos), float(np.degrees(_rmse(rot)))


def compute_velocity_rmse(estimate: Sequence[KeyframeState],
                          reference: Sequence[KeyframeState]) -> float:
    """RMSE of speed differences; insensitive to velocity direction."""
    est, ref = associate(estimate, reference)
    return _rmse([np.linalg.norm(a.v) - np.linalg.norm(b.v) for a, b in zip(est, ref)])


def aggregate_solve_time(times_ms) -> float:
    times = np.asarray(list(times_ms), dtype=float)
    if times.size == 0:
        raise ValueError("no solve times to aggregate")
    return float(times.mean())


@dataclass(frozen=True)
class WindowMetrics:
    window_index: int
    t_start_ns: int
    ate_position: float
    ate_rotation: float
    velocity_rmse: float
    solve_time: float

    def row(self) -> str:
        return (f"{self.window_index},{self.t_start_ns},{self.ate_position!r},"
                f"{self.ate_rotation!r},{self.velocity_rmse!r},{self.solve_time!r}")


def evaluate_window(estimate, reference, solve_time_ms: float = 0.0,
                    window_index: int = 0) -> WindowMetrics:
    pos, rot = compute_ate(estimate, reference)
    return WindowMetrics(window_index, int(estimate[0].t_ns), pos, rot,
                         compute_velocity_rmse(estimate, reference), float(solve_time_ms))


@dataclass
class MetricsReport:
    windows: list[WindowMetrics] = field(default_factory=list)

    def _mean(self, attr) -> float:
        if not self.windows:
            raise ValueError("report has no windows")
        return float(np.mean([getattr(w, attr) for w in self.windows]))

    @property
    def ate_position(self) -> float:
        return self._mean("ate_position")

    @property
    def ate_rotation(self) -> float:
        return self._mean("ate_rotation")

    @property
    def velocity_rmse(self) -> float:
        return self._mean("velocity_rmse")

    @property
    def solve_time(self) -> float:
        return aggregate_solve_time(w.solve_time for w in self.windows)

    def lines(self) -> list[str]:
        out = [METRICS_HEADER] + [w.row() for w in self.windows]
        out.append(f"Avg,,{self.ate_position!r},{self.ate_rotation!r},"
                   f"{self.velocity_rmse!r},{self.solve_time!r}")
        return out

    def write_csv(self, path):
        with open(Path(path), "w", encoding="utf-8", newline="\n") as fh:
            fh.write("\n".join(self.lines()) + "\n")


def write_aligned_tum(path, estimate, reference):
    """Estimate trajectory after position+yaw alignment, in TUM format."""
    from .dataio import write_tum

    est, ref = associate(estimate, reference)
    write_tum(path, align_posyaw_positions([s.p for s in est], [s.p for s in ref]).apply(est))
