"""Levenberg-Marquardt over keyframe error states (and landmarks).

The objective is ``Σ ||r_imu||²_Σ + Σ ρ(||r_vis||²_Σ)``.  Robust terms are
handled by iteratively reweighted normal equations, which give the exact
gradient of the objective.  Normal equations are dense: a ten-keyframe
window has 150 error-state dimensions.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve

from .factors import epipolar_batch, reprojection_batch
from .geometry import euler_zyx, rot_from_euler_zyx, rot_to_quat, rot_x
from .preintegration import imu_residual_batch
from .problem import InitializationProblem
from .state import ERROR_DIM, KeyframeState

_POSE_COLS = np.array([0, 1, 2, 6, 7, 8])


@dataclass
class SolveReport:
    iterations: int
    initial_cost: float
    final_cost: float
    cost_trace: list[float]
    termination: str
    solve_time_ms: float
    n_degenerate: int = 0

    def to_dict(self):
        return {
            "iterations": self.iterations,
            "initial_cost": self.initial_cost,
            "final_cost": self.final_cost,
            "cost_trace": list(self.cost_trace),
            "termination": self.termination,
            "t_i_ms": self.solve_time_ms,
            "n_degenerate": self.n_degenerate,
        }


@dataclass
class SolveResult:
    states: list[KeyframeState]
    report: SolveReport
    landmarks: np.ndarray | None = None

    def __iter__(self):
        # allows ``states, report = solve(problem)``
        return iter((self.states, self.report))


@dataclass
class _Linearization:
    cost: float
    H: np.ndarray | None
    b: np.ndarray | None
    mask: np.ndarray | None = field(default=None)
    valid: np.ndarray | None = field(default=None)


def _pose_arrays(states):
    R = np.stack([s.R for s in states])
    p = np.stack([s.p for s in states])
    return R, p


def _scatter_pose_blocks(H, b, K, ia, ib, Ja, Jb, w, r):
    """Add weighted normal-equation terms of two-keyframe pose factors.

    ``Ja``/``Jb`` are ``(M, d, 6)`` for residual dimension ``d``.
    """
    M, d, _ = Ja.shape
    J = np.zeros((M, d, K, 6))
    rows = np.arange(M)
    J[rows, :, ia] = Ja
    J[rows, :, ib] += Jb
    J = J.reshape(M * d, 6 * K)
    wJ = J * np.repeat(w, d)[:, None]
    idx = (ERROR_DIM * np.arange(K)[:, None] + _POSE_COLS).ravel()
    H[np.ix_(idx, idx)] += wJ.T @ J
    b[idx] += wJ.T @ r.ravel()


def _imu_terms(problem, states, H=None, b=None):
    with_jac = H is not None
    stack = problem.imu_stack
    arrays = [np.stack([getattr(s, name) for s in states]) for name in ("p", "v", "q", "ba", "bg")]
    r, Ji, Jj = imu_residual_batch(stack, *arrays, problem.gravity, with_jac)
    W = stack.whitening
    rw = np.einsum("kab,kb->ka", W, r)
    cost = float(np.sum(rw * rw))
    if with_jac:
        J = W @ np.concatenate([Ji, Jj], axis=2)
        JtJ = np.swapaxes(J, 1, 2) @ J
        Jtr = np.einsum("kab,ka->kb", J, rw)
        for k in range(len(stack)):
            s = slice(ERROR_DIM * k, ERROR_DIM * (k + 2))
            H[s, s] += JtJ[k]
            b[s] += Jtr[k]
    return cost


def _epipolar_terms(problem, states, mask=None, H=None, b=None):
    R, p = _pose_arrays(states)
    with_jac = H is not None
    r, Ji, Jj, valid = epipolar_batch(R, p, problem.epi_i, problem.epi_j, problem.epi_zi,
                                      problem.epi_zj, problem.ext,
                                      problem.settings.min_baseline, with_jac)
    fresh = valid
    mask = valid if mask is None else mask & valid
    rw = np.where(mask, r / problem.epi_sigma, 0.0)
    cost = float(np.sum(problem.loss.rho(rw * rw)))
    if with_jac:
        w = problem.loss.weight(np.abs(rw)) * mask
        sig = problem.epi_sigma[:, None, None]
        _scatter_pose_blocks(H, b, len(states), problem.epi_i, problem.epi_j,
                             Ji[:, None, :] / sig, Jj[:, None, :] / sig, w, rw[:, None])
    return cost, mask, fresh


def _reprojection_terms(problem, states, landmarks, mask=None, H=None, b=None):
    R, p = _pose_arrays(states)
    with_jac = H is not None
    r, Jp, Jl, valid = reprojection_batch(R, p, problem.obs_kf, landmarks, problem.obs_lm,
                                          problem.obs_uv, problem.intr, problem.ext, with_jac)
    fresh = valid
    mask = valid if mask is None else mask & valid
    rw = np.where(mask[:, None], r / problem.pixel_sigma, 0.0)
    norms = np.linalg.norm(rw, axis=1)
    cost = float(np.sum(problem.loss.rho(norms * norms)))
    if with_jac:
        K = len(states)
        L = len(landmarks)
        w = problem.loss.weight(norms) * mask
        Jp = Jp / problem.pixel_sigma
        Jl = Jl / problem.pixel_sigma
        kf, lm = problem.obs_kf, problem.obs_lm
        # pose-pose blocks (single keyframe per observation)
        blocks = np.zeros((K, 6, 6))
        wJp = Jp * w[:, None, None]
        np.add.at(blocks, kf, np.einsum("mra,mrb->mab", wJp, Jp))
        idx = ERROR_DIM * np.arange(K)[:, None] + _POSE_COLS
        for k in range(K):
            H[np.ix_(idx[k], idx[k])] += blocks[k]
        gp = np.zeros((K, 6))
        np.add.at(gp, kf, np.einsum("mra,mr->ma", wJp, rw))
        b[idx.ravel()] += gp.ravel()
        # landmark blocks
        off = ERROR_DIM * K
        wJl = Jl * w[:, None, None]
        ll = np.zeros((L, 3, 3))
        np.add.at(ll, lm, np.einsum("mra,mrb->mab", wJl, Jl))
        gl = np.zeros((L, 3))
        np.add.at(gl, lm, np.einsum("mra,mr->ma", wJl, rw))
        lidx = off + 3 * np.arange(L)[:, None] + np.arange(3)
        for l in range(L):
            H[np.ix_(lidx[l], lidx[l])] += ll[l]
        b[lidx.ravel()] += gl.ravel()
        pl = np.zeros((K, L, 6, 3))
        np.add.at(pl, (kf, lm), np.einsum("mra,mrb->mab", wJp, Jl))
        Hpl = pl.transpose(0, 2, 1, 3).reshape(6 * K, 3 * L)
        rows = idx.ravel()
        cols = lidx.ravel()
        H[np.ix_(rows, cols)] += Hpl
        H[np.ix_(cols, rows)] += Hpl.T
    return cost, mask, fresh


def _evaluate(problem, states, landmarks, mask=None, jacobians=False):
    n = ERROR_DIM * len(states) + (0 if landmarks is None else 3 * len(landmarks))
    H = np.zeros((n, n)) if jacobians else None
    b = np.zeros(n) if jacobians else None
    cost = _imu_terms(problem, states, H, b)
    if problem.mode == "structureless":
        c, mask, fresh = _epipolar_terms(problem, states, mask, H, b)
    else:
        c, mask, fresh = _reprojection_terms(problem, states, landmarks, mask, H, b)
    return _Linearization(cost + c, H, b, mask, fresh)


def total_cost(problem: InitializationProblem, states=None, landmarks=None) -> float:
    """Objective value; defaults to the problem's own initial estimate."""
    states = problem.states if states is None else states
    landmarks = problem.landmarks if landmarks is None else landmarks
    return _evaluate(problem, states, landmarks).cost


def gradient(problem: InitializationProblem, states=None, landmarks=None):
    """Gradient of :func:`total_cost` over the full (un-gauged) error state."""
    states = problem.states if states is None else states
    landmarks = problem.landmarks if landmarks is None else landmarks
    lin = _evaluate(problem, states, landmarks, jacobians=True)
    return 2.0 * lin.b


# -------------------------------------------------------------------- gauge

def gauge_basis(problem: InitializationProblem, states) -> np.ndarray:
    """Columns spanning the free error-state directions.

    With ``fix-first-posyaw`` the first keyframe loses its three position
    columns, and its rotation is restricted to pitch and roll directions of
    a ZYX Euler parameterisation, so yaw stays fixed exactly under updates.
    """
    n = ERROR_DIM * len(states) + 3 * problem.n_landmarks
    if problem.gauge == "none":
        return np.eye(n)
    _, _, roll = euler_zyx(states[0].R)
    first = np.zeros((ERROR_DIM, 11))
    first[3:6, 0:3] = np.eye(3)                      # velocity
    first[6:9, 3] = rot_x(roll).T @ np.array([0.0, 1.0, 0.0])  # pitch
    first[6:9, 4] = np.array([1.0, 0.0, 0.0])        # roll
    first[9:15, 5:11] = np.eye(6)                    # biases
    T = np.zeros((n, n - 4))
    T[:ERROR_DIM, :11] = first
    T[ERROR_DIM:, 11:] = np.eye(n - ERROR_DIM)
    return T


def _reduce(problem, states, lin):
    """Normal equations projected onto :func:`gauge_basis`."""
    if problem.gauge == "none":
        return lin.H, lin.b
    F = gauge_basis(problem, states)[:ERROR_DIM, :11]
    H, b = lin.H, lin.b
    n = H.shape[0] - 4
    Hr = np.empty((n, n))
    top = F.T @ H[:ERROR_DIM]
    Hr[:11, :11] = top[:, :ERROR_DIM] @ F
    Hr[:11, 11:] = top[:, ERROR_DIM:]
    Hr[11:, :11] = Hr[:11, 11:].T
    Hr[11:, 11:] = H[ERROR_DIM:, ERROR_DIM:]
    return Hr, np.concatenate([F.T @ b[:ERROR_DIM], b[ERROR_DIM:]])


def _retract(problem, states, landmarks, dx):
    """Apply a reduced step ``dx`` (gauge coordinates)."""
    out = []
    if problem.gauge == "none":
        full = dx
        out.append(states[0].boxplus(full[:ERROR_DIM]))
        rest = full[ERROR_DIM:]
    else:
        s0 = states[0]
        yaw, pitch, roll = euler_zyx(s0.R)
        q0 = rot_to_quat(rot_from_euler_zyx(yaw, pitch + dx[3], roll + dx[4]))
        out.append(KeyframeState(s0.t_ns, s0.p, s0.v + dx[0:3], q0,
                                 s0.ba + dx[5:8], s0.bg + dx[8:11]))
        rest = dx[11:]
    for k, s in enumerate(states[1:]):
        out.append(s.boxplus(rest[ERROR_DIM * k:ERROR_DIM * (k + 1)]))
    new_lm = None
    if landmarks is not None:
        off = ERROR_DIM * (len(states) - 1)
        new_lm = landmarks + rest[off:].reshape(-1, 3)
    return out, new_lm


def apply_gauge_fix(problem: InitializationProblem,
                    policy: str = "fix-first-posyaw") -> InitializationProblem:
    """Set the gauge policy used by :func:`solve`."""
    from dataclasses import replace
    return replace(problem, gauge=policy)


# ------------------------------------------------------------------- solver

def _damping_diagonal(H, kind):
    if kind == "identity":
        return np.ones(H.shape[0])
    diag = np.diag(H).copy()
    return np.maximum(diag, 1e-12 * max(diag.max(), 1.0))


def solve(problem: InitializationProblem) -> SolveResult:
    """Levenberg-Marquardt refinement of ``problem``'s initial estimate."""
    tic = time.perf_counter()
    cfg = problem.settings
    states = [s.copy() for s in problem.states]
    landmarks = None if problem.landmarks is None else problem.landmarks.copy()

    lin = _evaluate(problem, states, landmarks, jacobians=True)
    initial_cost = lin.cost
    trace = [lin.cost]
    lam = cfg.initial_lambda
    reason = "max iterations"
    iterations = 0

    while iterations < cfg.max_iterations:
        iterations += 1
        H, g = _reduce(problem, states, lin)
        if np.max(np.abs(2.0 * g)) < cfg.grad_tol:
            reason = "gradient tolerance"
            break
        damping = _damping_diagonal(H, cfg.damping)

        step = None
        while lam <= cfg.max_lambda:
            try:
                factor = cho_factor(H + lam * np.diag(damping), lower=True, check_finite=False)
                step = -cho_solve(factor, g, check_finite=False)
                if np.all(np.isfinite(step)):
                    break
                step = None
            except LinAlgError:
                pass
            lam *= cfg.lambda_up
        if step is None:
            reason = "numerical failure"
            break

        scale = np.linalg.norm(np.concatenate([s.to_vector() for s in states]))
        if np.linalg.norm(step) < cfg.step_tol * (1.0 + scale):
            reason = "step tolerance"
            break

        new_states, new_lm = _retract(problem, states, landmarks, step)
        # trial cost uses the gating of the current linearization point
        trial = _evaluate(problem, new_states, new_lm, mask=lin.mask, jacobians=True)
        new_cost = trial.cost
        if np.isfinite(new_cost) and new_cost < lin.cost:
            rel = (lin.cost - new_cost) / max(lin.cost, 1e-300)
            states, landmarks = new_states, new_lm
            trace.append(new_cost)
            lam = max(lam * cfg.lambda_down, 1e-12)
            if np.array_equal(trial.mask, trial.valid):
                trial.mask = trial.valid
                lin = trial
            else:
                lin = _evaluate(problem, states, landmarks, jacobians=True)
            if rel < cfg.rel_cost_tol:
                reason = "relative cost decrease"
                break
        else:
            lam *= cfg.lambda_up
            if lam > cfg.max_lambda:
                reason = "damping limit"
                break

    n_bad = int(np.sum(~lin.mask)) if lin.mask is not None else 0
    report = SolveReport(iterations, initial_cost, lin.cost, trace, reason,
                         1e3 * (time.perf_counter() - tic), n_bad)
    return SolveResult(states, report, landmarks)
