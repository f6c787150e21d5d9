import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from slvba.evaluation import (
    METRICS_HEADER,
    AssociationError,
    MetricsReport,
    PosYawAlignment,
    WindowMetrics,
    aggregate_solve_time,
    align_posyaw,
    align_posyaw_positions,
    associate,
    compute_ate,
    compute_velocity_rmse,
    evaluate_window,
    write_aligned_tum,
)
from slvba.checks import random_quat
from slvba.dataio import load_tum
from slvba.geometry import quat_boxplus, quat_to_rot, rot_z
from slvba.state import KeyframeState


def trajectory(rng, n=10):
    return [KeyframeState(1_000_000_000 + k * 500_000_000, rng.normal(0, 2, 3),
                          rng.normal(0, 1, 3), random_quat(rng), np.zeros(3), np.zeros(3))
            for k in range(n)]


def moved(states, yaw, t):
    return PosYawAlignment(yaw, np.asarray(t, float)).apply(states)


seeds = st.integers(0, 2**32 - 1)


def test_self_alignment_is_identity(rng):
    truth = trajectory(rng)
    a = align_posyaw(truth, truth)
    assert abs(a.yaw) < 1e-12
    np.testing.assert_allclose(a.translation, 0, atol=1e-12)
    pos, rot = compute_ate(truth, truth)
    assert pos < 1e-12 and rot < 1e-12


def test_recovers_known_yaw_and_shift(rng):
    truth = trajectory(rng)
    est = moved(truth, np.radians(30), [1, 2, 3])
    a = align_posyaw(est, truth)
    assert a.yaw == pytest.approx(np.radians(-30), abs=1e-12)
    aligned = a.apply(est)
    for x, y in zip(aligned, truth):
        np.testing.assert_allclose(x.p, y.p, atol=1e-12)
    pos, rot = compute_ate(est, truth)
    assert pos < 1e-12 and rot < 1e-9


@pytest.mark.parametrize("seed", range(3))
def test_closed_form_yaw_matches_grid_search(seed):
    rng = np.random.default_rng(seed)
    p_ref = rng.normal(0, 2, (10, 3))
    p_est = (rot_z(rng.uniform(-np.pi, np.pi)) @ p_ref.T).T + rng.normal(0, 0.3, (10, 3))
    yaw = align_posyaw_positions(p_est, p_ref).yaw
    grid = np.radians(np.arange(-180.0, 180.0, 0.001))
    c, s = np.cos(grid), np.sin(grid)
    e = p_est - p_est.mean(axis=0)
    r = p_ref - p_ref.mean(axis=0)
    # horizontal squared error after rotating e by each grid yaw
    x = c[:, None] * e[:, 0] - s[:, None] * e[:, 1]
    y = s[:, None] * e[:, 0] + c[:, None] * e[:, 1]
    sse = ((x - r[:, 0]) ** 2 + (y - r[:, 1]) ** 2).sum(axis=1)
    best = grid[np.argmin(sse)]
    diff = np.degrees(np.angle(np.exp(1j * (yaw - best))))
    assert abs(diff) < 0.002


def test_coincident_points_are_degenerate():
    p = np.ones((5, 3))
    a = align_posyaw_positions(p, p + 1.0)
    assert a.degenerate and a.yaw == 0.0
    np.testing.assert_allclose(a.translation, [1, 1, 1])
    with pytest.raises(ValueError):
        align_posyaw_positions(p[:1], p[:1])


def test_uniform_offset_is_absorbed(rng):
    truth = trajectory(rng)
    est = [KeyframeState(s.t_ns, s.p + [0.05, 0, 0], s.v, s.q, s.ba, s.bg) for s in truth]
    assert compute_ate(est, truth)[0] < 1e-12


def test_ate_without_alignment(rng):
    truth = trajectory(rng)
    est = [KeyframeState(s.t_ns, s.p + [0.05, 0, 0], s.v, s.q, s.ba, s.bg) for s in truth]
    assert compute_ate(est, truth, align=False)[0] == pytest.approx(0.05)


def test_rotation_ate_is_geodesic_rms(rng):
    truth = trajectory(rng, 4)
    angles = np.radians([1.0, 2.0, 3.0, 4.0])
    est = [KeyframeState(s.t_ns, s.p, s.v, quat_boxplus(s.q, [a, 0, 0]), s.ba, s.bg)
           for s, a in zip(truth, angles)]
    _, rot = compute_ate(est, truth)
    assert rot == pytest.approx(np.sqrt(np.mean([1.0, 4.0, 9.0, 16.0])), rel=1e-9)


def test_velocity_rmse_examples(rng):
    truth = trajectory(rng, 2)
    assert compute_velocity_rmse(truth, truth) == 0.0
    ones = [KeyframeState(s.t_ns, s.p, np.array([1.0, 0, 0]), s.q, s.ba, s.bg) for s in truth]
    zeros = [KeyframeState(s.t_ns, s.p, np.zeros(3), s.q, s.ba, s.bg) for s in truth]
    assert compute_velocity_rmse(ones, zeros) == 1.0


@given(seeds)
def test_velocity_rmse_ignores_direction(seed):
    rng = np.random.default_rng(seed)
    truth = trajectory(rng)
    est = [KeyframeState(s.t_ns, s.p, quat_to_rot(random_quat(rng)) @ s.v, s.q, s.ba, s.bg)
           for s in truth]
    assert compute_velocity_rmse(est, truth) < 1e-12


def test_solve_time_mean():
    assert aggregate_solve_time([10, 20, 30]) == 20.0
    assert aggregate_solve_time([42]) == 42.0
    with pytest.raises(ValueError):
        aggregate_solve_time([])


def test_association_tolerance(rng):
    truth = trajectory(rng)
    est = [KeyframeState(s.t_ns + 900_000, s.p, s.v, s.q, s.ba, s.bg) for s in truth]
    e, r = associate(est, truth)
    assert len(e) == len(truth)
    late = [KeyframeState(s.t_ns + 2_000_000, s.p, s.v, s.q, s.ba, s.bg) for s in truth]
    with pytest.raises(AssociationError):
        compute_ate(late, truth)
    with pytest.raises(AssociationError):
        associate([], truth)


def test_partial_association_uses_matching_stamps(rng):
    truth = trajectory(rng)
    e, r = associate(truth[2:6], truth)
    assert [s.t_ns for s in r] == [s.t_ns for s in truth[2:6]]


@given(seeds)
def test_alignment_is_idempotent(seed):
    rng = np.random.default_rng(seed)
    truth = trajectory(rng)
    est = [KeyframeState(s.t_ns, s.p + rng.normal(0, 0.1, 3), s.v, s.q, s.ba, s.bg)
           for s in moved(truth, rng.uniform(-3, 3), rng.normal(0, 5, 3))]
    once = align_posyaw(est, truth).apply(est)
    again = align_posyaw(once, truth)
    assert abs(again.yaw) < 1e-10
    assert np.abs(again.translation).max() < 1e-10


@given(seeds, st.floats(-np.pi, np.pi), st.floats(-10, 10))
def test_ate_invariant_to_common_gauge(seed, yaw, shift):
    rng = np.random.default_rng(seed)
    truth = trajectory(rng)
    est = [KeyframeState(s.t_ns, s.p + rng.normal(0, 0.1, 3), s.v,
                         quat_boxplus(s.q, rng.normal(0, 0.02, 3)), s.ba, s.bg) for s in truth]
    t = [shift, -shift, 0.5 * shift]
    a = compute_ate(est, truth)
    b = compute_ate(moved(est, yaw, t), moved(truth, yaw, t))
    assert abs(a[0] - b[0]) < 1e-10
    assert abs(a[1] - b[1]) < 1e-10


def test_metrics_report_lines(rng, tmp_path):
    truth = trajectory(rng)
    rows = [evaluate_window(truth, truth, t, k) for k, t in enumerate([10.0, 20.0, 30.0])]
    report = MetricsReport(rows)
    lines = report.lines()
    assert lines[0] == METRICS_HEADER
    assert len(lines) == 5
    assert lines[-1].startswith("Avg,,")
    assert report.solve_time == 20.0
    report.write_csv(tmp_path / "m.csv")
    assert (tmp_path / "m.csv").read_text().splitlines() == lines
    with pytest.raises(ValueError):
        MetricsReport([]).ate_position


def test_window_metrics_row():
    row = WindowMetrics(3, 1500, 0.1, 0.2, 0.3, 4.0).row()
    assert row == "3,1500,0.1,0.2,0.3,4.0"


def test_aligned_tum_output(rng, tmp_path):
    truth = trajectory(rng)
    est = moved(truth, 0.4, [1, 0, 0])
    write_aligned_tum(tmp_path / "a.txt", est, truth)
    t, p, _ = load_tum(tmp_path / "a.txt")
    np.testing.assert_allclose(p, [s.p for s in truth], atol=1e-10)
