import json

import numpy as np
import pytest

from slvba.dataio import (
    DanglingReferenceError,
    MalformedRowError,
    MissingFileError,
    TimestampOrderError,
    load_bundle,
    load_calibration,
    load_imu,
    load_results,
    load_states,
    load_tum,
    save_bundle,
    save_results,
    write_calibration,
    write_states,
    write_tum,
)
from slvba.simulation import SceneSpec, SimulationConfig, simulate
from slvba.solver import SolveReport

EUROC_HEADER = ("#timestamp [ns],w_RS_S_x [rad s^-1],w_RS_S_y [rad s^-1],w_RS_S_z [rad s^-1],"
                "a_RS_S_x [m s^-2],a_RS_S_y [m s^-2],a_RS_S_z [m s^-2]")


@pytest.fixture(scope="module")
def bundle():
    return simulate(SimulationConfig(scene=SceneSpec(n_landmarks=30), seed=2))


@pytest.fixture
def saved(bundle, tmp_path):
    return save_bundle(bundle, tmp_path / "bundle")


def states_close(a, b, tol=1e-9):
    assert len(a) == len(b)
    for x, y in zip(a, b):
        assert x.t_ns == y.t_ns
        np.testing.assert_allclose(x.to_vector(), y.to_vector(), atol=tol, rtol=0)


def replace_line(path, lineno, text):
    lines = path.read_text().splitlines()
    lines[lineno - 1] = text
    path.write_text("\n".join(lines) + "\n")


def test_round_trip(bundle, saved):
    loaded = load_bundle(saved)
    assert loaded.imu == bundle.imu
    np.testing.assert_array_equal(loaded.keyframe_ns, bundle.keyframe_ns)
    assert loaded.calib == bundle.calib
    states_close(loaded.groundtruth, bundle.groundtruth, 0.0)
    states_close(loaded.initial, bundle.initial, 0.0)
    assert [t.feature_id for t in loaded.tracks] == [t.feature_id for t in bundle.tracks]
    for a, b in zip(loaded.tracks, bundle.tracks):
        assert a.keyframes == b.keyframes
        for oa, ob in zip(a.observations, b.observations):
            np.testing.assert_array_equal(oa.uv, ob.uv)
            np.testing.assert_allclose(oa.bearing, ob.bearing, atol=1e-12)


def test_files_use_lf_and_expected_columns(saved):
    raw = (saved / "imu.csv").read_bytes()
    assert b"\r" not in raw
    assert set(p.name for p in saved.iterdir()) == {
        "imu.csv", "keyframes.csv", "tracks.csv", "calib.txt", "groundtruth.csv", "initial.csv"}
    row = (saved / "tracks.csv").read_text().splitlines()[1].split(",")
    assert len(row) == 4
    row = (saved / "initial.csv").read_text().splitlines()[1].split(",")
    assert len(row) == 17


def test_optional_state_files(bundle, saved):
    (saved / "initial.csv").unlink()
    (saved / "groundtruth.csv").unlink()
    loaded = load_bundle(saved)
    assert loaded.initial is None and loaded.groundtruth is None


@pytest.mark.parametrize("name", ["imu.csv", "keyframes.csv", "tracks.csv", "calib.txt"])
def test_missing_required_file(saved, name):
    (saved / name).unlink()
    with pytest.raises(MissingFileError, match=name):
        load_bundle(saved)


def test_missing_directory(tmp_path):
    with pytest.raises(MissingFileError):
        load_bundle(tmp_path / "nowhere")


def test_dangling_track_reference_names_the_line(saved):
    path = saved / "tracks.csv"
    replace_line(path, 3, "7,123,100.0,100.0")
    with pytest.raises(DanglingReferenceError, match=r"tracks\.csv:3:"):
        load_bundle(saved)


def test_malformed_row_names_the_line(saved):
    replace_line(saved / "imu.csv", 5, "1,2,3")
    with pytest.raises(MalformedRowError, match=r"imu\.csv:5:"):
        load_bundle(saved)


def test_unparseable_value(saved):
    replace_line(saved / "keyframes.csv", 2, "not-a-time")
    with pytest.raises(MalformedRowError, match=r"keyframes\.csv:2:"):
        load_bundle(saved)


def test_non_monotone_timestamps(saved):
    path = saved / "keyframes.csv"
    lines = path.read_text().splitlines()
    lines[2], lines[3] = lines[3], lines[2]
    path.write_text("\n".join(lines) + "\n")
    with pytest.raises(TimestampOrderError, match=r"keyframes\.csv:4:"):
        load_bundle(saved)


def test_imu_must_span_keyframes(saved):
    path = saved / "imu.csv"
    lines = path.read_text().splitlines()
    path.write_text("\n".join(lines[:50]) + "\n")
    with pytest.raises(DanglingReferenceError, match="span"):
        load_bundle(saved)


def test_state_file_must_cover_keyframes(saved):
    path = saved / "initial.csv"
    lines = path.read_text().splitlines()
    path.write_text("\n".join(lines[:-1]) + "\n")
    with pytest.raises(DanglingReferenceError, match="initial"):
        load_bundle(saved)


def test_non_unit_quaternion_rejected(bundle, tmp_path):
    s = bundle.initial[0].copy()
    s.q = s.q * 2.0
    write_states(tmp_path / "s.csv", [s])
    with pytest.raises(MalformedRowError, match="unit"):
        load_states(tmp_path / "s.csv")


def test_duplicate_observation_rejected(saved):
    path = saved / "tracks.csv"
    lines = path.read_text().splitlines()
    path.write_text("\n".join(lines + [lines[1]]) + "\n")
    with pytest.raises(MalformedRowError, match="twice"):
        load_bundle(saved)


def test_calibration_round_trip_and_errors(bundle, tmp_path):
    path = tmp_path / "calib.txt"
    write_calibration(path, bundle.calib)
    assert load_calibration(path) == bundle.calib
    path.write_text("fx = 400\n")
    with pytest.raises(MalformedRowError, match="missing keys"):
        load_calibration(path)
    path.write_text("fx 400\n")
    with pytest.raises(MalformedRowError, match=":1:"):
        load_calibration(path)


def test_euroc_imu_file_parses_every_row(tmp_path):
    rng = np.random.default_rng(0)
    n = 137
    t = 1403636579758555392 + 5_000_000 * np.arange(n, dtype=np.int64)
    vals = np.c_[rng.normal(0, 0.1, (n, 3)), rng.normal([9.0, 0, -3.0], 0.3, (n, 3))]
    lines = [EUROC_HEADER] + [",".join([str(ti)] + [repr(float(v)) for v in row])
                              for ti, row in zip(t, vals)]
    path = tmp_path / "data.csv"
    path.write_bytes(("\r\n".join(lines) + "\r\n").encode())
    imu = load_imu(path)
    data_rows = sum(1 for line in path.read_text().splitlines()
                    if line and not line.startswith("#"))
    assert len(imu) == data_rows == n
    np.testing.assert_array_equal(imu.t_ns, t)
    np.testing.assert_array_equal(imu.gyro, vals[:, :3])


def test_results_round_trip(bundle, tmp_path):
    report = SolveReport(4, 10.0, 1.0, [10.0, 5.0, 2.0, 1.0], "relative cost decrease", 12.5)
    d = save_results(bundle.groundtruth, report, tmp_path / "out")
    states, loaded = load_results(d)
    states_close(states, bundle.groundtruth)
    assert loaded["t_i_ms"] == report.solve_time_ms
    assert loaded["cost_trace"] == report.cost_trace
    assert loaded["termination"] == "relative cost decrease"
    t, p, q = load_tum(d / "trajectory.txt")
    np.testing.assert_array_equal(t, [s.t_ns for s in bundle.groundtruth])
    np.testing.assert_allclose(p, [s.p for s in bundle.groundtruth], atol=1e-12)
    np.testing.assert_allclose(q, [s.q for s in bundle.groundtruth], atol=1e-12)


def test_tum_columns_are_xyzw(bundle, tmp_path):
    s = bundle.groundtruth[1]
    write_tum(tmp_path / "t.txt", [s])
    fields = (tmp_path / "t.txt").read_text().splitlines()[1].split()
    assert fields[0] == f"{s.t_ns // 10**9}.{s.t_ns % 10**9:09d}"
    np.testing.assert_allclose([float(x) for x in fields[4:]], [*s.q[1:], s.q[0]])


def test_empty_results_rejected(tmp_path):
    with pytest.raises(ValueError):
        save_results([], SolveReport(0, 0.0, 0.0, [], "", 0.0), tmp_path)


def test_unwritable_results_path(bundle, tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(OSError):
        save_results(bundle.groundtruth, SolveReport(0, 0.0, 0.0, [], "", 0.0), blocker / "out")


def test_report_json_is_plain(bundle, tmp_path):
    report = SolveReport(1, 1.0, 0.5, [1.0, 0.5], "gradient tolerance", 3.0)
    d = save_results(bundle.groundtruth, report, tmp_path)
    data = json.loads((d / "report.json").read_text())
    assert data["iterations"] == 1
    assert data["final_cost"] == 0.5

