"""Dataset bundle and result files.

A bundle is a directory holding

* ``imu.csv``         ``timestamp_ns, wx, wy, wz, ax, ay, az`` (EuRoC ``imu0`` order)
* ``keyframes.csv``   ``timestamp_ns``
* ``tracks.csv``      ``feature_id, keyframe_timestamp_ns, u_px, v_px``
* ``calib.txt``       ``key = value`` lines
* ``groundtruth.csv`` / ``initial.csv`` (optional)
  ``timestamp_ns, px, py, pz, qw, qx, qy, qz, vx, vy, vz, bax, bay, baz, bgx, bgy, bgz``

Files are UTF-8 with LF endings; lines starting with ``#`` are comments.
Floats are written with ``repr`` so a save/load cycle is exact.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .factors import FeatureTrack, Observation
from .geometry import CameraIntrinsics, Extrinsics
from .preintegration import ImuMeasurements, ImuNoiseModel
from .state import KeyframeState

REQUIRED_FILES = ("imu.csv", "keyframes.csv", "tracks.csv", "calib.txt")
STATE_HEADER = ("# timestamp_ns,px,py,pz,qw,qx,qy,qz,vx,vy,vz,"
                "bax,bay,baz,bgx,bgy,bgz")


class BundleError(ValueError):
    """Base class for malformed or inconsistent bundle contents."""


class MissingFileError(BundleError):
    pass


class MalformedRowError(BundleError):
    pass


class TimestampOrderError(BundleError):
    pass


class DanglingReferenceError(BundleError):
    pass


@dataclass(frozen=True)
class Calibration:
    intrinsics: CameraIntrinsics
    extrinsics: Extrinsics
    gravity: float = 9.81
    noise: ImuNoiseModel = field(default_factory=ImuNoiseModel)
    pixel_sigma: float = 1.0

    def __eq__(self, other):
        if not isinstance(other, Calibration):
            return NotImplemented
        return (self.intrinsics == other.intrinsics
                and np.array_equal(self.extrinsics.rotation, other.extrinsics.rotation)
                and np.array_equal(self.extrinsics.translation, other.extrinsics.translation)
                and self.gravity == other.gravity and self.noise == other.noise
                and self.pixel_sigma == other.pixel_sigma)


@dataclass
class DatasetBundle:
    imu: ImuMeasurements
    keyframe_ns: np.ndarray
    tracks: list[FeatureTrack]
    calib: Calibration
    groundtruth: list[KeyframeState] | None = None
    initial: list[KeyframeState] | None = None
    landmarks: np.ndarray | None = None  # simulator only, never written

    def __post_init__(self):
        self.keyframe_ns = np.asarray(self.keyframe_ns, dtype=np.int64)


# ------------------------------------------------------------------ writing

def _fmt(x) -> str:
    return repr(float(x))


def _write_lines(path: Path, lines):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for line in lines:
            fh.write(line + "\n")


def _state_row(s: KeyframeState) -> str:
    return ",".join([str(s.t_ns)] + [_fmt(x) for x in
                                     np.concatenate([s.p, s.q, s.v, s.ba, s.bg])])


def write_states(path, states):
    _write_lines(Path(path), [STATE_HEADER] + [_state_row(s) for s in states])


def write_calibration(path, calib: Calibration):
    c = calib.intrinsics
    e = calib.extrinsics
    n = calib.noise
    items = [
        ("fx", c.fx), ("fy", c.fy), ("cx", c.cx), ("cy", c.cy),
        ("k1", c.k1), ("k2", c.k2), ("p1", c.p1), ("p2", c.p2),
        ("width", c.width), ("height", c.height),
        ("ext_qw", e.rotation[0]), ("ext_qx", e.rotation[1]),
        ("ext_qy", e.rotation[2]), ("ext_qz", e.rotation[3]),
        ("ext_px", e.translation[0]), ("ext_py", e.translation[1]),
        ("ext_pz", e.translation[2]),
        ("gravity", calib.gravity),
        ("gyro_noise", n.gyro_noise), ("accel_noise", n.accel_noise),
        ("gyro_walk", n.gyro_walk), ("accel_walk", n.accel_walk),
        ("pixel_sigma", calib.pixel_sigma),
    ]
    lines = ["# camera intrinsics (pinhole, radtan), camera-to-IMU extrinsics, IMU noise"]
    for key, val in items:
        lines.append(f"{key} = {val}" if isinstance(val, int) else f"{key} = {_fmt(val)}")
    _write_lines(Path(path), lines)


def save_bundle(bundle: DatasetBundle, directory):
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    imu = bundle.imu
    _write_lines(d / "imu.csv", ["#timestamp [ns],w_x,w_y,w_z,a_x,a_y,a_z"] + [
        ",".join([str(int(t))] + [_fmt(x) for x in np.concatenate([g, a])])
        for t, g, a in zip(imu.t_ns, imu.gyro, imu.accel)])
    _write_lines(d / "keyframes.csv", ["# timestamp_ns"] + [str(int(t)) for t in bundle.keyframe_ns])
    rows = ["# feature_id,keyframe_timestamp_ns,u_px,v_px"]
    for tr in bundle.tracks:
        for o in tr.observations:
            rows.append(f"{tr.feature_id},{int(bundle.keyframe_ns[o.keyframe])},"
                        f"{_fmt(o.uv[0])},{_fmt(o.uv[1])}")
    _write_lines(d / "tracks.csv", rows)
    write_calibration(d / "calib.txt", bundle.calib)
    if bundle.groundtruth is not None:
        write_states(d / "groundtruth.csv", bundle.groundtruth)
    if bundle.initial is not None:
        write_states(d / "initial.csv", bundle.initial)
    return d


# ------------------------------------------------------------------ reading

def _rows(path: Path, n_cols: int | None = None):
    """Yield ``(line_number, fields)`` for non-comment lines of a CSV file."""
    if not path.exists():
        raise MissingFileError(f"{path}: required file is missing")
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            fields = [f.strip() for f in line.split(",")]
            if n_cols is not None and len(fields) != n_cols:
                raise MalformedRowError(
                    f"{path}:{lineno}: expected {n_cols} columns, found {len(fields)}")
            yield lineno, fields


def _parse(path, lineno, fields, kinds):
    try:
        return [int(f) if k == "i" else float(f) for f, k in zip(fields, kinds)]
    except ValueError:
        raise MalformedRowError(f"{path}:{lineno}: unparseable value in {fields!r}") from None


def _check_increasing(path, stamps, linenos):
    for k in range(1, len(stamps)):
        if stamps[k] <= stamps[k - 1]:
            raise TimestampOrderError(
                f"{path}:{linenos[k]}: timestamp {stamps[k]} does not increase "
                f"(previous {stamps[k - 1]})")


def load_imu(path) -> ImuMeasurements:
    """Read an ``imu.csv`` file; EuRoC ``imu0/data.csv`` files load as-is."""
    path = Path(path)
    t, vals, lines = [], [], []
    for lineno, f in _rows(path, 7):
        row = _parse(path, lineno, f, "i" + "f" * 6)
        t.append(row[0])
        vals.append(row[1:])
        lines.append(lineno)
    _check_increasing(path, t, lines)
    vals = np.array(vals, dtype=float).reshape(-1, 6)
    return ImuMeasurements(np.array(t, dtype=np.int64), vals[:, :3], vals[:, 3:])


def load_states(path) -> list[KeyframeState]:
    path = Path(path)
    states, stamps, lines = [], [], []
    for lineno, f in _rows(path, 17):
        row = _parse(path, lineno, f, "i" + "f" * 16)
        x = np.array(row[1:])
        if not abs(np.linalg.norm(x[3:7]) - 1.0) < 1e-6:
            raise MalformedRowError(f"{path}:{lineno}: quaternion is not unit norm")
        states.append(KeyframeState(row[0], x[0:3], x[7:10], x[3:7], x[10:13], x[13:16]))
        stamps.append(row[0])
        lines.append(lineno)
    _check_increasing(path, stamps, lines)
    return states


def load_calibration(path) -> Calibration:
    path = Path(path)
    if not path.exists():
        raise MissingFileError(f"{path}: required file is missing")
    values = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise MalformedRowError(f"{path}:{lineno}: expected 'key = value'")
            key, val = (s.strip() for s in line.split("=", 1))
            try:
                values[key] = float(val)
            except ValueError:
                raise MalformedRowError(f"{path}:{lineno}: bad value for {key!r}") from None
    required = ("fx", "fy", "cx", "cy")
    missing = [k for k in required if k not in values]
    if missing:
        raise MalformedRowError(f"{path}: missing keys {missing}")
    g = values.get
    intr = CameraIntrinsics(g("fx"), g("fy"), g("cx"), g("cy"), g("k1", 0.0), g("k2", 0.0),
                            g("p1", 0.0), g("p2", 0.0), int(g("width", 752)),
                            int(g("height", 480)))
    ext = Extrinsics(np.array([g("ext_qw", 1.0), g("ext_qx", 0.0), g("ext_qy", 0.0),
                               g("ext_qz", 0.0)]),
                     np.array([g("ext_px", 0.0), g("ext_py", 0.0), g("ext_pz", 0.0)]))
    default = ImuNoiseModel()
    noise = ImuNoiseModel(g("gyro_noise", default.gyro_noise), g("accel_noise", default.accel_noise),
                          g("gyro_walk", default.gyro_walk), g("accel_walk", default.accel_walk))
    return Calibration(intr, ext, g("gravity", 9.81), noise, g("pixel_sigma", 1.0))


def load_bundle(directory, imu_margin_ns: int = 0) -> DatasetBundle:
    """Load and cross-validate a bundle directory.

    Tracks are returned grouped by feature id in order of first appearance,
    observations sorted by keyframe; bearings are back-projected here.
    Observations whose undistortion fails are dropped.
    """
    d = Path(directory)
    if not d.is_dir():
        raise MissingFileError(f"{d}: bundle directory does not exist")
    for name in REQUIRED_FILES:
        if not (d / name).exists():
            raise MissingFileError(f"{d / name}: required file is missing")
    calib = load_calibration(d / "calib.txt")
    imu = load_imu(d / "imu.csv")

    kf_path = d / "keyframes.csv"
    kf, kf_lines = [], []
    for lineno, f in _rows(kf_path, 1):
        kf.append(_parse(kf_path, lineno, f, "i")[0])
        kf_lines.append(lineno)
    _check_increasing(kf_path, kf, kf_lines)
    if not kf:
        raise MalformedRowError(f"{kf_path}: no keyframes")
    kf_index = {t: k for k, t in enumerate(kf)}
    if len(imu) == 0 or imu.t_ns[0] > kf[0] - imu_margin_ns or imu.t_ns[-1] < kf[-1] + imu_margin_ns:
        raise DanglingReferenceError(f"{d / 'imu.csv'}: IMU stream does not span the keyframes")

    tr_path = d / "tracks.csv"
    grouped: dict[int, list] = {}
    for lineno, f in _rows(tr_path, 4):
        fid, t, u, v = _parse(tr_path, lineno, f, "iiff")
        if t not in kf_index:
            raise DanglingReferenceError(
                f"{tr_path}:{lineno}: feature {fid} references unknown keyframe {t}")
        obs = grouped.setdefault(fid, [])
        if any(o[0] == kf_index[t] for o in obs):
            raise MalformedRowError(f"{tr_path}:{lineno}: feature {fid} observed twice in keyframe {t}")
        obs.append((kf_index[t], u, v))

    tracks = []
    intr = calib.intrinsics
    for fid, obs in grouped.items():
        obs.sort(key=lambda o: o[0])
        uv = np.array([[o[1], o[2]] for o in obs])
        bearings, ok = intr.back_project_many(uv)
        kept = [Observation(o[0], uv[n], bearings[n]) for n, o in enumerate(obs) if ok[n]]
        if kept:
            tracks.append(FeatureTrack(fid, kept))

    def optional_states(name):
        path = d / name
        if not path.exists():
            return None
        states = load_states(path)
        stamps = {s.t_ns for s in states}
        missing = [t for t in kf if t not in stamps]
        if missing:
            raise DanglingReferenceError(f"{path}: no state for keyframe {missing[0]}")
        return [s for s in states if s.t_ns in kf_index]

    return DatasetBundle(imu, np.array(kf, dtype=np.int64), tracks, calib,
                         optional_states("groundtruth.csv"), optional_states("initial.csv"))


# ------------------------------------------------------------------ results

def _tum_time(t_ns: int) -> str:
    return f"{t_ns // 1_000_000_000}.{t_ns % 1_000_000_000:09d}"


def write_tum(path, states):
    lines = ["# timestamp_s tx ty tz qx qy qz qw"]
    for s in states:
        w, x, y, z = s.q
        lines.append(" ".join([_tum_time(s.t_ns)] + [_fmt(v) for v in (*s.p, x, y, z, w)]))
    _write_lines(Path(path), lines)


def load_tum(path):
    """``(t_ns, positions, quaternions_wxyz)`` from a TUM trajectory file."""
    path = Path(path)
    if not path.exists():
        raise MissingFileError(f"{path}: file is missing")
    t, p, q = [], [], []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            f = line.split()
            if len(f) != 8:
                raise MalformedRowError(f"{path}:{lineno}: expected 8 fields")
            sec, _, frac = f[0].partition(".")
            frac = (frac + "000000000")[:9]
            t.append(int(sec) * 1_000_000_000 + int(frac))
            vals = [float(x) for x in f[1:]]
            p.append(vals[:3])
            q.append([vals[6], vals[3], vals[4], vals[5]])
    return np.array(t, dtype=np.int64), np.array(p), np.array(q)


def save_results(states, report, directory):
    """Write ``trajectory.txt`` (TUM), ``states.csv`` and ``report.json``."""
    if not states:
        raise ValueError("no states to save")
    d = Path(directory)
    try:
        d.mkdir(parents=True, exist_ok=True)
        write_tum(d / "trajectory.txt", states)
        write_states(d / "states.csv", states)
        with open(d / "report.json", "w", encoding="utf-8", newline="\n") as fh:
            json.dump(report.to_dict() if hasattr(report, "to_dict") else dict(report), fh,
                      indent=2)
            fh.write("\n")
    except OSError as exc:
        raise OSError(f"cannot write results to {d}: {exc}") from exc
    return d


def load_results(directory):
    d = Path(directory)
    with open(d / "report.json", encoding="utf-8") as fh:
        report = json.load(fh)
    return load_states(d / "states.csv"), report
