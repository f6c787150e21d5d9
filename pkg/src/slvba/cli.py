"""Command-line entry point: ``slvba {simulate,refine,eval,bench,jactest}``.

Every option may also come from ``--config FILE`` holding ``key = value``
lines (keys are option names without the leading dashes); options given on
the command line win.  Exit status: 0 success, 1 invalid input, 2
numerical failure.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import checks
from .dataio import (
    BundleError,
    Calibration,
    load_bundle,
    load_states,
    load_tum,
    save_bundle,
    save_results,
)
from .evaluation import AssociationError, MetricsReport, evaluate_window, write_aligned_tum
from .factors import RobustLoss
from .pipeline import MODES, RunConfig, perturbed_initial, refine_window, run_bench
from .problem import GAUGE_POLICIES, SolverSettings
from .simulation import (
    FAMILIES,
    PerturbationSpec,
    SceneSpec,
    SimulationConfig,
    TrajectorySpec,
    simulate,
)
from .state import KeyframeState

EXIT_OK, EXIT_INVALID, EXIT_NUMERICAL = 0, 1, 2
TRAJ_ALIASES = {"sinusoid": "sinusoid-3d", "figure8": "figure-eight"}


class CliError(Exception):
    def __init__(self, message, code=EXIT_INVALID):
        super().__init__(message)
        self.code = code


class _Parser(argparse.ArgumentParser):
    # usage errors are validation failures (exit 1), not argparse's default 2
    def error(self, message):
        raise CliError(f"{self.prog}: {message}")


# ------------------------------------------------------------------ options

def _perturbation_options(p):
    g = p.add_argument_group("initial-guess perturbation")
    g.add_argument("--position-sigma", type=float, default=0.05, help="m")
    g.add_argument("--orientation-sigma-deg", type=float, default=2.0, help="deg")
    g.add_argument("--velocity-sigma", type=float, default=0.1, help="m/s")
    g.add_argument("--accel-bias-sigma", type=float, default=0.01, help="m/s^2")
    g.add_argument("--gyro-bias-sigma", type=float, default=0.001, help="rad/s")


def _run_options(p):
    g = p.add_argument_group("refinement")
    g.add_argument("--mode", choices=MODES, default="structureless")
    g.add_argument("--pairing", choices=("all-pairs", "consecutive"), default="all-pairs")
    g.add_argument("--sigma", type=float, default=None,
                   help="epipolar noise; default derives from pixel sigma and focal length")
    g.add_argument("--pixel-sigma", type=float, default=None)
    g.add_argument("--loss", choices=("huber", "none"), default="huber")
    g.add_argument("--huber-delta", type=float, default=1.345)
    g.add_argument("--gauge", choices=GAUGE_POLICIES, default="fix-first-posyaw")
    g.add_argument("--max-iterations", type=int, default=50)
    g.add_argument("--damping", choices=("identity", "marquardt"), default="identity")
    g.add_argument("--window", type=int, default=10)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--init-from-groundtruth-perturbed", action="store_true",
                   help="build the initial guess by perturbing ground truth")
    _perturbation_options(p)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="slvba", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, help_):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", type=Path, help="key = value option file")
        return p

    p = add("simulate", "write a synthetic dataset bundle")
    p.add_argument("--traj", default="sinusoid-3d",
                   choices=sorted(set(FAMILIES) | set(TRAJ_ALIASES)))
    p.add_argument("--keyframes", type=int, default=10)
    p.add_argument("--keyframe-rate", type=float, default=2.0)
    p.add_argument("--imu-rate", type=float, default=200.0)
    p.add_argument("--amplitude", type=float, default=0.4)
    p.add_argument("--angular-rate", type=float, default=1.2)
    p.add_argument("--landmarks", type=int, default=120)
    p.add_argument("--min-views", type=int, default=2)
    p.add_argument("--pixel-sigma", type=float, default=1.0)
    p.add_argument("--noiseless", action="store_true", help="no IMU or pixel noise")
    p.add_argument("--no-initial", action="store_true", help="omit initial.csv")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=Path, required=True)
    _perturbation_options(p)

    p = add("refine", "refine one window of a bundle")
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--start", type=int, default=0, help="first keyframe of the window")
    _run_options(p)

    p = add("eval", "compare an estimate with ground truth")
    p.add_argument("--estimate", type=Path, required=True,
                   help="states.csv or a TUM trajectory")
    p.add_argument("--truth", type=Path, required=True, help="groundtruth.csv")
    p.add_argument("--out", type=Path, default=None, help="metrics CSV")
    p.add_argument("--aligned-tum", type=Path, default=None)
    p.add_argument("--solve-ms", type=float, default=0.0)

    p = add("bench", "slide the window over a bundle and tabulate metrics")
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--out", type=Path, default=None, help="metrics CSV")
    p.add_argument("--workers", type=int, default=1)
    _run_options(p)

    p = add("jactest", "finite-difference check of all analytic Jacobians")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--trials", type=int, default=100)
    p.add_argument("--tolerance", type=float, default=1e-4)
    return parser


def _read_config(path: Path) -> dict[str, str]:
    if not path.exists():
        raise CliError(f"{path}: config file not found")
    values = {}
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise CliError(f"{path}:{lineno}: expected 'key = value'")
        key, val = (s.strip() for s in line.split("=", 1))
        values[key.lstrip("-").replace("-", "_")] = val
    return values


def _subparser(parser, name):
    for action in parser._subparsers._group_actions:
        if name in action.choices:
            return action.choices[name]
    raise KeyError(name)


def parse_args(argv):
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.config is None:
        return args
    sub = _subparser(parser, args.command)
    actions = {a.dest: a for a in sub._actions}
    defaults = {}
    for key, val in _read_config(args.config).items():
        if key not in actions or key == "config":
            raise CliError(f"{args.config}: unknown option {key!r} for {args.command}")
        action = actions[key]
        if isinstance(action, argparse._StoreTrueAction):
            defaults[key] = val.lower() in ("1", "true", "yes", "on")
        else:
            defaults[key] = val  # string defaults go through the option's type
    sub.set_defaults(**defaults)
    return parser.parse_args(argv)


# ------------------------------------------------------------------ commands

def _perturbation(args, seed) -> PerturbationSpec:
    return PerturbationSpec(args.position_sigma, np.deg2rad(args.orientation_sigma_deg),
                            args.velocity_sigma, args.accel_bias_sigma, args.gyro_bias_sigma,
                            seed)


def cmd_simulate(args) -> int:
    traj = TrajectorySpec(TRAJ_ALIASES.get(args.traj, args.traj), amplitude=args.amplitude,
                          angular_rate=args.angular_rate, n_keyframes=args.keyframes,
                          keyframe_rate=args.keyframe_rate, imu_rate=args.imu_rate)
    cfg = SimulationConfig(
        trajectory=traj,
        scene=SceneSpec(n_landmarks=args.landmarks, min_views=args.min_views),
        imu_noise=not args.noiseless,
        pixel_sigma=0.0 if args.noiseless else args.pixel_sigma,
        perturbation=None if args.no_initial else _perturbation(args, 0),
        seed=args.seed,
    )
    bundle = simulate(cfg)
    # calibration records the noise level used for weighting, not the injected one
    bundle.calib = Calibration(bundle.calib.intrinsics, bundle.calib.extrinsics,
                               bundle.calib.gravity, bundle.calib.noise, args.pixel_sigma)
    save_bundle(bundle, args.out)
    print(f"wrote {len(bundle.keyframe_ns)} keyframes, {len(bundle.imu)} IMU samples, "
          f"{len(bundle.tracks)} tracks to {args.out}")
    return EXIT_OK


def _run_config(args) -> RunConfig:
    loss = RobustLoss("none") if args.loss == "none" else RobustLoss("huber", args.huber_delta)
    settings = SolverSettings(max_iterations=args.max_iterations, damping=args.damping)
    return RunConfig(args.mode, args.pairing, args.sigma, args.pixel_sigma, loss, args.gauge,
                     settings, args.window, args.seed)


def _initial_states(args, bundle):
    if args.init_from_groundtruth_perturbed:
        if bundle.groundtruth is None:
            raise CliError("--init-from-groundtruth-perturbed needs groundtruth.csv")
        return perturbed_initial(bundle, _perturbation(args, args.seed))
    if bundle.initial is None:
        raise CliError("bundle has no initial.csv; pass --init-from-groundtruth-perturbed")
    return bundle.initial


def cmd_refine(args) -> int:
    config = _run_config(args)
    bundle = load_bundle(args.data)
    initial = _initial_states(args, bundle)
    result = refine_window(bundle, initial, args.start, config)
    rep = result.report
    save_results(result.states, rep, args.out)
    print(f"final cost {rep.final_cost:.6g}  iterations {rep.iterations}  "
          f"solve time {rep.solve_time_ms:.2f} ms  ({rep.termination})")
    return EXIT_NUMERICAL if rep.termination == "numerical failure" else EXIT_OK


def _load_estimate(path: Path) -> list[KeyframeState]:
    with open(path, encoding="utf-8") as fh:
        first = next((ln for ln in fh if ln.strip() and not ln.startswith("#")), "")
    if "," in first:
        return load_states(path)
    t, p, q = load_tum(path)
    # TUM files carry no velocity; the velocity metric is then meaningless
    return [KeyframeState(int(ti), pi, np.full(3, np.nan), qi, np.zeros(3), np.zeros(3))
            for ti, pi, qi in zip(t, p, q)]


def cmd_eval(args) -> int:
    estimate = _load_estimate(args.estimate)
    truth = load_states(args.truth)
    if len(estimate) < 2:
        raise CliError(f"{args.estimate}: need at least two states")
    report = MetricsReport([evaluate_window(estimate, truth, args.solve_ms, 0)])
    if args.out:
        report.write_csv(args.out)
    if args.aligned_tum:
        write_aligned_tum(args.aligned_tum, estimate, truth)
    print("\n".join(report.lines()))
    return EXIT_OK


def cmd_bench(args) -> int:
    config = _run_config(args)
    bundle = load_bundle(args.data)
    if bundle.groundtruth is None:
        raise CliError(f"{args.data}: bench needs groundtruth.csv")
    initial = _initial_states(args, bundle)
    report = run_bench(bundle, initial, config, workers=args.workers)
    if args.out:
        report.write_csv(args.out)
    print("\n".join(report.lines()))
    return EXIT_OK


def cmd_jactest(args) -> int:
    if args.trials < 1:
        raise CliError("--trials must be at least 1")
    reports = checks.run_suites(args.seed, args.trials, args.tolerance)
    for r in reports:
        status = "PASS" if r.passed else "FAIL"
        print(f"{status}  {r.suite:<13} trials={r.trials}  max rel err={r.max_error:.3e}  "
              f"(tol {r.tolerance:g})")
    return EXIT_OK if all(r.passed for r in reports) else EXIT_INVALID


COMMANDS = {"simulate": cmd_simulate, "refine": cmd_refine, "eval": cmd_eval,
            "bench": cmd_bench, "jactest": cmd_jactest}


def main(argv=None) -> int:
    try:
        args = parse_args(sys.argv[1:] if argv is None else argv)
        return COMMANDS[args.command](args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except (BundleError, AssociationError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (np.linalg.LinAlgError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
