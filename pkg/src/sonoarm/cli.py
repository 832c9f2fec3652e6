"""Operator-free entry points.

Exit codes: 0 success, 1 unexpected error, 2 unreadable/invalid input,
3 planning or simulation fault, 4 acceptance criteria failed.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import __version__
from .config import AppConfig, load_config, write_default_config
from .errors import (
    NoConsensusError,
    PlanningError,
    RegistrationError,
    SonoarmError,
    SurfaceGapError,
)
from .headless import plan_for, run_autonomous
from .phantom import generate_phantom, load_phantom, save_phantom
from .planner import PATTERN_IDS, save_plan_csv
from .pointcloud import (
    IcpParams,
    RansacParams,
    estimate_normals,
    load_cloud,
    merge_views,
    ransac_filter,
    save_cloud,
)

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_BAD_INPUT = 2
EXIT_FAULT = 3
EXIT_CRITERIA_FAILED = 4


@dataclass
class RunReport:
    command: str
    phase_timings_s: dict = field(default_factory=dict)
    compliance_fraction: float | None = None
    verdict_histogram: dict = field(default_factory=dict)
    link_stats: dict | None = None
    exit_status: int = EXIT_OK
    notes: list = field(default_factory=list)

    def write(self, path) -> None:
        with open(path, "w", encoding="ascii") as fh:
            json.dump(asdict(self), fh, indent=2, sort_keys=True)
            fh.write("\n")

    def print_table(self) -> None:
        print(f"== {self.command} report ==")
        for k, v in self.phase_timings_s.items():
            print(f"  {k:<22} {v:8.2f} s")
        if self.compliance_fraction is not None:
            print(f"  {'force-band compliance':<22} {self.compliance_fraction:8.4f}")
        for k, v in sorted(self.verdict_histogram.items()):
            print(f"  verdict[{k}]: {v}")
        for note in self.notes:
            print(f"  note: {note}")
        print(f"  exit status: {self.exit_status}")


def cmd_config(args) -> int:
    write_default_config(args.out)
    print(f"wrote default config to {args.out}")
    return EXIT_OK


def cmd_phantom_gen(args) -> int:
    config = load_config(args.config)
    axes = args.axes or list(config.phantom.semi_axes)
    model = generate_phantom(axes, seed=args.seed if args.seed is not None
                             else config.phantom.seed,
                             center=config.phantom.center,
                             stiffness=config.phantom.stiffness)
    save_phantom(args.out, model)
    print(f"phantom: {len(model.surface)} surface points, "
          f"grid {model.voxel_grid.shape}, saved to {args.out}.pcd/.meta")
    return EXIT_OK


def cmd_capture(args) -> int:
    """Simulated captures of a phantom, for feeding `reconstruct`."""
    from .geometry import quat_to_matrix
    from .phantom import CaptureParams, capture_view, look_at_camera

    phantom = load_phantom(args.phantom)
    rng_positions = []
    for k in range(args.views):
        az = np.radians(90 + (360.0 / args.views) * k)
        elev = np.radians(40.0)
        offset = 420.0 * np.array([np.cos(elev) * np.cos(az),
                                   np.cos(elev) * np.sin(az), np.sin(elev)])
        rng_positions.append(phantom.center + offset)
    for k, eye in enumerate(rng_positions):
        cam = look_at_camera(eye, phantom.center)
        cloud = capture_view(phantom, CaptureParams(
            cam, noise_sigma=args.noise, outlier_fraction=args.outliers,
            point_budget=args.budget, seed=args.seed + k, fov=np.radians(80)))
        # express in world frame via the known camera pose (the hand-eye map)
        R = quat_to_matrix(cam.orientation)
        from .pointcloud import PointCloud
        world = PointCloud(cloud.points @ R.T + cam.position, frame="world")
        path = f"{args.out_prefix}{k}.pcd"
        save_cloud(path, world)
        print(f"view {k}: {len(world)} points -> {path}")
    return EXIT_OK


def cmd_reconstruct(args) -> int:
    report = RunReport(command="reconstruct")
    views = []
    t0 = time.perf_counter()
    for path in args.views:
        try:
            views.append(load_cloud(path))
        except (OSError, SonoarmError) as exc:
            print(f"error: cannot read view {path}: {exc}", file=sys.stderr)
            return EXIT_BAD_INPUT
    report.phase_timings_s["load"] = time.perf_counter() - t0

    params = RansacParams(model=args.ransac_model,
                          inlier_threshold=args.ransac_threshold,
                          iterations=args.ransac_iterations,
                          min_inlier_fraction=0.5)
    t0 = time.perf_counter()
    filtered = []
    for k, view in enumerate(views):
        try:
            filtered.append(ransac_filter(view, params, seed=args.seed + k))
        except NoConsensusError as exc:
            print(f"error: view {k}: {exc}", file=sys.stderr)
            return EXIT_FAULT
    report.phase_timings_s["ransac"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    try:
        merged = merge_views(filtered, IcpParams(max_correspondence_distance=args.max_corr))
    except RegistrationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAULT
    report.phase_timings_s["merge"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    merged = estimate_normals(merged, k=12)
    report.phase_timings_s["normals"] = time.perf_counter() - t0

    save_cloud(args.out, merged)
    report.notes.append(f"{len(merged)} merged points -> {args.out}")
    report.print_table()
    if args.report:
        report.write(args.report)
    return EXIT_OK


def cmd_plan(args) -> int:
    config = load_config(args.config)
    if args.cloud:
        surface = load_cloud(args.cloud)
        if surface.normals is None:
            surface = estimate_normals(surface, k=12)
        phantom = generate_phantom(config.phantom.semi_axes,
                                   seed=config.phantom.seed,
                                   center=config.phantom.center,
                                   stiffness=config.phantom.stiffness)
    else:
        phantom = generate_phantom(config.phantom.semi_axes,
                                   seed=config.phantom.seed,
                                   center=config.phantom.center,
                                   stiffness=config.phantom.stiffness)
        surface = phantom.surface
    if args.sd:
        config.planner.sampling_distance = args.sd
    try:
        plan = plan_for(args.pattern, config, surface, phantom)
    except (PlanningError, SurfaceGapError, SonoarmError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAULT
    save_plan_csv(args.out, plan)
    print(f"pattern {args.pattern}: {len(plan.points)} poses, "
          f"{plan.duration:.1f} s -> {args.out}")
    return EXIT_OK


def cmd_run_auto(args) -> int:
    config = load_config(args.config)
    if args.cloud:
        config.cloud_file = args.cloud
    report = RunReport(command=f"run-auto {args.pattern}")
    try:
        result = run_autonomous(args.pattern, config,
                                max_sim_seconds=args.max_sim_seconds,
                                record_path=args.log)
    except (PlanningError, SurfaceGapError) as exc:
        print(f"error: planning: {exc}", file=sys.stderr)
        report.exit_status = EXIT_FAULT
        report.notes.append(str(exc))
        if args.report:
            report.write(args.report)
        return EXIT_FAULT

    report.phase_timings_s = dict(result.phase_timings)
    report.phase_timings_s["simulated"] = result.sim_duration_s
    compliance = result.compliance_fraction(config.band)
    report.compliance_fraction = compliance
    verdicts = {}
    for s in result.samples:
        verdicts[s.verdict.value] = verdicts.get(s.verdict.value, 0) + 1
    report.verdict_histogram = verdicts
    if result.halted:
        report.notes.append(f"halted: {result.fault}")
    ok = result.completed and not result.halted and compliance >= args.compliance
    report.exit_status = EXIT_OK if ok else EXIT_FAULT
    report.print_table()
    if args.report:
        report.write(args.report)
    if args.log:
        print(f"session log: {args.log}")
    return report.exit_status


def cmd_serve(args) -> int:
    from .teleop.service import TeleopService

    config = load_config(args.config)
    if args.port is not None:
        config.service.port = args.port
    if args.bridge_port is not None:
        config.service.bridge_port = args.bridge_port
    svc = TeleopService(config, record_path=args.record, host=args.host).start()
    print(f"serving telemetry on {args.host}:{svc.port}, "
          f"console bridge on {args.host}:{svc.bridge_port}" +
          (f", recording to {args.record}" if args.record else ""))
    try:
        while True:
            time.sleep(0.5)
    except KeyboardInterrupt:
        print("stopping")
    finally:
        svc.stop()
    return EXIT_OK


def cmd_replay(args) -> int:
    from .teleop.service import ReplayService

    svc = ReplayService(args.log, speed=args.speed, host=args.host,
                        port=args.port, bridge_port=args.bridge_port,
                        loop=args.loop).start()
    print(f"replaying {args.log} at {args.speed}x on {args.host}:{svc.port}, "
          f"bridge on {args.host}:{svc.bridge_port}")
    try:
        while not svc._stop.is_set():
            time.sleep(0.2)
    except KeyboardInterrupt:
        pass
    finally:
        svc.stop()
    return EXIT_OK


def cmd_bench(args) -> int:
    from .bench import SUITES, run_suite

    if args.suite not in SUITES:
        print(f"error: unknown suite {args.suite!r} (have {sorted(SUITES)})",
              file=sys.stderr)
        return EXIT_BAD_INPUT
    results = run_suite(args.suite, progress=lambda r: print(r.row(), flush=True))
    passed = sum(r.passed for r in results)
    print(f"{passed}/{len(results)} criteria passed")
    if args.json:
        payload = [{"criterion": r.criterion, "passed": bool(r.passed),
                    "details": {k: str(v) for k, v in r.details.items()},
                    "runtime_s": round(r.runtime_s, 3)} for r in results]
        with open(args.json, "w", encoding="ascii") as fh:
            json.dump(payload, fh, indent=2)
            fh.write("\n")
    return EXIT_OK if passed == len(results) else EXIT_CRITERIA_FAILED


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sonoarm",
                                     description=__doc__.strip().splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("config", help="write a default config file")
    p.add_argument("--out", default="sonoarm.ini")
    p.set_defaults(func=cmd_config)

    p = sub.add_parser("phantom", help="phantom utilities")
    phantom_sub = p.add_subparsers(dest="phantom_command", required=True)
    g = phantom_sub.add_parser("gen", help="generate and save a phantom")
    g.add_argument("--out", required=True, help="output base path (.pcd/.meta)")
    g.add_argument("--axes", type=float, nargs=3, metavar=("A", "B", "C"))
    g.add_argument("--seed", type=int)
    g.add_argument("--config")
    g.set_defaults(func=cmd_phantom_gen)

    p = sub.add_parser("capture", help="simulate camera views of a phantom")
    p.add_argument("--phantom", required=True, help="phantom base path")
    p.add_argument("--views", type=int, default=3)
    p.add_argument("--noise", type=float, default=0.2)
    p.add_argument("--outliers", type=float, default=0.2)
    p.add_argument("--budget", type=int, default=20000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-prefix", default="view")
    p.set_defaults(func=cmd_capture)

    p = sub.add_parser("reconstruct", help="filter, merge and orient views")
    p.add_argument("--views", nargs="+", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--report")
    p.add_argument("--ransac-model", default="ellipsoid-distance",
                   choices=("plane", "ellipsoid-distance"))
    p.add_argument("--ransac-threshold", type=float, default=1.2)
    p.add_argument("--ransac-iterations", type=int, default=400)
    p.add_argument("--max-corr", type=float, default=4.0)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_reconstruct)

    p = sub.add_parser("plan", help="compile a scan pattern to a path plan CSV")
    p.add_argument("--pattern", required=True, choices=PATTERN_IDS)
    p.add_argument("--sd", type=float, help="sampling distance (mm)")
    p.add_argument("--cloud", help="surface cloud file (default: phantom ground truth)")
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.set_defaults(func=cmd_plan)

    p = sub.add_parser("run-auto", help="headless autonomous scan on the simulator")
    p.add_argument("--pattern", required=True, choices=PATTERN_IDS)
    p.add_argument("--cloud", help="surface cloud file (default: phantom ground truth)")
    p.add_argument("--config")
    p.add_argument("--log", help="session log output path")
    p.add_argument("--report", help="JSON report output path")
    p.add_argument("--compliance", type=float, default=0.99)
    p.add_argument("--max-sim-seconds", type=float, default=300.0)
    p.set_defaults(func=cmd_run_auto)

    p = sub.add_parser("serve", help="run the live teleoperation service")
    p.add_argument("--config")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int)
    p.add_argument("--bridge-port", type=int)
    p.add_argument("--record", help="session log output path")
    p.set_defaults(func=cmd_serve)

    p = sub.add_parser("replay", help="replay a session log over the wire")
    p.add_argument("--log", required=True)
    p.add_argument("--speed", type=float, default=1.0,
                   help="0 replays as fast as possible")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=0)
    p.add_argument("--bridge-port", type=int, default=0)
    p.add_argument("--loop", action="store_true")
    p.set_defaults(func=cmd_replay)

    p = sub.add_parser("bench", help="run the acceptance benchmark suite")
    p.add_argument("--suite", default="primary")
    p.add_argument("--json", help="machine-readable results path")
    p.set_defaults(func=cmd_bench)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except SonoarmError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_BAD_INPUT
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_BAD_INPUT


if __name__ == "__main__":
    sys.exit(main())
