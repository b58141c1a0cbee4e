"""Command-line entrypoint: validate, run, compare and bench inspection missions.

Exit codes: 0 success, 1 usage, 2 invalid mission, 3 run ended in collision
or planner failure. Every failure prints one ``error[<kind>]: ...`` line.
"""
import argparse
import logging
import sys
from pathlib import Path
from typing import List, Optional, Sequence

from config.settings import settings
from models.schemas import Termination
from utils.errors import InspectionError, MissionValidationError
from utils.mission_io import (
    describe_violations,
    error_kind,
    export_run,
    load_faults,
    metrics_lines,
    parse_mission,
)
from utils.simulation import (
    REAL_TIME_RATE_HZ,
    bench_statistics,
    compute_metrics,
    detect_violation,
    run_batch,
    run_mission,
)

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_INVALID = 2
EXIT_RUN_FAILED = 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="inspect", description="Free-flyer inspection planning and simulation")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("validate", help="check a mission file")
    p.add_argument("mission")

    p = sub.add_parser("run", help="simulate a mission closed loop and export the run")
    p.add_argument("mission")
    p.add_argument("--faults", help="fault schedule JSON, replaces the mission's own")
    p.add_argument("--out", help="output directory (default: <output_dir>/<mission name>)")
    p.add_argument("--max-time", type=float, help="simulated time limit [s]")

    p = sub.add_parser("compare", help="paired metrics of two missions")
    p.add_argument("mission_a")
    p.add_argument("mission_b")
    p.add_argument("--max-time", type=float)

    p = sub.add_parser("bench", help="planner solve-rate statistics")
    p.add_argument("mission")
    p.add_argument("--duration", type=float, help="simulated seconds to bench")
    return parser


def _fail(kind: str, message: str, code: int) -> int:
    print(f"error[{kind}]: {message}", file=sys.stderr)
    return code


def _cmd_validate(args) -> int:
    mission = parse_mission(args.mission)
    for text in mission.warnings:
        print(f"warning: {text}")
    print(f"{mission.name}: valid ({mission.mode.value}, {len(mission.points)} points, "
          f"{len(mission.keepouts)} keep-outs, path {mission.path.length:.2f} m)")
    return EXIT_OK


def _cmd_run(args) -> int:
    mission = parse_mission(args.mission)
    faults = load_faults(args.faults, mission.vehicle.n_u) if args.faults else None
    log = run_mission(mission, faults=faults, max_time=args.max_time)
    metrics = compute_metrics(log, mission.path, mission.vehicle)
    violation = detect_violation(log, mission.free_space)
    out = Path(args.out) if args.out else Path(settings.output_dir) / mission.name
    export_run(log, metrics, out, violation=violation, export=mission.export)

    print(f"mission = {mission.name}")
    print(f"termination = {log.termination.value}")
    print(f"steps = {len(log)}")
    for line in metrics_lines(metrics):
        print(line)
    print(f"output = {out}")
    if log.termination in (Termination.COLLISION, Termination.PLANNER_FAILED):
        detail = log.termination.value
        if violation is not None:
            detail = (f"collision with {violation.constraint} at step {violation.step} "
                      f"(t={violation.t:.1f} s, margin {violation.margin:.4f})")
        return _fail(log.termination.value, detail, EXIT_RUN_FAILED)
    return EXIT_OK


def _cell(value) -> str:
    if value is None:
        return "---"
    if isinstance(value, bool):
        return "yes" if value else "no"
    return f"{value:.4g}"


def _cmd_compare(args) -> int:
    paths = [args.mission_a, args.mission_b]
    for path in paths:
        parse_mission(path)
    results = run_batch(paths, max_time=args.max_time, workers=settings.batch_workers)
    names = [log.mission for log, _ in results]
    width = max(28, *(len(n) + 2 for n in names))
    print(f"{'metric':<28}" + "".join(f"{n:>{width}}" for n in names))
    print(f"{'termination':<28}" + "".join(f"{log.termination.value:>{width}}" for log, _ in results))
    for key in results[0][1].as_dict():
        row = [_cell(m.as_dict()[key]) for _, m in results]
        print(f"{key:<28}" + "".join(f"{c:>{width}}" for c in row))
    return EXIT_OK


def _cmd_bench(args) -> int:
    mission = parse_mission(args.mission)
    log = run_mission(mission, max_time=args.duration or settings.bench_duration)
    stats = bench_statistics(log)
    verdict = "meets" if stats.meets_real_time else "misses"
    print(f"solves = {stats.solves}")
    print(f"median = {1e3 * stats.median:.2f} ms")
    print(f"p95 = {1e3 * stats.p95:.2f} ms")
    print(f"worst = {1e3 * stats.worst:.2f} ms")
    print(f"median_rate = {stats.median_rate_hz:.1f} Hz ({verdict} the {REAL_TIME_RATE_HZ:.0f} Hz requirement)")
    return EXIT_OK


COMMANDS = {
    "validate": _cmd_validate,
    "run": _cmd_run,
    "compare": _cmd_compare,
    "bench": _cmd_bench,
}


def cli_main(argv: Optional[Sequence[str]] = None) -> int:
    logging.basicConfig(level=settings.log_level.upper(),
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        return _fail("usage", str(exc), EXIT_USAGE)

    try:
        return COMMANDS[args.command](args)
    except MissionValidationError as exc:
        code = _fail("validation", f"{len(exc.violations)} violation(s) in mission", EXIT_INVALID)
        for line in describe_violations(exc.violations):
            print(f"  {line}", file=sys.stderr)
        return code
    except InspectionError as exc:
        return _fail(error_kind(exc), str(exc), EXIT_INVALID)
    except FileNotFoundError as exc:
        return _fail("io", f"no such file: {exc.filename}", EXIT_USAGE)
    except OSError as exc:
        target = f" {exc.filename}" if exc.filename else ""
        return _fail("io", f"cannot access{target}: {exc.strerror or exc}", EXIT_USAGE)


def main(argv: Optional[List[str]] = None):
    sys.exit(cli_main(argv))


if __name__ == "__main__":
    main()
