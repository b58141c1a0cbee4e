"""Mission files in, run artifacts out.

A mission file is JSON matching ``models.schemas.MissionFile``. Parsing fills
documented defaults, builds the domain objects and runs geometric validation
before anything is simulated.
"""
import csv
import json
import logging
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, List, Optional, Sequence, Union

import numpy as np
from pydantic import ValidationError

from config.settings import settings
from models.schemas import (
    ExportSpec,
    FaultEventSpec,
    FaultFile,
    Interpolation,
    MissionFile,
    Mode,
    PlannerSpec,
    ValidationReport,
    VehicleSpec,
    ViolationOut,
)
from utils.dynamics import (
    State,
    Thruster,
    VehicleModel,
    default_thruster_layout,
)
from utils.errors import (
    InspectionError,
    InvalidArgumentError,
    MissionParseError,
    MissionSchemaError,
    MissionValidationError,
)
from utils.geometry import (
    FreeSpace,
    InspectionPoint,
    KeepInCorridor,
    KeepOutEllipsoid,
    ReferencePath,
    Violation,
    build_path,
    validate_mission,
)
from utils.objective import FlybyWeights, LingerWeights
from utils.planner import LingerSchedule, PlannerParams, SqpSettings
from utils.simulation import FaultEvent, FaultSchedule, Metrics, SimLog, ViolationEvent

logger = logging.getLogger(__name__)

FLYBY_TIMING_WARNING = "Flyby mode ignores t and t_l"

TRAJECTORY_COLUMNS = (
    ["t", "r_x", "r_y", "r_z", "q_x", "q_y", "q_z", "q_w",
     "v_x", "v_y", "v_z", "w_x", "w_y", "w_z"]
)


@dataclass(eq=False)
class Mission:
    name: str
    mode: Mode
    interpolation: Interpolation
    vehicle: VehicleModel
    points: List[InspectionPoint]
    keepouts: List[KeepOutEllipsoid]
    free_space: FreeSpace
    path: ReferencePath
    params: PlannerParams
    faults: FaultSchedule
    initial_state: State
    control_period: float
    sim_dt: float
    max_time: float
    export: ExportSpec
    spec: MissionFile
    warnings: List[str] = field(default_factory=list)

    def __eq__(self, other):
        if not isinstance(other, Mission):
            return NotImplemented
        return self.spec == other.spec


# ---------------------------------------------------------------------------
# Building domain objects from the schema
# ---------------------------------------------------------------------------

def vehicle_from_spec(spec: VehicleSpec) -> VehicleModel:
    inertia = np.asarray(spec.inertia, dtype=float)
    if inertia.ndim == 1:
        inertia = np.diag(inertia)
    if spec.thrusters:
        thrusters = tuple(Thruster(t.position, t.direction, t.max_thrust) for t in spec.thrusters)
    else:
        thrusters = default_thruster_layout(spec.max_thrust)
    return VehicleModel(spec.mass, inertia, thrusters, spec.body_radius, spec.isp)


def params_from_spec(spec: PlannerSpec, mode: Mode, n_u: int) -> PlannerParams:
    if mode is Mode.LINGER:
        Q = np.diag(spec.linger.q_diag)
        weights = LingerWeights(Q=Q, R=spec.linger.r * np.eye(n_u), Q_N=spec.linger.terminal_scale * Q)
    else:
        fw = spec.flyby
        weights = FlybyWeights(fw.q_c, fw.q_l, fw.q_att, fw.mu, fw.r * np.eye(n_u),
                               fw.q_v, fw.q_omega, fw.terminal_scale)
    sqp = SqpSettings(spec.max_iter, spec.kkt_tol, spec.lambda_reg, spec.armijo,
                      spec.backtrack, spec.max_backtracks)
    return PlannerParams(
        mode=mode, horizon=spec.horizon, dt=spec.dt, weights=weights,
        v_max=spec.v_max, omega_max=spec.omega_max, rho=spec.rho, sqp=sqp,
        terminal_radius=spec.terminal_radius, terminal_speed=spec.terminal_speed,
        use_true_mask=spec.use_true_mask,
    )


def faults_from_specs(specs: Iterable[FaultEventSpec], n_u: int, where: str = "faults") -> FaultSchedule:
    specs = list(specs)
    bad = [f"{where}.{k}.thruster" for k, f in enumerate(specs) if f.thruster >= n_u]
    if bad:
        raise MissionSchemaError(f"thruster index out of range for a {n_u}-thruster vehicle", fields=bad)
    return FaultSchedule([FaultEvent(f.time, f.thruster, f.scale) for f in specs], n_u)


def _keepout(spec) -> KeepOutEllipsoid:
    if spec.semi_axes is not None:
        return KeepOutEllipsoid.from_axes(spec.center, spec.semi_axes, spec.orientation, spec.name)
    return KeepOutEllipsoid(spec.center, spec.shape, spec.name)


def _geometry(model: MissionFile, body_radius: float):
    points = [InspectionPoint(p.position, p.orientation, p.radius, p.t, p.t_l) for p in model.inspection_points]
    keepouts = [_keepout(k) for k in model.keepouts]
    fs = FreeSpace(KeepInCorridor.from_points(points), keepouts, body_radius, check=False)
    return points, keepouts, fs


def _warnings(model: MissionFile) -> List[str]:
    if model.mode is Mode.FLYBY and any(p.t is not None or p.t_l is not None for p in model.inspection_points):
        return [FLYBY_TIMING_WARNING]
    return []


def mission_from_model(model: MissionFile) -> Mission:
    """Build and validate a Mission; raises MissionValidationError on geometric infeasibility"""
    for text in _warnings(model):
        logger.warning("mission '%s': %s", model.name, text)
    vehicle = vehicle_from_spec(model.vehicle)
    points, keepouts, fs = _geometry(model, vehicle.body_radius)
    violations = validate_mission(points, fs, model.interpolation)
    if violations:
        raise MissionValidationError(
            f"mission '{model.name}' is infeasible: " + "; ".join(v.describe() for v in violations),
            violations=violations,
        )
    if model.mode is Mode.LINGER:
        LingerSchedule(points)

    init = model.initial_state
    first = points[0]
    if init is None:
        initial_state = State.at_rest(first.position, first.orientation)
    else:
        initial_state = State(
            init.position if init.position is not None else first.position,
            init.orientation if init.orientation is not None else first.orientation,
            init.velocity, init.omega,
        )
    sim = model.simulation
    return Mission(
        name=model.name,
        mode=model.mode,
        interpolation=model.interpolation,
        vehicle=vehicle,
        points=points,
        keepouts=keepouts,
        free_space=fs,
        path=build_path(points, model.interpolation),
        params=params_from_spec(model.planner, model.mode, vehicle.n_u),
        faults=faults_from_specs(model.faults, vehicle.n_u),
        initial_state=initial_state,
        control_period=sim.control_period or settings.control_period,
        sim_dt=sim.sim_dt or settings.sim_dt,
        max_time=sim.max_time or settings.max_sim_time,
        export=model.export,
        spec=model,
        warnings=_warnings(model),
    )


def validation_report(model: MissionFile) -> ValidationReport:
    """Geometric check of a schema-valid mission, as data"""
    vehicle = vehicle_from_spec(model.vehicle)
    points, _, fs = _geometry(model, vehicle.body_radius)
    violations = validate_mission(points, fs, model.interpolation)
    return ValidationReport(
        valid=not violations,
        name=model.name,
        mode=model.mode,
        path_length=build_path(points, model.interpolation).length,
        violations=[violation_out(v) for v in violations],
        warnings=_warnings(model),
    )


def violation_out(v: Violation) -> ViolationOut:
    return ViolationOut(kind=v.kind, index=v.index, constraint=v.constraint,
                        margin=v.margin, s_start=v.s_start, s_end=v.s_end)


# ---------------------------------------------------------------------------
# Files
# ---------------------------------------------------------------------------

def _schema_fields(exc: ValidationError) -> List[str]:
    return [".".join(str(part) for part in err["loc"]) or "<root>" for err in exc.errors()]


def _load_json(path: Path):
    text = path.read_text(encoding="utf-8")
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise MissionParseError(f"{path}: line {exc.lineno}: {exc.msg}", line=exc.lineno) from exc


def load_mission_model(path: Union[str, Path]) -> MissionFile:
    path = Path(path)
    data = _load_json(path)
    try:
        return MissionFile.model_validate(data)
    except ValidationError as exc:
        fields = _schema_fields(exc)
        raise MissionSchemaError(f"{path}: invalid field(s) {', '.join(fields)}", fields=fields) from exc


def parse_mission(path: Union[str, Path]) -> Mission:
    mission = mission_from_model(load_mission_model(path))
    logger.info("loaded mission '%s' (%s, %d points, %.2f m)",
                mission.name, mission.mode.value, len(mission.points), mission.path.length)
    return mission


def serialize_mission(mission: Mission) -> str:
    return json.dumps(mission.spec.model_dump(mode="json"), indent=2, sort_keys=True) + "\n"


def load_faults(path: Union[str, Path], n_u: int = 12) -> FaultSchedule:
    path = Path(path)
    data = _load_json(path)
    try:
        model = FaultFile.model_validate(data)
    except ValidationError as exc:
        fields = _schema_fields(exc)
        raise MissionSchemaError(f"{path}: invalid field(s) {', '.join(fields)}", fields=fields) from exc
    return faults_from_specs(model.faults, n_u)


# ---------------------------------------------------------------------------
# Export
# ---------------------------------------------------------------------------

def _fmt(value: float) -> str:
    return "%.10g" % value


def trajectory_header(n_u: int) -> List[str]:
    return TRAJECTORY_COLUMNS + [f"u_{k + 1}" for k in range(n_u)] + ["margin", "status"]


def status_counts(log: SimLog) -> dict:
    counts = Counter(r.status.value for r in log.records if r.status is not None)
    return dict(sorted(counts.items()))


def violation_dict(event: Optional[ViolationEvent]) -> Optional[dict]:
    if event is None:
        return None
    return {"step": event.step, "t": event.t, "constraint": event.constraint, "margin": event.margin}


def metrics_lines(metrics: Metrics) -> List[str]:
    lines = []
    for key, value in metrics.as_dict().items():
        if value is None:
            text = "n/a"
        elif isinstance(value, bool):
            text = str(value).lower()
        else:
            text = _fmt(value)
        lines.append(f"{key} = {text}")
    return lines


def export_run(log: SimLog, metrics: Metrics, out_dir: Union[str, Path],
               violation: Optional[ViolationEvent] = None,
               export: Optional[ExportSpec] = None) -> List[Path]:
    """Write trajectory CSV, metrics block and JSON summary; wall-clock timings are left out"""
    export = export or ExportSpec()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    trajectory = out / export.trajectory
    with trajectory.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(trajectory_header(log.n_thrusters))
        for r in log.records:
            status = r.status.value if r.status is not None else "-"
            row = [_fmt(r.t)] + [_fmt(v) for v in r.state] + [_fmt(v) for v in r.u] + [_fmt(r.margin), status]
            writer.writerow(row)

    metrics_path = out / export.metrics
    header = [f"mission = {log.mission}", f"termination = {log.termination.value}", f"steps = {len(log)}"]
    metrics_path.write_text("\n".join(header + metrics_lines(metrics)) + "\n", encoding="utf-8")

    summary = out / export.summary
    payload = {
        "mission": log.mission,
        "mode": log.mode.value,
        "termination": log.termination.value,
        "steps": len(log),
        "metrics": metrics.as_dict(),
        "violation": violation_dict(violation),
        "status_counts": status_counts(log),
        "faults": [{"t": t, "thruster": k, "scale": s} for t, k, s in log.fault_log],
    }
    summary.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    logger.info("exported run '%s' to %s", log.mission, out)
    return [trajectory, metrics_path, summary]


def error_kind(exc: BaseException) -> str:
    """Short machine-readable tag for an error, used by the CLI and API"""
    kinds = {
        MissionParseError: "parse",
        MissionSchemaError: "schema",
        MissionValidationError: "validation",
        InvalidArgumentError: "argument",
    }
    for cls, kind in kinds.items():
        if isinstance(exc, cls):
            return kind
    if isinstance(exc, OSError):
        return "io"
    if isinstance(exc, InspectionError):
        return "mission"
    return "internal"


def describe_violations(violations: Sequence[Violation]) -> List[str]:
    return [v.describe() for v in violations]
