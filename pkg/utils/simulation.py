"""Closed-loop simulation of planner + plant, with fault injection, collision
detection against the true geometry and the inspection metrics.
"""
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, List, Optional, Sequence, Tuple

import numpy as np

from models.schemas import Mode, PlanStatus, Termination
from utils.dynamics import FaultMask, State, VehicleModel, propagate, thruster_wrench
from utils.errors import IntegrationError, InvalidArgumentError
from utils.geometry import FreeSpace, ReferencePath, corridor_margin, project_to_path
from utils.planner import LingerClock, NmpcPlanner, PlannerParams, at_waypoint

if TYPE_CHECKING:
    from utils.mission_io import Mission

logger = logging.getLogger(__name__)

G0 = 9.80665
REAL_TIME_RATE_HZ = 5.0


# ---------------------------------------------------------------------------
# Faults
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class FaultEvent:
    time: float
    thruster: int
    scale: float = 0.0


class FaultSchedule:
    """Time-ordered thruster degradation events"""

    def __init__(self, events: Sequence[FaultEvent] = (), n_u: int = 12):
        for ev in events:
            if ev.time < 0.0:
                raise InvalidArgumentError("fault times must be non-negative")
            if not 0 <= ev.thruster < n_u:
                raise InvalidArgumentError(f"fault thruster index {ev.thruster} out of range for {n_u} thrusters")
            if not 0.0 <= ev.scale <= 1.0:
                raise InvalidArgumentError("fault scale must lie in [0, 1]")
        self.events = tuple(sorted(events, key=lambda ev: ev.time))
        self.n_u = n_u

    @classmethod
    def nominal(cls, n_u: int = 12) -> "FaultSchedule":
        return cls((), n_u)

    def __len__(self):
        return len(self.events)

    def mask_at(self, t: float) -> FaultMask:
        mask = FaultMask.nominal(self.n_u)
        for ev in self.events:
            if ev.time <= t + 1e-9:
                mask = mask.with_scale(ev.thruster, ev.scale)
        return mask


# ---------------------------------------------------------------------------
# Log and metrics
# ---------------------------------------------------------------------------

@dataclass(eq=False)
class SimRecord:
    step: int
    t: float
    state: np.ndarray                # 13-vector, true plant state
    u: np.ndarray                    # commanded thrusts
    force: np.ndarray                # realized body force
    torque: np.ndarray               # realized body torque
    status: Optional[PlanStatus]     # None when no plan was made this step
    solve_time: float
    iterations: int
    margin: float                    # true free-space margin
    constraint: str                  # binding free-space constraint
    corridor_margin: float
    progress: Optional[float] = None         # flyby path progress s
    schedule_time: Optional[float] = None    # linger schedule clock
    slack_max: float = 0.0


@dataclass(eq=False)
class SimLog:
    mission: str
    mode: Mode
    control_period: float
    records: List[SimRecord] = field(default_factory=list)
    termination: Termination = Termination.TIMEOUT
    n_thrusters: int = 12
    fault_log: List[Tuple[float, int, float]] = field(default_factory=list)

    def __len__(self):
        return len(self.records)

    @property
    def times(self) -> np.ndarray:
        return np.array([r.t for r in self.records])

    @property
    def states(self) -> np.ndarray:
        return np.array([r.state for r in self.records])

    @property
    def solve_times(self) -> np.ndarray:
        return np.array([r.solve_time for r in self.records if r.status is not None])

    def same_trajectory(self, other: "SimLog") -> bool:
        """Bit-level equality of everything except wall-clock solve times"""
        if self.termination is not other.termination or len(self) != len(other):
            return False
        for a, b in zip(self.records, other.records):
            if (a.t != b.t or a.status != b.status or a.iterations != b.iterations
                    or not np.array_equal(a.state, b.state) or not np.array_equal(a.u, b.u)
                    or a.margin != b.margin):
                return False
        return True


@dataclass(frozen=True)
class ViolationEvent:
    step: int
    t: float
    constraint: str
    margin: float


@dataclass(frozen=True)
class Metrics:
    completed: bool
    avg_lateral_dev: float
    total_translational_impulse: Optional[float]
    realized_impulse: float
    inspect_time: Optional[float]
    propellant_mass: Optional[float]
    max_corridor_violation: float

    def as_dict(self) -> dict:
        return {
            "completed": self.completed,
            "avg_lateral_dev": self.avg_lateral_dev,
            "total_translational_impulse": self.total_translational_impulse,
            "realized_impulse": self.realized_impulse,
            "inspect_time": self.inspect_time,
            "propellant_mass": self.propellant_mass,
            "max_corridor_violation": self.max_corridor_violation,
        }


def propellant_from_impulse(impulse: float, isp: float) -> float:
    """Propellant mass [kg] for a total impulse [N s] at specific impulse isp [s]"""
    if impulse < 0.0:
        raise InvalidArgumentError("impulse must be non-negative")
    if not isp > 0.0:
        raise InvalidArgumentError("isp must be positive")
    return impulse / (isp * G0)


def compute_metrics(log: SimLog, path: ReferencePath, vehicle: VehicleModel) -> Metrics:
    if not log.records:
        raise InvalidArgumentError("cannot compute metrics of an empty log")
    lateral = []
    hint = None
    for r in log.records:
        proj = project_to_path(r.state[:3], path, s_hint=hint)
        hint = proj.s
        lateral.append(proj.lateral)
    commanded = sum(float(np.linalg.norm(vehicle.force_map @ r.u)) for r in log.records) * log.control_period
    realized = sum(float(np.linalg.norm(r.force)) for r in log.records) * log.control_period
    completed = log.termination is Termination.COMPLETED
    worst = min(r.corridor_margin for r in log.records)
    return Metrics(
        completed=completed,
        avg_lateral_dev=float(np.mean(lateral)),
        total_translational_impulse=commanded if completed else None,
        realized_impulse=realized,
        inspect_time=log.records[-1].t if completed else None,
        propellant_mass=propellant_from_impulse(commanded, vehicle.isp) if completed else None,
        max_corridor_violation=max(0.0, -worst),
    )


def detect_violation(log: SimLog, fs: FreeSpace) -> Optional[ViolationEvent]:
    """First logged step whose true free-space margin is negative"""
    for r in log.records:
        detail = fs.margin_detail(r.state[:3])
        if detail.margin < 0.0:
            return ViolationEvent(r.step, r.t, detail.constraint, detail.margin)
    return None


# ---------------------------------------------------------------------------
# Closed loop
# ---------------------------------------------------------------------------

def _flyby_finished(state: State, path: ReferencePath, hint: Optional[float]) -> bool:
    return project_to_path(state.r_com_I, path, s_hint=hint).s >= path.knots[-2]


def run_mission(mission: "Mission", params: Optional[PlannerParams] = None,
                faults: Optional[FaultSchedule] = None, max_time: Optional[float] = None,
                control_period: Optional[float] = None, sim_dt: Optional[float] = None,
                planner_enabled: bool = True, warm_start: bool = True) -> SimLog:
    """Plan from the true state, hold the first input for one control period, repeat.

    Terminates on completion (final waypoint within 0.1 m at under 0.02 m/s,
    every linger dwell served), collision (true margin < 0), planner failure
    or timeout. With ``planner_enabled=False`` the vehicle coasts with u = 0.
    """
    params = params or mission.params
    faults = faults if faults is not None else mission.faults
    max_time = max_time or mission.max_time
    control_period = control_period or mission.control_period
    sim_dt = sim_dt or mission.sim_dt
    vehicle, fs, path = mission.vehicle, mission.free_space, mission.path
    final = mission.points[-1]

    planner = NmpcPlanner(mission.points, fs, params, vehicle, path=path, warm_start=warm_start)
    clock = LingerClock(planner.schedule) if params.mode is Mode.LINGER else None
    log = SimLog(mission.name, params.mode, control_period, n_thrusters=vehicle.n_u)
    state = mission.initial_state
    pending = list(faults.events)
    mask = FaultMask.nominal(vehicle.n_u)
    zero_u = np.zeros(vehicle.n_u)
    logger.info("run '%s': %s mode, %d points, %d fault event(s)",
                mission.name, params.mode.value, len(mission.points), len(pending))

    step = 0
    while True:
        t = step * control_period
        while pending and pending[0].time <= t + 1e-9:
            ev = pending.pop(0)
            mask = mask.with_scale(ev.thruster, ev.scale)
            log.fault_log.append((t, ev.thruster, ev.scale))
            logger.warning("t=%.1f s: thruster %d scaled to %.2f", t, ev.thruster, ev.scale)
        planner.set_true_mask(mask)

        detail = fs.margin_detail(state.r_com_I)
        c_margin = corridor_margin(state.r_com_I, fs.corridor, fs.body_radius)

        def record(u, status=None, result=None):
            force, torque = thruster_wrench(u, vehicle, mask)
            log.records.append(SimRecord(
                step=step, t=t, state=state.as_vector(), u=np.array(u), force=force, torque=torque,
                status=status, solve_time=result.solve_time if result else 0.0,
                iterations=result.iterations if result else 0,
                margin=detail.margin, constraint=detail.constraint, corridor_margin=c_margin,
                progress=planner.progress, schedule_time=clock.time if clock else None,
                slack_max=result.slack_max if result else 0.0,
            ))

        if detail.margin < 0.0:
            record(zero_u)
            log.termination = Termination.COLLISION
            break

        if at_waypoint(state, final):
            if clock is not None:
                clock.observe(state)
                done = clock.complete
            else:
                done = _flyby_finished(state, path, planner.progress)
            if done:
                record(zero_u)
                log.termination = Termination.COMPLETED
                break

        if t >= max_time - 1e-9:
            log.termination = Termination.TIMEOUT
            break

        if planner_enabled:
            result = planner.plan(state, t=clock.time if clock else t)
            u = result.u[0]
            record(u, result.status, result)
            if result.status is PlanStatus.FAILED:
                log.termination = Termination.PLANNER_FAILED
                logger.warning("planner failed at t=%.1f s: %s", t, result.message)
                break
        else:
            u = zero_u
            record(u)

        try:
            state = propagate(state, u, control_period, sim_dt, vehicle, mask)
        except IntegrationError as exc:
            logger.error("plant integration failed at t=%.1f s (%s)", t, exc.component)
            log.termination = Termination.PLANNER_FAILED
            break
        if clock is not None:
            clock.advance(state, control_period)
        step += 1

    logger.info("run '%s' terminated: %s after %d step(s)", mission.name, log.termination.value, len(log))
    return log


# ---------------------------------------------------------------------------
# Batch and bench
# ---------------------------------------------------------------------------

def _run_file(mission_path: str, faults_path: Optional[str], max_time: Optional[float]):
    from utils.mission_io import load_faults, parse_mission

    mission = parse_mission(mission_path)
    faults = load_faults(faults_path, mission.vehicle.n_u) if faults_path else None
    log = run_mission(mission, faults=faults, max_time=max_time)
    return log, compute_metrics(log, mission.path, mission.vehicle)


def run_batch(mission_paths: Sequence[str], faults_paths: Optional[Sequence[Optional[str]]] = None,
              max_time: Optional[float] = None, workers: Optional[int] = None) -> List[Tuple[SimLog, Metrics]]:
    """Run independent missions in separate processes; results keep input order"""
    faults_paths = list(faults_paths) if faults_paths is not None else [None] * len(mission_paths)
    if len(faults_paths) != len(mission_paths):
        raise InvalidArgumentError("one fault file (or None) per mission is required")
    jobs = [(str(m), str(f) if f else None, max_time) for m, f in zip(mission_paths, faults_paths)]
    if workers == 1 or len(jobs) <= 1:
        return [_run_file(*job) for job in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        futures = [pool.submit(_run_file, *job) for job in jobs]
        return [f.result() for f in futures]


@dataclass(frozen=True)
class BenchStats:
    solves: int
    median: float
    p95: float
    mean: float
    worst: float

    @property
    def median_rate_hz(self) -> float:
        return 1.0 / self.median if self.median > 0.0 else float("inf")

    @property
    def meets_real_time(self) -> bool:
        return self.median_rate_hz > REAL_TIME_RATE_HZ


def bench_statistics(log: SimLog) -> BenchStats:
    """Solve-time statistics [s] taken from the run log's own telemetry"""
    times = log.solve_times
    if times.size == 0:
        raise InvalidArgumentError("log holds no planner solves")
    return BenchStats(
        solves=int(times.size),
        median=float(np.median(times)),
        p95=float(np.percentile(times, 95)),
        mean=float(np.mean(times)),
        worst=float(np.max(times)),
    )
