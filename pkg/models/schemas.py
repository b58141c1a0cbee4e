from pydantic import AfterValidator, BaseModel, Field, field_validator, model_validator
from typing import Annotated, Dict, List, Literal, Optional, Union
from enum import Enum

Vec3 = Annotated[List[float], Field(min_length=3, max_length=3)]
IDENTITY_QUAT = [0.0, 0.0, 0.0, 1.0]


# Enums
class Mode(str, Enum):
    LINGER = "linger"
    FLYBY = "flyby"

class Interpolation(str, Enum):
    LINEAR = "linear"
    CUBIC = "cubic"

class PlanStatus(str, Enum):
    CONVERGED = "converged"
    MAX_ITER = "max_iter"
    INFEASIBLE_SOFT = "infeasible_soft"
    FAILED = "failed"

class Termination(str, Enum):
    COMPLETED = "completed"
    COLLISION = "collision"
    PLANNER_FAILED = "planner_failed"
    TIMEOUT = "timeout"


def _check_unit_quaternion(q: List[float]) -> List[float]:
    norm = sum(c * c for c in q) ** 0.5
    if abs(norm - 1.0) > 1e-6:
        raise ValueError(f"quaternion must have unit norm (got {norm:.6f})")
    return q


Quat = Annotated[List[float], Field(min_length=4, max_length=4), AfterValidator(_check_unit_quaternion)]


# Vehicle
class ThrusterSpec(BaseModel):
    position: Vec3
    direction: Vec3
    max_thrust: float = Field(..., gt=0)

    class Config:
        extra = "forbid"

class VehicleSpec(BaseModel):
    mass: float = Field(default=10.0, gt=0)
    inertia: Union[Vec3, Annotated[List[Vec3], Field(min_length=3, max_length=3)]] = Field(
        default_factory=lambda: [0.25, 0.25, 0.25],
        description="principal moments [kg m^2] or a full 3x3 matrix",
    )
    body_radius: float = Field(default=0.3, gt=0)
    isp: float = Field(default=40.0, gt=0)
    max_thrust: float = Field(default=0.2, gt=0, description="per-thruster limit for the default layout")
    thrusters: Optional[List[ThrusterSpec]] = Field(default=None, min_length=1)

    class Config:
        extra = "forbid"


# Geometry
class InspectionPointSpec(BaseModel):
    position: Vec3
    orientation: Quat = Field(default_factory=lambda: list(IDENTITY_QUAT))
    radius: float = Field(default=1.0, gt=0, description="corridor radius r_ins [m]")
    t: Optional[float] = Field(default=None, ge=0)
    t_l: Optional[float] = Field(default=None, ge=0)

    class Config:
        extra = "forbid"

class KeepOutSpec(BaseModel):
    name: str = Field(..., min_length=1, max_length=64)
    center: Vec3
    semi_axes: Optional[Vec3] = None
    orientation: Quat = Field(default_factory=lambda: list(IDENTITY_QUAT))
    shape: Optional[Annotated[List[Vec3], Field(min_length=3, max_length=3)]] = None

    class Config:
        extra = "forbid"

    @field_validator("semi_axes")
    @classmethod
    def _positive_axes(cls, v):
        if v is not None and min(v) <= 0:
            raise ValueError("semi_axes must be positive")
        return v

    @model_validator(mode="after")
    def _one_description(self):
        if (self.semi_axes is None) == (self.shape is None):
            raise ValueError("give exactly one of semi_axes or shape")
        return self


# Planner tuning (theta)
def _default_q_diag() -> List[float]:
    return [10.0] * 3 + [5.0] * 3 + [1.0] * 3 + [1.0] * 3

class LingerWeightSpec(BaseModel):
    q_diag: Annotated[List[float], Field(min_length=12, max_length=12)] = Field(default_factory=_default_q_diag)
    r: float = Field(default=0.1, gt=0)
    terminal_scale: float = Field(default=10.0, gt=0)

    class Config:
        extra = "forbid"

    @field_validator("q_diag")
    @classmethod
    def _non_negative(cls, v):
        if min(v) < 0:
            raise ValueError("q_diag entries must be non-negative")
        return v

class FlybyWeightSpec(BaseModel):
    q_c: float = Field(default=50.0, ge=0)
    q_l: float = Field(default=10.0, ge=0)
    q_att: float = Field(default=5.0, ge=0)
    mu: float = Field(default=2.0, ge=0)
    r: float = Field(default=0.1, gt=0)
    q_v: float = Field(default=1.0, ge=0)
    q_omega: float = Field(default=1.0, ge=0)
    terminal_scale: float = Field(default=10.0, gt=0)

    class Config:
        extra = "forbid"

class PlannerSpec(BaseModel):
    horizon: int = Field(default=20, ge=2)
    dt: float = Field(default=0.2, gt=0)
    v_max: float = Field(default=0.25, gt=0)
    omega_max: float = Field(default=0.2, gt=0)
    rho: float = Field(default=1000.0, gt=0)
    max_iter: int = Field(default=30, ge=1)
    kkt_tol: float = Field(default=1e-6, gt=0)
    lambda_reg: float = Field(default=1e-8, ge=0)
    armijo: float = Field(default=1e-4, gt=0, lt=1)
    backtrack: float = Field(default=0.5, gt=0, lt=1)
    max_backtracks: int = Field(default=12, ge=0)
    terminal_radius: float = Field(default=0.1, gt=0)
    terminal_speed: float = Field(default=0.01, gt=0)
    use_true_mask: bool = False
    linger: LingerWeightSpec = Field(default_factory=LingerWeightSpec)
    flyby: FlybyWeightSpec = Field(default_factory=FlybyWeightSpec)

    class Config:
        extra = "forbid"


# Faults, initial condition, simulation and export
class FaultEventSpec(BaseModel):
    time: float = Field(default=0.0, ge=0)
    thruster: int = Field(..., ge=0)
    scale: float = Field(default=0.0, ge=0, le=1)

    class Config:
        extra = "forbid"

class FaultFile(BaseModel):
    schema_version: Literal[1] = 1
    faults: List[FaultEventSpec] = Field(default_factory=list)

    class Config:
        extra = "forbid"

class InitialStateSpec(BaseModel):
    position: Optional[Vec3] = None
    orientation: Optional[Quat] = None
    velocity: Vec3 = Field(default_factory=lambda: [0.0, 0.0, 0.0])
    omega: Vec3 = Field(default_factory=lambda: [0.0, 0.0, 0.0])

    class Config:
        extra = "forbid"

class SimulationSpec(BaseModel):
    control_period: Optional[float] = Field(default=None, gt=0)
    sim_dt: Optional[float] = Field(default=None, gt=0)
    max_time: Optional[float] = Field(default=None, gt=0)

    class Config:
        extra = "forbid"

class ExportSpec(BaseModel):
    trajectory: str = "trajectory.csv"
    metrics: str = "metrics.txt"
    summary: str = "summary.json"

    class Config:
        extra = "forbid"


# Mission file
class MissionFile(BaseModel):
    schema_version: Literal[1] = 1
    name: str = Field(default="mission", min_length=1, max_length=100)
    mode: Mode = Mode.FLYBY
    interpolation: Interpolation = Interpolation.LINEAR
    vehicle: VehicleSpec = Field(default_factory=VehicleSpec)
    inspection_points: List[InspectionPointSpec] = Field(..., min_length=2)
    keepouts: List[KeepOutSpec] = Field(default_factory=list)
    planner: PlannerSpec = Field(default_factory=PlannerSpec)
    faults: List[FaultEventSpec] = Field(default_factory=list)
    initial_state: Optional[InitialStateSpec] = None
    simulation: SimulationSpec = Field(default_factory=SimulationSpec)
    export: ExportSpec = Field(default_factory=ExportSpec)

    class Config:
        extra = "forbid"

    @model_validator(mode="after")
    def _linger_timing(self):
        if self.mode is Mode.LINGER:
            for k, p in enumerate(self.inspection_points):
                if p.t is None or p.t_l is None:
                    raise ValueError(f"inspection_points[{k}] needs t and t_l in linger mode")
        names = [k.name for k in self.keepouts]
        if len(set(names)) != len(names):
            raise ValueError("keep-out names must be unique")
        return self


# API Models
class ViolationOut(BaseModel):
    kind: str
    index: int
    constraint: str
    margin: float
    s_start: float
    s_end: float

class ValidationReport(BaseModel):
    valid: bool
    name: str
    mode: Mode
    path_length: Optional[float] = None
    violations: List[ViolationOut] = Field(default_factory=list)
    warnings: List[str] = Field(default_factory=list)

class RunRequest(BaseModel):
    mission: MissionFile
    faults: Optional[List[FaultEventSpec]] = Field(
        default=None, description="replaces the mission's own fault schedule when given"
    )
    max_time: Optional[float] = Field(default=None, gt=0)

class MetricsOut(BaseModel):
    completed: bool
    avg_lateral_dev: float
    total_translational_impulse: Optional[float] = None
    realized_impulse: float
    inspect_time: Optional[float] = None
    propellant_mass: Optional[float] = None
    max_corridor_violation: float

class ViolationEventOut(BaseModel):
    step: int
    t: float
    constraint: str
    margin: float

class RunResponse(BaseModel):
    name: str
    termination: Termination
    steps: int
    metrics: MetricsOut
    violation: Optional[ViolationEventOut] = None
    status_counts: Dict[str, int] = Field(default_factory=dict)
