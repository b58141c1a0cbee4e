"""Receding-horizon NMPC planner.

The finite-horizon problem is transcribed by multiple shooting,

    z = [x_0 .. x_N, u_0 .. u_{N-1}, sigma_1 .. sigma_N]

with RK4 defects x_{k+1} - f(x_k, u_k) = 0, hard input and state boxes, and
free-space margins softened by one slack per stage (margin + sigma_k >= 0,
penalty rho (sigma + sigma^2)). x_0 is pinned to the measured state.

Each SQP iteration condenses the Gauss-Newton QP onto (du, dsigma) through
the stage sensitivities, solves it with the dual active-set solver, recovers
defect multipliers by a backward recursion and takes a backtracking step on
an L1 merit function.

Flyby mode augments the state with path progress s (x has 14 entries) and
the input with its rate v_s (u has n_thrusters + 1 entries).
"""
import logging
import time
from dataclasses import dataclass, field, replace
from typing import Callable, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.spatial.transform import Rotation, Slerp

from models.schemas import Mode, PlanStatus
from utils.dynamics import (
    OMEGA, POS, QUAT, STATE_DIM, VEL, FaultMask, State, VehicleModel,
    make_default_vehicle, quat_to_rotmat, rk4_step_vector,
)
from utils.errors import IntegrationError, InvalidArgumentError, InvalidMissionError
from utils.geometry import FreeSpace, InspectionPoint, ReferencePath, build_path, project_to_path
from utils.objective import (
    AUG_STATE_DIM, PROGRESS, FlybyWeights, LingerWeights, Residual,
    flyby_residual, linger_residual,
)
from utils.qp import ActiveSetSolver

logger = logging.getLogger(__name__)

ARRIVAL_TOLERANCE = 0.1   # m
ARRIVAL_SPEED = 0.02      # m/s


# ---------------------------------------------------------------------------
# Parameters
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SqpSettings:
    max_iter: int = 30
    kkt_tol: float = 1e-6
    lambda_reg: float = 1e-8
    armijo: float = 1e-4
    backtrack: float = 0.5
    max_backtracks: int = 12

    def __post_init__(self):
        if self.max_iter < 1:
            raise InvalidArgumentError("max_iter must be at least 1")
        if not self.kkt_tol > 0.0:
            raise InvalidArgumentError("kkt_tol must be positive")


@dataclass(frozen=True, eq=False)
class PlannerParams:
    """Tuning set theta"""
    mode: Mode = Mode.FLYBY
    horizon: int = 20
    dt: float = 0.2
    weights: Optional[Union[LingerWeights, FlybyWeights]] = None
    v_max: float = 0.25
    omega_max: float = 0.2
    rho: float = 1e3
    sqp: SqpSettings = field(default_factory=SqpSettings)
    terminal_radius: float = 0.1
    terminal_speed: float = 0.01
    use_true_mask: bool = False

    def __post_init__(self):
        object.__setattr__(self, "mode", Mode(self.mode))
        if self.horizon < 2:
            raise InvalidArgumentError("horizon must be at least 2 steps")
        if not self.dt > 0.0:
            raise InvalidArgumentError("dt must be positive")
        if not self.rho > 0.0:
            raise InvalidArgumentError("rho must be positive")
        if not self.v_max > 0.0 or not self.omega_max > 0.0:
            raise InvalidArgumentError("velocity limits must be positive")
        if self.weights is None:
            default = LingerWeights.default() if self.mode is Mode.LINGER else FlybyWeights.damped()
            object.__setattr__(self, "weights", default)
        expected = LingerWeights if self.mode is Mode.LINGER else FlybyWeights
        if not isinstance(self.weights, expected):
            raise InvalidArgumentError(f"{self.mode.value} mode needs {expected.__name__}")


# ---------------------------------------------------------------------------
# Linger schedule
# ---------------------------------------------------------------------------

class LingerSchedule:
    """Time-parameterized reference: dwell t_l at each point, smoothstep transit between them"""

    def __init__(self, points: Sequence[InspectionPoint]):
        if not points:
            raise InvalidArgumentError("linger schedule needs at least one inspection point")
        for k, p in enumerate(points):
            if p.t is None or p.t_l is None:
                raise InvalidMissionError(f"inspection point {k} needs t and t_l in linger mode")
        self.points = list(points)
        self.arrivals = np.array([p.t for p in points], dtype=float)
        self.departures = self.arrivals + np.array([p.t_l for p in points], dtype=float)
        for k in range(len(points) - 1):
            if not self.arrivals[k + 1] > self.departures[k]:
                raise InvalidMissionError(
                    f"inspection point {k + 1} arrival t={self.arrivals[k + 1]:g} is not after "
                    f"departure from point {k} at {self.departures[k]:g}"
                )
        self._rates = []
        for a, b in zip(points[:-1], points[1:]):
            rel = Rotation.from_quat(a.orientation).inv() * Rotation.from_quat(b.orientation)
            self._rates.append(rel.as_rotvec())
        self._slerps = [
            Slerp([0.0, 1.0], Rotation.from_quat([a.orientation, b.orientation]))
            for a, b in zip(points[:-1], points[1:])
        ]

    @property
    def end_time(self) -> float:
        return float(self.departures[-1])

    def dwell_index(self, t: float) -> Optional[int]:
        """Waypoint whose dwell interval contains t"""
        inside = np.flatnonzero((self.arrivals <= t) & (t <= self.departures))
        return int(inside[0]) if inside.size else None

    def reference(self, t: float) -> np.ndarray:
        """13-vector reference state at schedule time t (body-frame velocities)"""
        ref = np.zeros(STATE_DIM)
        k = int(np.searchsorted(self.arrivals, t, side="right")) - 1
        if k < 0:
            p = self.points[0]
            ref[POS], ref[QUAT] = p.position, p.orientation
            return ref
        if t <= self.departures[k] or k == len(self.points) - 1:
            p = self.points[k]
            ref[POS], ref[QUAT] = p.position, p.orientation
            return ref
        a, b = self.points[k], self.points[k + 1]
        T = self.arrivals[k + 1] - self.departures[k]
        tau = (t - self.departures[k]) / T
        sigma = tau * tau * (3.0 - 2.0 * tau)
        sigma_dot = 6.0 * tau * (1.0 - tau) / T
        q = self._slerps[k](sigma).as_quat()
        ref[POS] = a.position + sigma * (b.position - a.position)
        ref[QUAT] = q
        ref[VEL] = quat_to_rotmat(q).T @ (sigma_dot * (b.position - a.position))
        ref[OMEGA] = sigma_dot * self._rates[k]
        return ref


def at_waypoint(state: State, point: InspectionPoint,
                tolerance: float = ARRIVAL_TOLERANCE, speed: float = ARRIVAL_SPEED) -> bool:
    return bool(np.linalg.norm(state.r_com_I - point.position) < tolerance and state.speed < speed)


class LingerClock:
    """Schedule clock that stops at an arrival time until the vehicle is actually there"""

    def __init__(self, schedule: LingerSchedule):
        self.schedule = schedule
        self.time = 0.0
        self.arrived = [False] * len(schedule.points)

    def observe(self, state: State):
        for k, p in enumerate(self.schedule.points):
            if not self.arrived[k] and self.schedule.arrivals[k] <= self.time + 1e-9 and at_waypoint(state, p):
                self.arrived[k] = True

    def advance(self, state: State, elapsed: float):
        self.observe(state)
        target = self.time + elapsed
        for k, t_arr in enumerate(self.schedule.arrivals):
            if not self.arrived[k] and t_arr < target:
                target = max(self.time, t_arr)
                break
        self.time = target

    @property
    def held(self) -> bool:
        return any(not a and t <= self.time + 1e-9 for a, t in zip(self.arrived, self.schedule.arrivals))

    @property
    def complete(self) -> bool:
        return all(self.arrived) and self.time >= self.schedule.end_time - 1e-9


# ---------------------------------------------------------------------------
# NLP
# ---------------------------------------------------------------------------

StepFn = Callable[[np.ndarray, np.ndarray], Tuple[np.ndarray, np.ndarray, np.ndarray]]
ConstraintFn = Callable[[np.ndarray], Tuple[np.ndarray, np.ndarray]]


@dataclass(eq=False)
class NlpInstance:
    """Multiple-shooting NLP. Constraint callables return (values, jacobian)
    in the ``values >= 0`` convention."""
    x0: np.ndarray
    horizon: int
    n_x: int
    n_u: int
    step: StepFn
    stage_residual: Callable[[int, np.ndarray, np.ndarray], Residual]
    terminal_residual: Callable[[np.ndarray], Residual]
    u_lower: np.ndarray
    u_upper: np.ndarray
    x_lower: np.ndarray
    x_upper: np.ndarray
    soft_constraints: Optional[Callable[[int, np.ndarray], Tuple[np.ndarray, np.ndarray]]] = None
    terminal_constraint: Optional[ConstraintFn] = None
    terminal_x_lower: Optional[np.ndarray] = None
    terminal_x_upper: Optional[np.ndarray] = None
    rho: float = 1e3
    relaxed: bool = False

    def __post_init__(self):
        N = self.horizon
        self.x0 = np.asarray(self.x0, dtype=float)
        if self.x0.size != self.n_x:
            raise InvalidArgumentError("x0 does not match the state dimension")
        for name, shape in (("u_lower", (N, self.n_u)), ("u_upper", (N, self.n_u)),
                            ("x_lower", (N + 1, self.n_x)), ("x_upper", (N + 1, self.n_x))):
            arr = np.asarray(getattr(self, name), dtype=float)
            if arr.shape != shape:
                raise InvalidArgumentError(f"{name} must have shape {shape}, got {arr.shape}")
            setattr(self, name, arr)

    @property
    def n_slack(self) -> int:
        return self.horizon if self.soft_constraints is not None else 0

    @property
    def dim(self) -> int:
        """(N+1) n_x + N n_u + (N if any soft constraint)"""
        return (self.horizon + 1) * self.n_x + self.horizon * self.n_u + self.n_slack

    def state_bounds(self, k: int) -> Tuple[np.ndarray, np.ndarray]:
        lo, hi = self.x_lower[k], self.x_upper[k]
        if k == self.horizon and self.terminal_x_lower is not None:
            lo = np.maximum(lo, self.terminal_x_lower)
            hi = np.minimum(hi, self.terminal_x_upper)
        return lo, hi

    def relax(self) -> "NlpInstance":
        """Same problem without the terminal set"""
        return replace(self, terminal_constraint=None, terminal_x_lower=None,
                       terminal_x_upper=None, relaxed=True)

    def pack(self, X: np.ndarray, U: np.ndarray, sigma: Optional[np.ndarray] = None) -> np.ndarray:
        parts = [np.asarray(X, dtype=float).ravel(), np.asarray(U, dtype=float).ravel()]
        if self.n_slack:
            parts.append(np.zeros(self.horizon) if sigma is None else np.asarray(sigma, dtype=float))
        return np.concatenate(parts)

    def split(self, z: np.ndarray):
        N, nx, nu = self.horizon, self.n_x, self.n_u
        nX = (N + 1) * nx
        X = z[:nX].reshape(N + 1, nx)
        U = z[nX:nX + N * nu].reshape(N, nu)
        sigma = z[nX + N * nu:] if self.n_slack else np.zeros(0)
        return X, U, sigma

    def rollout_guess(self, U: Optional[np.ndarray] = None) -> "Guess":
        U = np.zeros((self.horizon, self.n_u)) if U is None else np.asarray(U, dtype=float)
        U = np.clip(U, self.u_lower, self.u_upper)
        X = np.empty((self.horizon + 1, self.n_x))
        X[0] = self.x0
        for k in range(self.horizon):
            X[k + 1] = self.step(X[k], U[k])[0]
        return Guess(X, U, np.zeros(self.horizon))


@dataclass(eq=False)
class Guess:
    X: np.ndarray
    U: np.ndarray
    sigma: np.ndarray


@dataclass(frozen=True)
class _Block:
    """Constraint rows c(z) <= 0 touching one stage"""
    stage: int
    values: np.ndarray
    jac_x: Optional[np.ndarray] = None
    jac_u: Optional[np.ndarray] = None
    jac_sigma: Optional[np.ndarray] = None


@dataclass(eq=False)
class Multipliers:
    pi: np.ndarray               # defect multipliers for x_1..x_N, (N, n_x)
    mu: List[np.ndarray]         # per constraint block, >= 0


@dataclass(eq=False)
class PlanResult:
    states: np.ndarray           # x_0..x_N
    inputs: np.ndarray           # decision inputs u_0..u_{N-1} (flyby: thrusters then v_s)
    sigma: np.ndarray
    status: PlanStatus
    kkt_residual: float
    iterations: int
    solve_time: float
    n_thrusters: int
    multipliers: Optional[Multipliers] = None
    merit_history: List[Tuple[float, float]] = field(default_factory=list)   # (before, after) per accepted step
    relaxed_terminal: bool = False
    message: str = ""

    @property
    def u(self) -> np.ndarray:
        return self.inputs[:, :self.n_thrusters]

    @property
    def x_pred(self) -> np.ndarray:
        return self.states[1:]

    @property
    def horizon(self) -> int:
        return self.inputs.shape[0]

    @property
    def slack_max(self) -> float:
        return float(self.sigma.max()) if self.sigma.size else 0.0

    @property
    def slack_sum(self) -> float:
        return float(self.sigma.sum()) if self.sigma.size else 0.0

    @property
    def progress(self) -> Optional[np.ndarray]:
        if self.states.shape[1] == AUG_STATE_DIM:
            return self.states[:, PROGRESS]
        return None

    def as_guess(self) -> Guess:
        return Guess(self.states.copy(), self.inputs.copy(), self.sigma.copy())

    def same_plan(self, other: "PlanResult") -> bool:
        """Equality of everything except wall-clock timing"""
        return (self.status is other.status and self.iterations == other.iterations
                and self.kkt_residual == other.kkt_residual
                and np.array_equal(self.states, other.states)
                and np.array_equal(self.inputs, other.inputs)
                and np.array_equal(self.sigma, other.sigma))


def shift_warm_start(prev: Union[PlanResult, Guess], params: Optional[PlannerParams] = None,
                     x0: Optional[np.ndarray] = None, steps: int = 1) -> Guess:
    """Drop the first ``steps`` stages and duplicate the tail; optionally re-pin x_0"""
    g = prev.as_guess() if isinstance(prev, PlanResult) else prev
    N = g.U.shape[0]
    if N < 2:
        raise InvalidArgumentError("warm start needs at least two stages")
    steps = min(max(steps, 0), N)
    X = np.concatenate([g.X[steps:], np.repeat(g.X[-1:], steps, axis=0)])
    U = np.concatenate([g.U[steps:], np.repeat(g.U[-1:], steps, axis=0)])
    sigma = g.sigma
    if sigma.size:
        sigma = np.concatenate([sigma[steps:], np.repeat(sigma[-1:], steps)])
    if x0 is not None:
        X[0] = x0
    return Guess(X, U, sigma.copy())


# ---------------------------------------------------------------------------
# SQP
# ---------------------------------------------------------------------------

@dataclass(eq=False)
class _Linearization:
    X: np.ndarray
    U: np.ndarray
    sigma: np.ndarray
    f: np.ndarray
    A: List[np.ndarray]
    B: List[np.ndarray]
    defects: np.ndarray
    residuals: List[Residual]    # stages 0..N-1 then terminal
    blocks: List[_Block]
    cost: float


def _constraint_blocks(nlp: NlpInstance, X, U, sigma) -> List[_Block]:
    N, nx, nu = nlp.horizon, nlp.n_x, nlp.n_u
    blocks = []
    eye_u = np.eye(nu)
    for k in range(N):
        blocks.append(_Block(k, np.concatenate([U[k] - nlp.u_upper[k], nlp.u_lower[k] - U[k]]),
                             jac_u=np.vstack([eye_u, -eye_u])))
    for k in range(1, N + 1):
        lo, hi = nlp.state_bounds(k)
        up = np.flatnonzero(np.isfinite(hi))
        dn = np.flatnonzero(np.isfinite(lo))
        if up.size or dn.size:
            jac = np.zeros((up.size + dn.size, nx))
            jac[np.arange(up.size), up] = 1.0
            jac[up.size + np.arange(dn.size), dn] = -1.0
            values = np.concatenate([X[k, up] - hi[up], lo[dn] - X[k, dn]])
            blocks.append(_Block(k, values, jac_x=jac))
        if nlp.soft_constraints is not None:
            g, G = nlp.soft_constraints(k, X[k])
            blocks.append(_Block(k, -g - sigma[k - 1], jac_x=-G, jac_sigma=-np.ones(g.size)))
            blocks.append(_Block(k, np.array([-sigma[k - 1]]), jac_sigma=-np.ones(1)))
    if nlp.terminal_constraint is not None:
        h, Hx = nlp.terminal_constraint(X[N])
        blocks.append(_Block(N, -h, jac_x=-Hx))
    return blocks


def _objective(nlp: NlpInstance, residuals: Sequence[Residual], sigma: np.ndarray) -> float:
    return float(sum(r.cost for r in residuals) + nlp.rho * np.sum(sigma + sigma ** 2))


def _linearize(nlp: NlpInstance, z: np.ndarray) -> _Linearization:
    X, U, sigma = nlp.split(z)
    N = nlp.horizon
    f = np.empty((N, nlp.n_x))
    A, B = [], []
    for k in range(N):
        f[k], Ak, Bk = nlp.step(X[k], U[k])
        A.append(Ak)
        B.append(Bk)
    residuals = [nlp.stage_residual(k, X[k], U[k]) for k in range(N)]
    residuals.append(nlp.terminal_residual(X[N]))
    blocks = _constraint_blocks(nlp, X, U, sigma)
    return _Linearization(X.copy(), U.copy(), sigma.copy(), f, A, B, X[1:] - f, residuals,
                          blocks, _objective(nlp, residuals, sigma))


def _cost_gradient(nlp: NlpInstance, lin: _Linearization):
    """Gradient of the objective split into (X, U, sigma) parts"""
    N = nlp.horizon
    gX = np.zeros((N + 1, nlp.n_x))
    gU = np.zeros((N, nlp.n_u))
    for k in range(N):
        res = lin.residuals[k]
        gX[k] = 2.0 * res.jac_x.T @ res.r
        gU[k] = 2.0 * res.jac_u.T @ res.r
        if res.linear_u is not None:
            gU[k] += res.linear_u
    res = lin.residuals[N]
    gX[N] = 2.0 * res.jac_x.T @ res.r
    gS = nlp.rho * (1.0 + 2.0 * lin.sigma) if nlp.n_slack else np.zeros(0)
    return gX, gU, gS


def _add_constraint_terms(nlp, blocks, mu, gX, gU, gS):
    for block, m in zip(blocks, mu):
        if block.jac_x is not None:
            gX[block.stage] += block.jac_x.T @ m
        if block.jac_u is not None:
            gU[block.stage] += block.jac_u.T @ m
        if block.jac_sigma is not None:
            gS[block.stage - 1] += block.jac_sigma @ m


def _stationarity(nlp: NlpInstance, lin: _Linearization, mult: Multipliers) -> float:
    gX, gU, gS = _cost_gradient(nlp, lin)
    _add_constraint_terms(nlp, lin.blocks, mult.mu, gX, gU, gS)
    N = nlp.horizon
    for k in range(N):
        # L = J + sum pi_{k+1}^T (x_{k+1} - f(x_k, u_k)) + sum mu^T c
        gX[k + 1] += mult.pi[k]
        gX[k] -= lin.A[k].T @ mult.pi[k]
        gU[k] -= lin.B[k].T @ mult.pi[k]
    grad = np.concatenate([gX[1:].ravel(), gU.ravel(), gS])
    return float(np.max(np.abs(grad))) if grad.size else 0.0


def lagrangian_gradient(nlp: NlpInstance, z: np.ndarray, multipliers: Multipliers) -> float:
    """Infinity norm of the Lagrangian gradient at z, x_0 excluded"""
    return _stationarity(nlp, _linearize(nlp, z), multipliers)


def _infeasibility(lin: _Linearization) -> float:
    worst = float(np.max(np.abs(lin.defects))) if lin.defects.size else 0.0
    for block in lin.blocks:
        if block.values.size:
            worst = max(worst, float(np.max(block.values)))
    return worst


def _merit_parts(nlp: NlpInstance, z: np.ndarray) -> Tuple[float, float]:
    """(objective, L1 constraint violation) at z without derivatives"""
    X, U, sigma = nlp.split(z)
    N = nlp.horizon
    violation = 0.0
    for k in range(N):
        violation += float(np.sum(np.abs(X[k + 1] - nlp.step(X[k], U[k])[0])))
    residuals = [nlp.stage_residual(k, X[k], U[k]) for k in range(N)]
    residuals.append(nlp.terminal_residual(X[N]))
    for block in _constraint_blocks(nlp, X, U, sigma):
        violation += float(np.sum(np.maximum(block.values, 0.0)))
    return _objective(nlp, residuals, sigma), violation


def _solve_subproblem(nlp: NlpInstance, lin: _Linearization, settings: SqpSettings,
                      solver: ActiveSetSolver):
    """Condensed Gauss-Newton QP. Returns (dX, dU, dsigma, multipliers) or None if infeasible."""
    N, nx, nu = nlp.horizon, nlp.n_x, nlp.n_u
    nU = N * nu
    nS = nlp.n_slack
    nw = nU + nS

    # sensitivities dx_k = S_k dU + c_k
    S = [np.zeros((nx, nU))]
    c = [np.zeros(nx)]
    for k in range(N):
        Sk = lin.A[k] @ S[k]
        Sk[:, k * nu:(k + 1) * nu] += lin.B[k]
        S.append(Sk)
        c.append(lin.A[k] @ c[k] - lin.defects[k])

    rows, rhs = [], []
    g = np.zeros(nw)
    for k in range(N + 1):
        res = lin.residuals[k]
        Gk = res.jac_x @ S[k]
        if k < N:
            Gk[:, k * nu:(k + 1) * nu] += res.jac_u
            if res.linear_u is not None:
                g[k * nu:(k + 1) * nu] += res.linear_u
        rows.append(Gk)
        rhs.append(res.r + res.jac_x @ c[k])
    Gstack = np.vstack(rows)
    rstack = np.concatenate(rhs)

    H = np.zeros((nw, nw))
    H[:nU, :nU] = 2.0 * Gstack.T @ Gstack
    g[:nU] += 2.0 * Gstack.T @ rstack
    if nS:
        H[nU:, nU:] += 2.0 * nlp.rho * np.eye(nS)
        g[nU:] += nlp.rho * (1.0 + 2.0 * lin.sigma)

    Cin, hin, spans = [], [], []
    start = 0
    for block in lin.blocks:
        m = block.values.size
        Crow = np.zeros((m, nw))
        h = -block.values.copy()
        if block.jac_x is not None:
            Crow[:, :nU] += block.jac_x @ S[block.stage]
            h -= block.jac_x @ c[block.stage]
        if block.jac_u is not None:
            k = block.stage
            Crow[:, k * nu:(k + 1) * nu] += block.jac_u
        if block.jac_sigma is not None:
            Crow[:, nU + block.stage - 1] += block.jac_sigma
        Cin.append(Crow)
        hin.append(h)
        spans.append((start, start + m))
        start += m
    C = np.vstack(Cin) if Cin else np.zeros((0, nw))
    d = np.concatenate(hin) if hin else np.zeros(0)

    lam = settings.lambda_reg
    result = None
    while True:
        try:
            result = solver.solve(H + lam * np.eye(nw), g, G=C, h=d)
            break
        except np.linalg.LinAlgError:
            lam = max(10.0 * lam, 1e-10) * 10.0
            if lam > 1e4:
                return None
            logger.debug("reduced Hessian not positive definite; lambda_reg raised to %.1e", lam)
    if not result.ok:
        return None

    w = result.x
    dU = w[:nU].reshape(N, nu)
    dS = w[nU:]
    dX = np.array([S[k] @ w[:nU] + c[k] for k in range(N + 1)])
    mu = [result.ineq_multipliers[a:b] for a, b in spans]

    # defect multipliers from the x-stationarity of the QP, backwards in k
    pi = np.zeros((N, nx))
    model_grad = []
    for k in range(N + 1):
        res = lin.residuals[k]
        r_lin = res.r + res.jac_x @ dX[k]
        if k < N:
            r_lin = r_lin + res.jac_u @ dU[k]
        model_grad.append(2.0 * res.jac_x.T @ r_lin)
    cons_x = [np.zeros(nx) for _ in range(N + 1)]
    for block, m in zip(lin.blocks, mu):
        if block.jac_x is not None:
            cons_x[block.stage] += block.jac_x.T @ m
    nxt = np.zeros(nx)
    for k in range(N, 0, -1):
        pk = -model_grad[k] - cons_x[k]
        if k < N:
            pk += lin.A[k].T @ nxt
        pi[k - 1] = pk
        nxt = pk
    return dX, dU, dS, Multipliers(pi, mu)


def sqp_solve(nlp: NlpInstance, guess: Optional[Guess] = None,
              params: Union[PlannerParams, SqpSettings, None] = None,
              n_thrusters: Optional[int] = None) -> PlanResult:
    """Gauss-Newton SQP with L1-merit backtracking. Never raises on numerical trouble."""
    settings = params.sqp if isinstance(params, PlannerParams) else (params or SqpSettings())
    n_thrusters = nlp.n_u if n_thrusters is None else n_thrusters
    t_start = time.perf_counter()
    solver = ActiveSetSolver()
    if guess is None:
        guess = nlp.rollout_guess()
    X = np.array(guess.X, dtype=float)
    X[0] = nlp.x0
    U = np.clip(np.array(guess.U, dtype=float), nlp.u_lower, nlp.u_upper)
    sigma = np.maximum(np.array(guess.sigma, dtype=float), 0.0) if nlp.n_slack else None
    if nlp.n_slack and sigma.size != nlp.horizon:
        sigma = np.zeros(nlp.horizon)
    z = nlp.pack(X, U, sigma)

    status = PlanStatus.MAX_ITER
    message = ""
    mult = None
    merit_history = []
    nu_pen = 0.0
    iterations = 0
    relaxed = False
    lin = None

    try:
        while True:
            lin = _linearize(nlp, z)
            if not np.all(np.isfinite(z)) or not np.isfinite(lin.cost):
                status, message = PlanStatus.FAILED, "non-finite iterate"
                break
            if mult is not None:
                if (_stationarity(nlp, lin, mult) <= settings.kkt_tol
                        and _infeasibility(lin) <= settings.kkt_tol):
                    status = PlanStatus.CONVERGED
                    break
            if iterations >= settings.max_iter:
                status = PlanStatus.MAX_ITER
                break

            step = _solve_subproblem(nlp, lin, settings, solver)
            if step is None and not nlp.relaxed and (
                    nlp.terminal_constraint is not None or nlp.terminal_x_lower is not None):
                logger.warning("terminal set infeasible; solving without it")
                nlp = nlp.relax()
                relaxed = True
                lin = _linearize(nlp, z)
                step = _solve_subproblem(nlp, lin, settings, solver)
            if step is None:
                status, message = PlanStatus.FAILED, "QP subproblem infeasible"
                break
            iterations += 1
            dX, dU, dS, new_mult = step
            dz = nlp.pack(dX, dU, dS if nlp.n_slack else None)
            if not np.all(np.isfinite(dz)):
                status, message = PlanStatus.FAILED, "non-finite QP step"
                break

            largest = max([float(np.max(np.abs(new_mult.pi))) if new_mult.pi.size else 0.0]
                          + [float(np.max(m)) for m in new_mult.mu if m.size])
            nu_pen = max(nu_pen, 1.1 * largest)
            gX, gU, gS = _cost_gradient(nlp, lin)
            slope = float(np.concatenate([gX.ravel(), gU.ravel(), gS]) @ dz)
            cost0, viol0 = lin.cost, float(np.sum(np.abs(lin.defects))) + sum(
                float(np.sum(np.maximum(b.values, 0.0))) for b in lin.blocks)
            phi0 = cost0 + nu_pen * viol0
            derivative = slope - nu_pen * viol0

            alpha = 1.0
            accepted = False
            for _ in range(settings.max_backtracks + 1):
                trial = z + alpha * dz
                try:
                    trial_cost, trial_viol = _merit_parts(nlp, trial)
                    phi = trial_cost + nu_pen * trial_viol
                except IntegrationError:
                    phi = np.inf
                bound = phi0 + settings.armijo * alpha * min(derivative, 0.0) + 1e-12 * max(1.0, abs(phi0))
                if np.isfinite(phi) and phi <= bound:
                    accepted = True
                    break
                alpha *= settings.backtrack
            mult = new_mult
            if not accepted:
                message = "line search stalled"
                status = PlanStatus.MAX_ITER
                break
            z = trial
            merit_history.append((float(phi0), float(phi)))
    except IntegrationError as exc:
        status, message = PlanStatus.FAILED, f"integration failure in {exc.component}"
        lin = None

    if lin is None or not np.all(np.isfinite(z)):
        X, U, sigma = nlp.split(nlp.pack(X, U, sigma))
        kkt = float("inf")
    else:
        X, U, sigma = nlp.split(z)
        if mult is None:
            mult = Multipliers(np.zeros((nlp.horizon, nlp.n_x)), [np.zeros(b.values.size) for b in lin.blocks])
        kkt = _stationarity(nlp, lin, mult)
    if relaxed and status is not PlanStatus.FAILED:
        status = PlanStatus.INFEASIBLE_SOFT

    U = np.clip(U, nlp.u_lower, nlp.u_upper)
    if not np.all(np.isfinite(U)):
        U = np.clip(np.nan_to_num(U, nan=0.0), nlp.u_lower, nlp.u_upper)
    return PlanResult(
        states=np.array(X), inputs=U, sigma=np.array(sigma) if nlp.n_slack else np.zeros(0),
        status=status, kkt_residual=kkt, iterations=iterations,
        solve_time=time.perf_counter() - t_start, n_thrusters=n_thrusters,
        multipliers=mult, merit_history=merit_history, relaxed_terminal=relaxed, message=message,
    )


# ---------------------------------------------------------------------------
# Transcription
# ---------------------------------------------------------------------------

def angular_braking(vehicle: VehicleModel) -> float:
    """Smallest body angular acceleration available about any axis in either sense"""
    torque = vehicle.torque_map * vehicle.max_thrust[None, :]
    authority = np.minimum(np.clip(torque, 0.0, None).sum(axis=1), np.clip(-torque, 0.0, None).sum(axis=1))
    return float(np.min(authority / np.diag(vehicle.inertia)))


def velocity_envelope(v0: np.ndarray, limit: float, decel: float, horizon: int, dt: float) -> np.ndarray:
    """Per-stage symmetric bound, relaxed above ``limit`` while an initial overspeed is braked out"""
    k = np.arange(horizon + 1)[:, None]
    return np.maximum(limit, np.abs(v0)[None, :] - decel * k * dt)


def _free_space_constraint(fs: FreeSpace, n_x: int):
    def constraint(k: int, x: np.ndarray):
        values, grads = fs.constraint_values(x[POS])
        jac = np.zeros((values.size, n_x))
        jac[:, POS] = grads
        return values, jac
    return constraint


def _terminal_ball(center: np.ndarray, radius: float, n_x: int):
    def constraint(x: np.ndarray):
        d = x[POS] - center
        jac = np.zeros((1, n_x))
        jac[0, POS] = -2.0 * d
        return np.array([radius ** 2 - d @ d]), jac
    return constraint


def transcribe(x0, targets: Sequence[InspectionPoint], fs: FreeSpace, params: PlannerParams,
               vehicle: Optional[VehicleModel] = None, t: float = 0.0,
               progress: Optional[float] = None, guess: Optional[Guess] = None,
               path: Optional[ReferencePath] = None, schedule: Optional[LingerSchedule] = None,
               mask: Optional[FaultMask] = None) -> NlpInstance:
    """Build the horizon NLP from the measured state and the active inspection points.

    Linger mode tracks the schedule from time ``t`` and adds the terminal set
    (ball of ``terminal_radius`` plus a zero-velocity box) whenever the horizon
    ends inside a waypoint's dwell interval. Flyby mode contours along ``path``
    starting from ``progress`` (projected from x0 when not given).
    """
    if not targets:
        raise InvalidArgumentError("inspection-point window is empty")
    vehicle = vehicle or make_default_vehicle()
    x0v = x0.as_vector() if isinstance(x0, State) else np.asarray(x0, dtype=float).reshape(-1)
    if not np.all(np.isfinite(x0v)):
        raise InvalidArgumentError("initial state must be finite")
    x0v = x0v[:STATE_DIM]
    N, dt = params.horizon, params.dt
    n_thr = vehicle.n_u

    v_env = velocity_envelope(x0v[VEL], params.v_max, vehicle.pair_acceleration(), N, dt)
    w_env = velocity_envelope(x0v[OMEGA], params.omega_max, angular_braking(vehicle), N, dt)

    if params.mode is Mode.LINGER:
        schedule = schedule or LingerSchedule(targets)
        refs = [schedule.reference(t + k * dt) for k in range(N + 1)]
        w = params.weights
        n_x, n_u = STATE_DIM, n_thr

        def step(x, u):
            return rk4_step_vector(x, u, dt, vehicle, mask, jacobians=True)

        def stage_residual(k, x, u):
            return linger_residual(x, u, refs[k], w)

        def terminal_residual(x):
            return linger_residual(x, None, refs[N], w, terminal=True)

        u_lower = np.zeros((N, n_u))
        u_upper = np.tile(vehicle.max_thrust, (N, 1))
        x_start = x0v
    else:
        path = path or build_path(targets)
        if progress is None:
            progress = project_to_path(x0v[POS], path).s
        progress = path.clamp(progress)
        w = params.weights
        n_x, n_u = AUG_STATE_DIM, n_thr + 1

        def step(x, u):
            xn, A13, B13 = rk4_step_vector(x[:STATE_DIM], u[:n_thr], dt, vehicle, mask, jacobians=True)
            A = np.zeros((AUG_STATE_DIM, AUG_STATE_DIM))
            B = np.zeros((AUG_STATE_DIM, n_u))
            A[:STATE_DIM, :STATE_DIM] = A13
            A[PROGRESS, PROGRESS] = 1.0
            B[:STATE_DIM, :n_thr] = B13
            B[PROGRESS, n_thr] = dt
            return np.append(xn, x[PROGRESS] + u[n_thr] * dt), A, B

        def stage_residual(k, x, u):
            return flyby_residual(x, u, path, w, dt)

        def terminal_residual(x):
            return flyby_residual(x, None, path, w, 0.0, terminal=True)

        s_guess = np.full(N, progress) if guess is None else np.clip(guess.X[:N, PROGRESS], 0.0, path.length)
        a_brake = 0.5 * vehicle.pair_acceleration()
        u_lower = np.zeros((N, n_u))
        u_upper = np.zeros((N, n_u))
        u_upper[:, :n_thr] = vehicle.max_thrust
        u_upper[:, n_thr] = [min(params.v_max, path.speed_limit(s, params.v_max, a_brake)) for s in s_guess]
        x_start = np.append(x0v, progress)

    x_lower = np.full((N + 1, n_x), -np.inf)
    x_upper = np.full((N + 1, n_x), np.inf)
    x_lower[:, VEL], x_upper[:, VEL] = -v_env, v_env
    x_lower[:, OMEGA], x_upper[:, OMEGA] = -w_env, w_env
    if params.mode is Mode.FLYBY:
        x_lower[:, PROGRESS], x_upper[:, PROGRESS] = 0.0, path.length

    terminal = None
    t_lo = t_hi = None
    if params.mode is Mode.LINGER:
        idx = schedule.dwell_index(t + N * dt)
        if idx is not None:
            terminal = _terminal_ball(schedule.points[idx].position, params.terminal_radius, n_x)
            t_lo = np.full(n_x, -np.inf)
            t_hi = np.full(n_x, np.inf)
            t_lo[VEL], t_hi[VEL] = -params.terminal_speed, params.terminal_speed

    return NlpInstance(
        x0=x_start, horizon=N, n_x=n_x, n_u=n_u, step=step,
        stage_residual=stage_residual, terminal_residual=terminal_residual,
        u_lower=u_lower, u_upper=u_upper, x_lower=x_lower, x_upper=x_upper,
        soft_constraints=_free_space_constraint(fs, n_x),
        terminal_constraint=terminal, terminal_x_lower=t_lo, terminal_x_upper=t_hi,
        rho=params.rho,
    )


# ---------------------------------------------------------------------------
# Planner
# ---------------------------------------------------------------------------

class NmpcPlanner:
    """Stateful receding-horizon planner: keeps the previous plan for warm
    starts and, in flyby mode, the monotone progress estimate."""

    def __init__(self, points: Sequence[InspectionPoint], fs: FreeSpace, params: PlannerParams,
                 vehicle: Optional[VehicleModel] = None, path: Optional[ReferencePath] = None,
                 warm_start: bool = True):
        if not points:
            raise InvalidArgumentError("inspection-point window is empty")
        self.points = list(points)
        self.fs = fs
        self.params = params
        self.vehicle = vehicle or make_default_vehicle()
        self.warm_start = warm_start
        self.path = None
        self.schedule = None
        if params.mode is Mode.FLYBY:
            self.path = path or build_path(self.points)
        else:
            self.schedule = LingerSchedule(self.points)
        self.mask: Optional[FaultMask] = None
        self.progress: Optional[float] = None
        self._previous: Optional[PlanResult] = None

    def set_true_mask(self, mask: FaultMask):
        """Hand the planner the plant's fault mask (ablation only)"""
        if self.params.use_true_mask:
            self.mask = mask

    def reset(self):
        self.progress = None
        self._previous = None

    def _initial_progress(self, position: np.ndarray) -> float:
        proj = project_to_path(position, self.path, s_hint=self.progress)
        if self.progress is None:
            return proj.s
        return max(proj.s, self.progress)

    def plan(self, x0: State, t: float = 0.0) -> PlanResult:
        x0v = x0.as_vector()
        if not np.all(np.isfinite(x0v)):
            raise InvalidArgumentError("initial state must be finite")
        x_start = x0v
        if self.path is not None:
            self.progress = self._initial_progress(x0.r_com_I)
            x_start = np.append(x0v, self.progress)

        guess = None
        if self.warm_start and self._previous is not None:
            guess = shift_warm_start(self._previous, self.params, x0=x_start)
        nlp = transcribe(x0v, self.points, self.fs, self.params, self.vehicle, t=t,
                         progress=self.progress, guess=guess, path=self.path,
                         schedule=self.schedule, mask=self.mask)
        if guess is None:
            guess = nlp.rollout_guess()
        result = sqp_solve(nlp, guess, self.params, n_thrusters=self.vehicle.n_u)
        self._previous = result if result.status is not PlanStatus.FAILED else None
        logger.debug(
            "plan t=%.2f status=%s iter=%d kkt=%.2e slack_max=%.3e wall=%.1fms",
            t, result.status.value, result.iterations, result.kkt_residual,
            result.slack_max, 1e3 * result.solve_time,
        )
        return result


def plan(points: Sequence[InspectionPoint], fs: FreeSpace, x0: State, params: PlannerParams,
         vehicle: Optional[VehicleModel] = None, t: float = 0.0,
         path: Optional[ReferencePath] = None) -> PlanResult:
    """One-shot planner call from a cold start"""
    return NmpcPlanner(points, fs, params, vehicle, path=path).plan(x0, t)
