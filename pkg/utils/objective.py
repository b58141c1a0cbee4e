"""Stage and terminal costs for the two tracking modes.

Linger mode tracks a time-parameterized reference pose with a quadratic form
on the 12-dim error (position, attitude error, body velocity, body rate).
Flyby mode contours along the reference path: contour and lag errors at the
current progress s, attitude relative to the path's slerped orientation, and
a reward on the progress rate v_s.

Every cost is also available as a residual, cost = |r|^2 + linear, which is
what the Gauss-Newton planner consumes.
"""
import logging
from dataclasses import dataclass, field
from typing import NamedTuple, Optional, Union

import numpy as np

from utils.dynamics import (
    OMEGA, POS, QUAT, STATE_DIM, VEL, State, _rotated_velocity_jacobian,
    quat_conjugate, quat_left_matrix, quat_to_rotmat,
)
from utils.errors import InvalidArgumentError
from utils.geometry import ReferencePath

logger = logging.getLogger(__name__)

ERROR_DIM = 12
AUG_STATE_DIM = STATE_DIM + 1
PROGRESS = STATE_DIM  # index of s in the augmented state


def _symmetric_sqrt(M: np.ndarray, name: str) -> np.ndarray:
    """S with S.T @ S == M for symmetric PSD M"""
    if not np.allclose(M, M.T, rtol=0.0, atol=1e-12):
        raise InvalidArgumentError(f"{name} must be symmetric")
    vals, vecs = np.linalg.eigh(M)
    if vals[0] < -1e-12 * max(1.0, vals[-1]):
        raise InvalidArgumentError(f"{name} must be positive semidefinite")
    return np.sqrt(np.clip(vals, 0.0, None))[:, None] * vecs.T


def _input_sqrt(R: np.ndarray) -> np.ndarray:
    if not np.allclose(R, R.T, rtol=0.0, atol=1e-12):
        raise InvalidArgumentError("R must be symmetric")
    try:
        return np.linalg.cholesky(R).T
    except np.linalg.LinAlgError as exc:
        raise InvalidArgumentError("R must be positive definite") from exc


def default_state_weights() -> np.ndarray:
    return np.diag([10.0] * 3 + [5.0] * 3 + [1.0] * 3 + [1.0] * 3)


@dataclass(frozen=True, eq=False)
class LingerWeights:
    Q: np.ndarray
    R: np.ndarray
    Q_N: np.ndarray

    def __post_init__(self):
        Q = np.asarray(self.Q, dtype=float)
        Q_N = np.asarray(self.Q_N, dtype=float)
        R = np.atleast_2d(np.asarray(self.R, dtype=float))
        if Q.shape != (ERROR_DIM, ERROR_DIM) or Q_N.shape != (ERROR_DIM, ERROR_DIM):
            raise InvalidArgumentError("Q and Q_N must be 12x12")
        object.__setattr__(self, "Q", Q)
        object.__setattr__(self, "Q_N", Q_N)
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "Q_sqrt", _symmetric_sqrt(Q, "Q"))
        object.__setattr__(self, "Q_N_sqrt", _symmetric_sqrt(Q_N, "Q_N"))
        object.__setattr__(self, "R_sqrt", _input_sqrt(R))

    @classmethod
    def default(cls, n_u: int = 12) -> "LingerWeights":
        Q = default_state_weights()
        return cls(Q=Q, R=0.1 * np.eye(n_u), Q_N=10.0 * Q)

    def scaled(self, alpha: float) -> "LingerWeights":
        return LingerWeights(alpha * self.Q, alpha * self.R, alpha * self.Q_N)


@dataclass(frozen=True, eq=False)
class FlybyWeights:
    """Contouring weights. q_v and q_omega damp velocity against the progress
    rate and body rate and are off unless a planner opts in; terminal_scale
    multiplies the path terms at the horizon end."""
    q_c: float = 50.0
    q_l: float = 10.0
    q_att: float = 5.0
    mu: float = 2.0
    R: np.ndarray = field(default_factory=lambda: 0.1 * np.eye(12))
    q_v: float = 0.0
    q_omega: float = 0.0
    terminal_scale: float = 10.0

    def __post_init__(self):
        for name in ("q_c", "q_l", "q_att", "mu", "q_v", "q_omega"):
            if getattr(self, name) < 0.0:
                raise InvalidArgumentError(f"{name} must be non-negative")
        if not self.terminal_scale > 0.0:
            raise InvalidArgumentError("terminal_scale must be positive")
        R = np.atleast_2d(np.asarray(self.R, dtype=float))
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "R_sqrt", _input_sqrt(R))

    @classmethod
    def damped(cls, q_v: float = 1.0, q_omega: float = 1.0) -> "FlybyWeights":
        """Planner defaults: path weights plus velocity and body-rate damping"""
        return cls(q_v=q_v, q_omega=q_omega)

    def scaled(self, alpha: float) -> "FlybyWeights":
        return FlybyWeights(alpha * self.q_c, alpha * self.q_l, alpha * self.q_att, alpha * self.mu,
                            alpha * self.R, alpha * self.q_v, alpha * self.q_omega, self.terminal_scale)


@dataclass(frozen=True, eq=False)
class AugmentedState:
    """Flyby state: rigid body plus path progress s and its rate v_s"""
    state: State
    s: float
    v_s: float = 0.0

    def __post_init__(self):
        if self.v_s < 0.0:
            raise InvalidArgumentError("progress rate v_s must be non-negative")

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.state.as_vector(), [self.s]])


# ---------------------------------------------------------------------------
# Attitude error
# ---------------------------------------------------------------------------

def attitude_error(q, q_ref) -> np.ndarray:
    """2 vec(q_ref^-1 (x) q), sign chosen for the shortest rotation"""
    e = quat_left_matrix(quat_conjugate(np.asarray(q_ref, dtype=float))) @ np.asarray(q, dtype=float)
    sign = -1.0 if e[3] < 0.0 else 1.0
    return sign * 2.0 * e[:3]


def attitude_error_jacobian(q, q_ref) -> np.ndarray:
    """d attitude_error / dq, 3x4 (exact: the map is linear in q)"""
    L = quat_left_matrix(quat_conjugate(np.asarray(q_ref, dtype=float)))
    e = L @ np.asarray(q, dtype=float)
    sign = -1.0 if e[3] < 0.0 else 1.0
    return sign * 2.0 * L[:3, :]


def _attitude_error_progress_rate(q: np.ndarray, q_ref: np.ndarray, omega_s: np.ndarray) -> np.ndarray:
    """d attitude_error / ds when q_ref(s) rotates at body rate omega_s per metre"""
    e = quat_left_matrix(quat_conjugate(q_ref)) @ q
    sign = -1.0 if e[3] < 0.0 else 1.0
    return sign * (-e[3] * omega_s - np.cross(omega_s, e[:3]))


# ---------------------------------------------------------------------------
# Residual forms
# ---------------------------------------------------------------------------

class Residual(NamedTuple):
    """cost = r.r + linear; jacobians with respect to (state, input)"""
    r: np.ndarray
    jac_x: np.ndarray
    jac_u: Optional[np.ndarray]
    linear: float = 0.0
    linear_u: Optional[np.ndarray] = None
    one_sided: bool = False

    @property
    def cost(self) -> float:
        return float(self.r @ self.r + self.linear)


def _vector(x, size: int) -> np.ndarray:
    if isinstance(x, State):
        x = x.as_vector()
    elif isinstance(x, AugmentedState):
        x = x.as_vector()
    x = np.asarray(x, dtype=float).reshape(-1)
    if x.size != size:
        raise InvalidArgumentError(f"expected a {size}-vector, got {x.size} entries")
    return x


def tracking_error(x, x_ref) -> np.ndarray:
    """12-dim linger error between a state and its reference"""
    xv, rv = _vector(x, STATE_DIM), _vector(x_ref, STATE_DIM)
    return np.concatenate([
        xv[POS] - rv[POS],
        attitude_error(xv[QUAT], rv[QUAT]),
        xv[VEL] - rv[VEL],
        xv[OMEGA] - rv[OMEGA],
    ])


def _tracking_error_jacobian(xv: np.ndarray, rv: np.ndarray) -> np.ndarray:
    J = np.zeros((ERROR_DIM, STATE_DIM))
    J[0:3, POS] = np.eye(3)
    J[3:6, QUAT] = attitude_error_jacobian(xv[QUAT], rv[QUAT])
    J[6:9, VEL] = np.eye(3)
    J[9:12, OMEGA] = np.eye(3)
    return J


def linger_residual(x, u, x_ref, w: LingerWeights, terminal: bool = False) -> Residual:
    xv, rv = _vector(x, STATE_DIM), _vector(x_ref, STATE_DIM)
    e = tracking_error(xv, rv)
    S = w.Q_N_sqrt if terminal else w.Q_sqrt
    Je = S @ _tracking_error_jacobian(xv, rv)
    if terminal:
        return Residual(S @ e, Je, None)
    uv = np.asarray(u, dtype=float).reshape(-1)
    n_u = uv.size
    r = np.concatenate([S @ e, w.R_sqrt @ uv])
    jac_x = np.vstack([Je, np.zeros((n_u, STATE_DIM))])
    jac_u = np.vstack([np.zeros((ERROR_DIM, n_u)), w.R_sqrt])
    return Residual(r, jac_x, jac_u)


def contour_lag(p: np.ndarray, s: float, path: ReferencePath):
    """(e_c vector, e_l, tangent, path point) at progress s"""
    point = path.position(s)
    t = path.tangent(s)
    d = p - point
    e_l = float(t @ d)
    return d - e_l * t, e_l, t, point


def _clamped_progress(s: float, path: ReferencePath) -> float:
    if s < 0.0 or s > path.length:
        clamped = path.clamp(s)
        logger.warning("progress s=%.6f outside [0, %.3f]; clamped to %.6f", s, path.length, clamped)
        return clamped
    return s


def flyby_residual(xa, u, path: ReferencePath, w: FlybyWeights, dt: float,
                   terminal: bool = False) -> Residual:
    """Residual of the contouring cost. ``u`` is the 12 thruster commands
    followed by the progress rate v_s (ignored when terminal)."""
    xv = _vector(xa, AUG_STATE_DIM)
    s = _clamped_progress(float(xv[PROGRESS]), path)
    p, q, v, omega = xv[POS], xv[QUAT], xv[VEL], xv[OMEGA]
    e_c, e_l, t, _ = contour_lag(p, s, path)
    kappa = path.tangent_rate(s)
    d = e_c + e_l * t
    q_ref = path.orientation(s)
    omega_s = path.orientation_rate(s)
    one_sided = path.at_kink(s)

    scale = w.terminal_scale if terminal else 1.0
    sc = np.sqrt(scale * w.q_c)
    sl = np.sqrt(scale * w.q_l)
    sa = np.sqrt(scale * w.q_att)
    so = np.sqrt(scale * w.q_omega)

    de_l_ds = float(kappa @ d) - 1.0
    de_c_ds = -float(kappa @ d) * t - e_l * kappa

    blocks_r = [sc * e_c, [sl * e_l], sa * attitude_error(q, q_ref), so * omega]
    jac = [np.zeros((3, AUG_STATE_DIM)), np.zeros((1, AUG_STATE_DIM)),
           np.zeros((3, AUG_STATE_DIM)), np.zeros((3, AUG_STATE_DIM))]
    jac[0][:, POS] = sc * (np.eye(3) - np.outer(t, t))
    jac[0][:, PROGRESS] = sc * de_c_ds
    jac[1][0, POS] = sl * t
    jac[1][0, PROGRESS] = sl * de_l_ds
    jac[2][:, QUAT] = sa * attitude_error_jacobian(q, q_ref)
    jac[2][:, PROGRESS] = sa * _attitude_error_progress_rate(q, q_ref, omega_s)
    jac[3][:, OMEGA] = so * np.eye(3)

    if terminal:
        r = np.concatenate([np.atleast_1d(b) for b in blocks_r])
        return Residual(r, np.vstack(jac), None, one_sided=one_sided)

    uv = np.asarray(u, dtype=float).reshape(-1)
    n_u = uv.size - 1
    v_s = float(uv[-1])
    sv = np.sqrt(w.q_v)
    R_q = quat_to_rotmat(q)
    v_err = R_q @ v - t * v_s
    jv = np.zeros((3, AUG_STATE_DIM))
    jv[:, QUAT] = sv * _rotated_velocity_jacobian(q, v, R_q @ v)
    jv[:, VEL] = sv * R_q
    jv[:, PROGRESS] = -sv * v_s * kappa

    r = np.concatenate([np.atleast_1d(b) for b in blocks_r] + [sv * v_err, w.R_sqrt @ uv[:n_u]])
    jac_x = np.vstack(jac + [jv, np.zeros((n_u, AUG_STATE_DIM))])
    n_r = r.size
    jac_u = np.zeros((n_r, n_u + 1))
    jac_u[n_r - n_u - 3:n_r - n_u, n_u] = -sv * t
    jac_u[n_r - n_u:, :n_u] = w.R_sqrt
    linear_u = np.zeros(n_u + 1)
    linear_u[n_u] = -w.mu * dt
    return Residual(r, jac_x, jac_u, linear=-w.mu * v_s * dt, linear_u=linear_u, one_sided=one_sided)


# ---------------------------------------------------------------------------
# Costs
# ---------------------------------------------------------------------------

def linger_stage_cost(x: Union[State, np.ndarray], u, x_ref, w: LingerWeights) -> float:
    return linger_residual(x, u, x_ref, w).cost


def linger_terminal_cost(x_N: Union[State, np.ndarray], x_ref, w: LingerWeights) -> float:
    return linger_residual(x_N, None, x_ref, w, terminal=True).cost


def _decision_input(xa, u) -> np.ndarray:
    """Thruster commands plus v_s. An AugmentedState carries v_s itself and
    takes thruster-only u; a raw 14-vector takes the full decision input."""
    uv = np.asarray(u, dtype=float).reshape(-1)
    if isinstance(xa, AugmentedState):
        return np.append(uv, xa.v_s)
    return uv


def flyby_stage_cost(xa, u, path: ReferencePath, w: FlybyWeights, dt: float) -> float:
    """q_c e_c^2 + q_l e_l^2 + q_att |att_err|^2 + u'Ru - mu v_s dt, plus any damping in w"""
    return flyby_residual(xa, _decision_input(xa, u), path, w, dt).cost


def flyby_terminal_cost(xa, path: ReferencePath, w: FlybyWeights) -> float:
    return flyby_residual(xa, None, path, w, dt=0.0, terminal=True).cost


class Gradient(NamedTuple):
    x: np.ndarray
    u: Optional[np.ndarray]
    one_sided: bool = False


def residual_gradient(res: Residual) -> Gradient:
    gx = 2.0 * res.jac_x.T @ res.r
    gu = None
    if res.jac_u is not None:
        gu = 2.0 * res.jac_u.T @ res.r
        if res.linear_u is not None:
            gu = gu + res.linear_u
    return Gradient(gx, gu, res.one_sided)


_RESIDUAL_FORMS = {
    linger_stage_cost: lambda x, u, x_ref, w: linger_residual(x, u, x_ref, w),
    linger_terminal_cost: lambda x, x_ref, w: linger_residual(x, None, x_ref, w, terminal=True),
    flyby_stage_cost: lambda xa, u, path, w, dt: flyby_residual(xa, _decision_input(xa, u), path, w, dt),
    flyby_terminal_cost: lambda xa, path, w: flyby_residual(xa, None, path, w, 0.0, terminal=True),
}


def cost_gradient(cost_fn, *args) -> Gradient:
    """Analytic gradient of one of the cost functions at ``args``.

    On a linear-path kink the outgoing segment's derivative is returned and
    ``one_sided`` is set.
    """
    try:
        form = _RESIDUAL_FORMS[cost_fn]
    except KeyError:
        raise InvalidArgumentError(f"no analytic gradient registered for {getattr(cost_fn, '__name__', cost_fn)}")
    grad = residual_gradient(form(*args))
    if grad.one_sided:
        logger.debug("cost gradient evaluated on a path kink; returning one-sided derivative")
    return grad
