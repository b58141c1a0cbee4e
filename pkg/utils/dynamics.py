"""Six degree-of-freedom free-flyer dynamics.

State ordering is (r_com_I, q_IB, v_com_B, omega_B), 13 numbers. Quaternions are
Hamilton, scalar-last (x, y, z, w), and rotate body vectors into the station
(inertial) frame. The station frame is treated as inertial: no gravity or
orbital terms.
"""
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple, Union

import numpy as np

from utils.errors import IntegrationError, InvalidArgumentError, InvalidModelError

STATE_DIM = 13
STATE_LABELS = (
    "r_x", "r_y", "r_z",
    "q_x", "q_y", "q_z", "q_w",
    "v_x", "v_y", "v_z",
    "w_x", "w_y", "w_z",
)

# index slices into the 13-vector
POS = slice(0, 3)
QUAT = slice(3, 7)
VEL = slice(7, 10)
OMEGA = slice(10, 13)

DEFAULT_MASS = 10.0
DEFAULT_ISP = 40.0
DEFAULT_BODY_RADIUS = 0.3
DEFAULT_MAX_THRUST = 0.2
DEFAULT_INERTIA = (0.25, 0.25, 0.25)

# Thruster arm along the firing axis and the lateral offset that gives each
# member of a pair its torque.
_THRUSTER_ARM = 0.2
_THRUSTER_OFFSET = 0.1

ControlInput = np.ndarray  # n_u per-thruster force magnitudes [N]


def _as_vector(value, size: int, name: str) -> np.ndarray:
    arr = np.asarray(value, dtype=float).reshape(-1)
    if arr.size != size:
        raise InvalidArgumentError(f"{name} must have {size} components, got {arr.size}")
    if not np.all(np.isfinite(arr)):
        raise InvalidArgumentError(f"{name} contains non-finite values")
    return arr


def _frozen(arr: np.ndarray) -> np.ndarray:
    arr = np.array(arr, dtype=float)
    arr.setflags(write=False)
    return arr


def skew(v: np.ndarray) -> np.ndarray:
    """Cross-product matrix, skew(a) @ b == a x b"""
    return np.array([
        [0.0, -v[2], v[1]],
        [v[2], 0.0, -v[0]],
        [-v[1], v[0], 0.0],
    ])


# ---------------------------------------------------------------------------
# Quaternion algebra (scalar-last)
# ---------------------------------------------------------------------------

def normalize_quaternion(q) -> np.ndarray:
    q = _as_vector(q, 4, "quaternion")
    n = np.linalg.norm(q)
    if n == 0.0:
        raise InvalidArgumentError("quaternion has zero norm")
    return q / n


def quat_conjugate(q: np.ndarray) -> np.ndarray:
    return np.array([-q[0], -q[1], -q[2], q[3]])


def quat_left_matrix(a: np.ndarray) -> np.ndarray:
    """Matrix L(a) with a ⊗ b == L(a) @ b"""
    av, aw = a[:3], a[3]
    out = np.empty((4, 4))
    out[:3, :3] = aw * np.eye(3) + skew(av)
    out[:3, 3] = av
    out[3, :3] = -av
    out[3, 3] = aw
    return out


def quat_multiply(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Hamilton product a ⊗ b"""
    av, aw = a[:3], a[3]
    bv, bw = b[:3], b[3]
    vec = aw * bv + bw * av + np.cross(av, bv)
    return np.array([vec[0], vec[1], vec[2], aw * bw - av @ bv])


def quat_to_rotmat(q) -> np.ndarray:
    """Rotation matrix R_IB (body -> inertial). q is renormalized internally."""
    x, y, z, w = normalize_quaternion(q)
    return np.array([
        [1.0 - 2.0 * (y * y + z * z), 2.0 * (x * y - z * w), 2.0 * (x * z + y * w)],
        [2.0 * (x * y + z * w), 1.0 - 2.0 * (x * x + z * z), 2.0 * (y * z - x * w)],
        [2.0 * (x * z - y * w), 2.0 * (y * z + x * w), 1.0 - 2.0 * (x * x + y * y)],
    ])


def quat_kinematic_matrix(q: np.ndarray) -> np.ndarray:
    """H(q), 3x4, such that q_dot = 0.5 * H(q).T @ omega_B"""
    qv, qw = q[:3], q[3]
    H_T = np.empty((4, 3))
    H_T[:3, :] = qw * np.eye(3) + skew(qv)
    H_T[3, :] = -qv
    return H_T.T


def quat_rate(q, omega_B) -> np.ndarray:
    q = _as_vector(q, 4, "quaternion")
    omega_B = _as_vector(omega_B, 3, "omega_B")
    return _quat_rate(q, omega_B)


def _quat_rate(q: np.ndarray, w: np.ndarray) -> np.ndarray:
    qv, qw = q[:3], q[3]
    vec = 0.5 * (qw * w + np.cross(qv, w))
    return np.array([vec[0], vec[1], vec[2], -0.5 * (qv @ w)])


def _rotated_velocity_jacobian(q: np.ndarray, v: np.ndarray, Rv: np.ndarray) -> np.ndarray:
    """d(R(q/|q|) v)/dq, 3x4"""
    n = np.linalg.norm(q)
    qh = q / n
    qv, qw = qh[:3], qh[3]
    J = np.empty((3, 4))
    J[:, :3] = (-2.0 * np.outer(v, qv) + 2.0 * (qv @ v) * np.eye(3)
                + 2.0 * np.outer(qv, v) - 2.0 * qw * skew(v))
    J[:, 3] = 2.0 * qw * v + 2.0 * np.cross(qv, v)
    return (J - 2.0 * np.outer(Rv, qh)) / n


# ---------------------------------------------------------------------------
# Domain types
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class State:
    """Rigid-body state: position [m, inertial], attitude, body velocity [m/s], body rate [rad/s]"""
    r_com_I: np.ndarray
    q_IB: np.ndarray
    v_com_B: np.ndarray
    omega_B: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "r_com_I", _frozen(_as_vector(self.r_com_I, 3, "r_com_I")))
        object.__setattr__(self, "q_IB", _frozen(normalize_quaternion(self.q_IB)))
        object.__setattr__(self, "v_com_B", _frozen(_as_vector(self.v_com_B, 3, "v_com_B")))
        object.__setattr__(self, "omega_B", _frozen(_as_vector(self.omega_B, 3, "omega_B")))

    @classmethod
    def from_vector(cls, x) -> "State":
        x = _as_vector(x, STATE_DIM, "state vector")
        return cls(x[POS], x[QUAT], x[VEL], x[OMEGA])

    @classmethod
    def at_rest(cls, position, orientation=(0.0, 0.0, 0.0, 1.0)) -> "State":
        return cls(position, orientation, np.zeros(3), np.zeros(3))

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.r_com_I, self.q_IB, self.v_com_B, self.omega_B])

    @property
    def inertial_velocity(self) -> np.ndarray:
        return quat_to_rotmat(self.q_IB) @ self.v_com_B

    @property
    def speed(self) -> float:
        return float(np.linalg.norm(self.v_com_B))

    def __eq__(self, other):
        if not isinstance(other, State):
            return NotImplemented
        return bool(np.array_equal(self.as_vector(), other.as_vector()))

    def __repr__(self):
        return f"State(r={self.r_com_I.tolist()}, q={self.q_IB.tolist()}, v={self.v_com_B.tolist()}, w={self.omega_B.tolist()})"


@dataclass(frozen=True, eq=False)
class Thruster:
    position: np.ndarray   # m, body frame
    direction: np.ndarray  # unit vector, body frame
    max_thrust: float      # N

    def __post_init__(self):
        object.__setattr__(self, "position", _frozen(_as_vector(self.position, 3, "thruster position")))
        direction = _as_vector(self.direction, 3, "thruster direction")
        if abs(np.linalg.norm(direction) - 1.0) > 1e-12:
            raise InvalidModelError("thruster direction must be a unit vector")
        object.__setattr__(self, "direction", _frozen(direction))
        if not self.max_thrust > 0.0:
            raise InvalidModelError("thruster max_thrust must be positive")


@dataclass(frozen=True, eq=False)
class VehicleModel:
    mass: float
    inertia: np.ndarray
    thrusters: Tuple[Thruster, ...]
    body_radius: float
    isp: float

    def __post_init__(self):
        if not self.mass > 0.0:
            raise InvalidModelError("mass must be positive")
        if not self.body_radius > 0.0:
            raise InvalidModelError("body_radius must be positive")
        if not self.isp > 0.0:
            raise InvalidModelError("isp must be positive")
        inertia = np.asarray(self.inertia, dtype=float)
        if inertia.shape != (3, 3) or not np.all(np.isfinite(inertia)):
            raise InvalidModelError("inertia must be a finite 3x3 matrix")
        if not np.allclose(inertia, inertia.T, rtol=0.0, atol=1e-12):
            raise InvalidModelError("inertia must be symmetric")
        try:
            np.linalg.cholesky(inertia)
        except np.linalg.LinAlgError as exc:
            raise InvalidModelError("inertia must be positive definite") from exc
        thrusters = tuple(self.thrusters)
        if not thrusters:
            raise InvalidModelError("vehicle needs at least one thruster")

        directions = np.array([t.direction for t in thrusters]).T
        positions = np.array([t.position for t in thrusters]).T
        object.__setattr__(self, "inertia", _frozen(inertia))
        object.__setattr__(self, "thrusters", thrusters)
        object.__setattr__(self, "inertia_inv", _frozen(np.linalg.inv(inertia)))
        object.__setattr__(self, "force_map", _frozen(directions))
        object.__setattr__(self, "torque_map", _frozen(np.cross(positions.T, directions.T).T))
        object.__setattr__(self, "max_thrust", _frozen([t.max_thrust for t in thrusters]))

    @property
    def n_u(self) -> int:
        return len(self.thrusters)

    def wrench_matrix(self, mask: Optional["FaultMask"] = None) -> np.ndarray:
        """6 x n_u map from thruster commands to (force, torque), body frame"""
        W = np.vstack([self.force_map, self.torque_map])
        if mask is not None:
            W = W * mask.scale[None, :]
        return W

    def clip_input(self, u) -> np.ndarray:
        return np.clip(np.asarray(u, dtype=float), 0.0, self.max_thrust)

    def pair_acceleration(self) -> float:
        """Smallest linear acceleration two equal thrusters can give along one axis"""
        return 2.0 * float(np.min(self.max_thrust)) / self.mass


@dataclass(frozen=True, eq=False)
class FaultMask:
    """Per-thruster force scale in [0, 1]; all ones is the nominal vehicle"""
    scale: np.ndarray

    def __post_init__(self):
        scale = np.asarray(self.scale, dtype=float).reshape(-1)
        if not np.all(np.isfinite(scale)) or np.any(scale < 0.0) or np.any(scale > 1.0):
            raise InvalidArgumentError("fault mask entries must lie in [0, 1]")
        object.__setattr__(self, "scale", _frozen(scale))

    @classmethod
    def nominal(cls, n_u: int) -> "FaultMask":
        return cls(np.ones(n_u))

    def with_scale(self, index: int, scale: float) -> "FaultMask":
        if not 0 <= index < self.scale.size:
            raise InvalidArgumentError(f"thruster index {index} out of range")
        new = np.array(self.scale)
        new[index] = scale
        return FaultMask(new)

    @property
    def is_nominal(self) -> bool:
        return bool(np.all(self.scale == 1.0))

    def __eq__(self, other):
        if not isinstance(other, FaultMask):
            return NotImplemented
        return bool(np.array_equal(self.scale, other.scale))


def default_thruster_layout(max_thrust: float = DEFAULT_MAX_THRUST) -> Tuple[Thruster, ...]:
    """Twelve unidirectional thrusters in six symmetric pairs.

    Pair k (thrusters 2k, 2k+1) fires along d_k from behind the centre of mass,
    the two members offset by +/- 0.1 m along o_k. Together they give a pure
    force along d_k; individually a torque about o_k x d_k of either sign.

        pair  d    o    torque axis
        0     +x   +y   z
        1     -x   +z   y
        2     +y   +z   x
        3     -y   +x   z
        4     +z   +x   y
        5     -z   +y   x
    """
    e = np.eye(3)
    pairs = (
        (e[0], e[1]),
        (-e[0], e[2]),
        (e[1], e[2]),
        (-e[1], e[0]),
        (e[2], e[0]),
        (-e[2], e[1]),
    )
    thrusters = []
    for direction, offset in pairs:
        for sign in (1.0, -1.0):
            position = -_THRUSTER_ARM * direction + sign * _THRUSTER_OFFSET * offset
            thrusters.append(Thruster(position, direction, max_thrust))
    return tuple(thrusters)


def make_default_vehicle() -> VehicleModel:
    return VehicleModel(
        mass=DEFAULT_MASS,
        inertia=np.diag(DEFAULT_INERTIA),
        thrusters=default_thruster_layout(),
        body_radius=DEFAULT_BODY_RADIUS,
        isp=DEFAULT_ISP,
    )


# ---------------------------------------------------------------------------
# Forces and dynamics
# ---------------------------------------------------------------------------

def _mask_scale(model: VehicleModel, mask: Optional[FaultMask]) -> np.ndarray:
    if mask is None:
        return np.ones(model.n_u)
    if mask.scale.size != model.n_u:
        raise InvalidArgumentError(f"fault mask has {mask.scale.size} entries, vehicle has {model.n_u} thrusters")
    return mask.scale


def thruster_wrench(u, model: VehicleModel, mask: Optional[FaultMask] = None) -> Tuple[np.ndarray, np.ndarray]:
    """Net body-frame force [N] and torque [N m] from per-thruster commands"""
    u = np.asarray(u, dtype=float).reshape(-1)
    if u.size != model.n_u:
        raise InvalidArgumentError(f"input has {u.size} entries, vehicle has {model.n_u} thrusters")
    realized = _mask_scale(model, mask) * u
    return model.force_map @ realized, model.torque_map @ realized


def _derivative(x: np.ndarray, u_eff: np.ndarray, model: VehicleModel) -> np.ndarray:
    q, v, w = x[QUAT], x[VEL], x[OMEGA]
    force = model.force_map @ u_eff
    torque = model.torque_map @ u_eff
    dx = np.empty(STATE_DIM)
    dx[POS] = quat_to_rotmat(q) @ v
    dx[QUAT] = _quat_rate(q, w)
    dx[VEL] = force / model.mass - np.cross(w, v)
    dx[OMEGA] = model.inertia_inv @ (torque - np.cross(w, model.inertia @ w))
    return dx


def _derivative_with_jacobians(x: np.ndarray, u_eff: np.ndarray, scale: np.ndarray, model: VehicleModel):
    q, v, w = x[QUAT], x[VEL], x[OMEGA]
    R = quat_to_rotmat(q)
    Rv = R @ v
    Iw = model.inertia @ w
    dx = np.empty(STATE_DIM)
    dx[POS] = Rv
    dx[QUAT] = _quat_rate(q, w)
    dx[VEL] = model.force_map @ u_eff / model.mass - np.cross(w, v)
    dx[OMEGA] = model.inertia_inv @ (model.torque_map @ u_eff - np.cross(w, Iw))

    A = np.zeros((STATE_DIM, STATE_DIM))
    A[POS, QUAT] = _rotated_velocity_jacobian(q, v, Rv)
    A[POS, VEL] = R
    omega_mat = np.zeros((4, 4))
    omega_mat[:3, :3] = -skew(w)
    omega_mat[:3, 3] = w
    omega_mat[3, :3] = -w
    A[QUAT, QUAT] = 0.5 * omega_mat
    A[QUAT, OMEGA] = 0.5 * quat_kinematic_matrix(q).T
    A[VEL, VEL] = -skew(w)
    A[VEL, OMEGA] = skew(v)
    A[OMEGA, OMEGA] = -model.inertia_inv @ (skew(w) @ model.inertia - skew(Iw))

    B = np.zeros((STATE_DIM, model.n_u))
    B[VEL, :] = model.force_map * scale[None, :] / model.mass
    B[OMEGA, :] = model.inertia_inv @ (model.torque_map * scale[None, :])
    return dx, A, B


def _state_vector(x: Union[State, np.ndarray]) -> np.ndarray:
    if isinstance(x, State):
        return x.as_vector()
    return _as_vector(x, STATE_DIM, "state vector")


def continuous_derivative(x: Union[State, np.ndarray], u, model: VehicleModel,
                          mask: Optional[FaultMask] = None) -> np.ndarray:
    """Newton-Euler right-hand side as a 13-vector"""
    xv = _state_vector(x)
    u = np.asarray(u, dtype=float).reshape(-1)
    if u.size != model.n_u:
        raise InvalidArgumentError(f"input has {u.size} entries, vehicle has {model.n_u} thrusters")
    return _derivative(xv, _mask_scale(model, mask) * u, model)


def continuous_jacobians(x: Union[State, np.ndarray], u, model: VehicleModel,
                         mask: Optional[FaultMask] = None):
    """(f, df/dx, df/du) of the continuous dynamics"""
    xv = _state_vector(x)
    u = np.asarray(u, dtype=float).reshape(-1)
    scale = _mask_scale(model, mask)
    return _derivative_with_jacobians(xv, scale * u, scale, model)


def _check_finite(x: np.ndarray, stage: str):
    bad = np.flatnonzero(~np.isfinite(x))
    if bad.size:
        component = STATE_LABELS[bad[0]]
        raise IntegrationError(f"non-finite {component} during RK4 {stage}", component=component)


def _stage_point(x: np.ndarray, k: np.ndarray, c: float, stage: str) -> np.ndarray:
    p = x + c * k
    _check_finite(p, stage)
    return p


def rk4_step_vector(x: np.ndarray, u: np.ndarray, dt: float, model: VehicleModel,
                    mask: Optional[FaultMask] = None, jacobians: bool = False):
    """One zero-order-hold RK4 step on the raw 13-vector.

    With ``jacobians=True`` also returns the exact sensitivities of the step
    (renormalization included) as ``(x_next, A, B)``.
    """
    if not dt > 0.0:
        raise InvalidArgumentError("dt must be positive")
    scale = _mask_scale(model, mask)
    u = np.asarray(u, dtype=float).reshape(-1)
    u_eff = scale * u
    h = dt
    _check_finite(x, "input")

    if not jacobians:
        k1 = _derivative(x, u_eff, model)
        _check_finite(k1, "stage 1")
        k2 = _derivative(_stage_point(x, k1, 0.5 * h, "stage 2 point"), u_eff, model)
        _check_finite(k2, "stage 2")
        k3 = _derivative(_stage_point(x, k2, 0.5 * h, "stage 3 point"), u_eff, model)
        _check_finite(k3, "stage 3")
        k4 = _derivative(_stage_point(x, k3, h, "stage 4 point"), u_eff, model)
        _check_finite(k4, "stage 4")
        x_next = x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        _check_finite(x_next, "update")
        x_next[QUAT] /= np.linalg.norm(x_next[QUAT])
        return x_next

    eye = np.eye(STATE_DIM)
    k1, A1, B1 = _derivative_with_jacobians(x, u_eff, scale, model)
    _check_finite(k1, "stage 1")
    k2, A2, B2 = _derivative_with_jacobians(_stage_point(x, k1, 0.5 * h, "stage 2 point"), u_eff, scale, model)
    _check_finite(k2, "stage 2")
    K2x = A2 @ (eye + 0.5 * h * A1)
    K2u = A2 @ (0.5 * h * B1) + B2
    k3, A3, B3 = _derivative_with_jacobians(_stage_point(x, k2, 0.5 * h, "stage 3 point"), u_eff, scale, model)
    _check_finite(k3, "stage 3")
    K3x = A3 @ (eye + 0.5 * h * K2x)
    K3u = A3 @ (0.5 * h * K2u) + B3
    k4, A4, B4 = _derivative_with_jacobians(_stage_point(x, k3, h, "stage 4 point"), u_eff, scale, model)
    _check_finite(k4, "stage 4")
    K4x = A4 @ (eye + h * K3x)
    K4u = A4 @ (h * K3u) + B4

    x_next = x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    _check_finite(x_next, "update")
    A = eye + (h / 6.0) * (A1 + 2.0 * K2x + 2.0 * K3x + K4x)
    B = (h / 6.0) * (B1 + 2.0 * K2u + 2.0 * K3u + K4u)

    n = np.linalg.norm(x_next[QUAT])
    q = x_next[QUAT] / n
    N = (np.eye(4) - np.outer(q, q)) / n
    x_next[QUAT] = q
    A[QUAT, :] = N @ A[QUAT, :]
    B[QUAT, :] = N @ B[QUAT, :]
    return x_next, A, B


def rk4_step(x: State, u, dt: float, model: VehicleModel, mask: Optional[FaultMask] = None) -> State:
    u = np.asarray(u, dtype=float).reshape(-1)
    if u.size != model.n_u:
        raise InvalidArgumentError(f"input has {u.size} entries, vehicle has {model.n_u} thrusters")
    return State.from_vector(rk4_step_vector(x.as_vector(), u, dt, model, mask))


def propagate(x: State, u, duration: float, dt: float, model: VehicleModel,
              mask: Optional[FaultMask] = None) -> State:
    """Hold u for ``duration`` seconds using fixed RK4 substeps of at most dt"""
    steps = max(1, int(round(duration / dt)))
    h = duration / steps
    xv = x.as_vector()
    u = np.asarray(u, dtype=float).reshape(-1)
    for _ in range(steps):
        xv = rk4_step_vector(xv, u, h, model, mask)
    return State.from_vector(xv)


def thruster_indices(model: VehicleModel, direction: Sequence[float]) -> np.ndarray:
    """Indices of thrusters firing along a given body direction"""
    d = np.asarray(direction, dtype=float)
    d = d / np.linalg.norm(d)
    return np.flatnonzero(model.force_map.T @ d > 1.0 - 1e-9)
