"""Mission geometry: inspection points, keep-in corridor, keep-out ellipsoids
and the reference path the flyby planner contours along.

Free space is the corridor (a chain of linearly tapered capsules through the
inspection points) minus the keep-out ellipsoids. Every margin here is signed:
positive inside free space, negative in violation.
"""
import logging
from dataclasses import dataclass, field
from typing import List, NamedTuple, Optional, Sequence, Tuple

import numpy as np
from scipy.interpolate import CubicSpline
from scipy.optimize import minimize_scalar
from scipy.spatial.transform import Rotation, Slerp

from models.schemas import Interpolation
from utils.dynamics import normalize_quaternion
from utils.errors import InvalidArgumentError, InvalidGeometryError, InvalidMissionError

logger = logging.getLogger(__name__)

CORRIDOR = "corridor"
SAMPLES_PER_SEGMENT = 100

_GL_NODES, _GL_WEIGHTS = np.polynomial.legendre.leggauss(5)


@dataclass(frozen=True, eq=False)
class InspectionPoint:
    """Operator-specified pose with optional arrival time t and linger time t_l"""
    position: np.ndarray
    orientation: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, 0.0, 1.0]))
    radius: float = 1.0
    t: Optional[float] = None
    t_l: Optional[float] = None
    velocity: Optional[np.ndarray] = None

    def __post_init__(self):
        position = np.asarray(self.position, dtype=float).reshape(-1)
        if position.size != 3 or not np.all(np.isfinite(position)):
            raise InvalidMissionError("inspection point position must be 3 finite numbers")
        object.__setattr__(self, "position", position)
        object.__setattr__(self, "orientation", normalize_quaternion(self.orientation))
        if not self.radius > 0.0:
            raise InvalidMissionError("corridor radius must be positive")
        if self.t_l is not None and self.t_l < 0.0:
            raise InvalidMissionError("linger time t_l must be non-negative")
        if self.velocity is not None:
            object.__setattr__(self, "velocity", np.asarray(self.velocity, dtype=float).reshape(3))


# ---------------------------------------------------------------------------
# Keep-out ellipsoids
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class KeepOutEllipsoid:
    """{p : (p - center)^T P (p - center) < 1}"""
    center: np.ndarray
    shape: np.ndarray
    name: str = "keepout"

    def __post_init__(self):
        center = np.asarray(self.center, dtype=float).reshape(-1)
        P = np.asarray(self.shape, dtype=float)
        if center.size != 3 or P.shape != (3, 3):
            raise InvalidGeometryError(f"ellipsoid '{self.name}' needs a 3-vector center and 3x3 shape")
        if not np.all(np.isfinite(P)) or not np.allclose(P, P.T, atol=1e-12):
            raise InvalidGeometryError(f"ellipsoid '{self.name}' shape matrix must be symmetric")
        eigvals, eigvecs = np.linalg.eigh(P)
        if eigvals[0] <= 0.0:
            raise InvalidGeometryError(f"ellipsoid '{self.name}' shape matrix must be positive definite")
        object.__setattr__(self, "center", center)
        object.__setattr__(self, "shape", P)
        object.__setattr__(self, "semi_axes", 1.0 / np.sqrt(eigvals))
        object.__setattr__(self, "axes_frame", eigvecs)

    @classmethod
    def from_axes(cls, center, semi_axes, orientation=(0.0, 0.0, 0.0, 1.0), name: str = "keepout"):
        axes = np.asarray(semi_axes, dtype=float).reshape(3)
        if np.any(axes <= 0.0):
            raise InvalidGeometryError(f"ellipsoid '{name}' semi-axes must be positive")
        R = Rotation.from_quat(normalize_quaternion(orientation)).as_matrix()
        return cls(center, R @ np.diag(1.0 / axes ** 2) @ R.T, name)

    def inflated(self, inflation: float) -> np.ndarray:
        """Shape matrix with every semi-axis grown by ``inflation``"""
        if inflation < 0.0:
            raise InvalidArgumentError("inflation must be non-negative")
        V = self.axes_frame
        return V @ np.diag(1.0 / (self.semi_axes + inflation) ** 2) @ V.T


def ellipsoid_margin(p, e: KeepOutEllipsoid, inflation: float = 0.0) -> float:
    p = np.asarray(p, dtype=float)
    if not np.all(np.isfinite(p)):
        raise InvalidArgumentError("position must be finite")
    d = p - e.center
    return float(d @ e.inflated(inflation) @ d - 1.0)


# ---------------------------------------------------------------------------
# Keep-in corridor
# ---------------------------------------------------------------------------

class KeepInCorridor:
    """Union of capsules swept along consecutive waypoints, radius lerped per segment"""

    def __init__(self, waypoints, radii):
        waypoints = np.asarray(waypoints, dtype=float)
        radii = np.asarray(radii, dtype=float).reshape(-1)
        if waypoints.ndim != 2 or waypoints.shape[1] != 3 or waypoints.shape[0] < 2:
            raise InvalidGeometryError("corridor needs at least two 3-D waypoints")
        if radii.size != waypoints.shape[0]:
            raise InvalidGeometryError("corridor needs one radius per waypoint")
        if np.any(radii <= 0.0):
            raise InvalidGeometryError("corridor radii must be positive")
        starts = waypoints[:-1]
        deltas = waypoints[1:] - starts
        lengths_sq = np.einsum("ij,ij->i", deltas, deltas)
        if np.any(lengths_sq <= 0.0):
            raise InvalidGeometryError("corridor segments must have positive length")
        self.waypoints = waypoints
        self.radii = radii
        self._starts = starts
        self._deltas = deltas
        self._lengths_sq = lengths_sq

    @classmethod
    def from_points(cls, points: Sequence[InspectionPoint]) -> "KeepInCorridor":
        return cls([p.position for p in points], [p.radius for p in points])

    @property
    def n_segments(self) -> int:
        return self._deltas.shape[0]

    def segment_margins(self, p: np.ndarray, body_radius: float):
        """Per-segment margin, closest-point parameter and offset from the closest point"""
        rel = p - self._starts
        lam = np.clip(np.einsum("ij,ij->i", rel, self._deltas) / self._lengths_sq, 0.0, 1.0)
        offsets = rel - lam[:, None] * self._deltas
        dist = np.linalg.norm(offsets, axis=1)
        r = self.radii[:-1] + lam * (self.radii[1:] - self.radii[:-1])
        return r - body_radius - dist, lam, offsets, dist

    def margin_and_gradient(self, p: np.ndarray, body_radius: float) -> Tuple[float, np.ndarray]:
        margins, lam, offsets, dist = self.segment_margins(p, body_radius)
        k = int(np.argmax(margins))
        grad = np.zeros(3)
        if 0.0 < lam[k] < 1.0:
            grad += (self.radii[k + 1] - self.radii[k]) * self._deltas[k] / self._lengths_sq[k]
        if dist[k] > 0.0:
            grad -= offsets[k] / dist[k]
        return float(margins[k]), grad

    def margins(self, points: np.ndarray, body_radius: float) -> np.ndarray:
        """Vectorized corridor margin for an (M, 3) array"""
        points = np.atleast_2d(points)
        rel = points[:, None, :] - self._starts[None, :, :]
        lam = np.clip(np.einsum("mij,ij->mi", rel, self._deltas) / self._lengths_sq, 0.0, 1.0)
        offsets = rel - lam[:, :, None] * self._deltas[None, :, :]
        dist = np.linalg.norm(offsets, axis=2)
        r = self.radii[:-1] + lam * (self.radii[1:] - self.radii[:-1])
        return np.max(r - body_radius - dist, axis=1)


def corridor_margin(p, c: KeepInCorridor, body_radius: float) -> float:
    margins, _, _, _ = c.segment_margins(np.asarray(p, dtype=float), body_radius)
    return float(np.max(margins))


# ---------------------------------------------------------------------------
# Free space
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class MarginDetail:
    margin: float
    constraint: str


class FreeSpace:
    """Corridor minus keep-outs inflated by the vehicle's encasing sphere"""

    def __init__(self, corridor: KeepInCorridor, keepouts: Sequence[KeepOutEllipsoid],
                 body_radius: float, check: bool = True):
        if not body_radius > 0.0:
            raise InvalidGeometryError("body_radius must be positive")
        self.corridor = corridor
        self.keepouts = tuple(keepouts)
        self.body_radius = float(body_radius)
        self._centers = np.array([e.center for e in self.keepouts]).reshape(-1, 3)
        self._shapes = np.array([e.inflated(self.body_radius) for e in self.keepouts]).reshape(-1, 3, 3)
        if check:
            bad = []
            for k, p in enumerate(corridor.waypoints):
                detail = self.margin_detail(p)
                if detail.margin <= 0.0:
                    bad.append(f"waypoint {k} violates {detail.constraint} (margin {detail.margin:.3f})")
            if bad:
                raise InvalidGeometryError("; ".join(bad), violations=bad)

    @property
    def constraint_names(self) -> List[str]:
        return [CORRIDOR] + [e.name for e in self.keepouts]

    def keepout_margins(self, p: np.ndarray) -> np.ndarray:
        d = p - self._centers
        return np.einsum("ki,kij,kj->k", d, self._shapes, d) - 1.0

    def constraint_values(self, p: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """All margins (corridor first) and their gradients w.r.t. position"""
        values = np.empty(1 + len(self.keepouts))
        grads = np.empty((values.size, 3))
        values[0], grads[0] = self.corridor.margin_and_gradient(p, self.body_radius)
        if self.keepouts:
            d = p - self._centers
            values[1:] = np.einsum("ki,kij,kj->k", d, self._shapes, d) - 1.0
            grads[1:] = 2.0 * np.einsum("kij,kj->ki", self._shapes, d)
        return values, grads

    def margin_detail(self, p) -> MarginDetail:
        p = np.asarray(p, dtype=float)
        best = MarginDetail(corridor_margin(p, self.corridor, self.body_radius), CORRIDOR)
        if self.keepouts:
            margins = self.keepout_margins(p)
            k = int(np.argmin(margins))
            if margins[k] < best.margin:
                best = MarginDetail(float(margins[k]), self.keepouts[k].name)
        return best

    def margins(self, points: np.ndarray) -> np.ndarray:
        points = np.atleast_2d(points)
        out = self.corridor.margins(points, self.body_radius)
        if self.keepouts:
            d = points[:, None, :] - self._centers[None, :, :]
            ko = np.einsum("mki,kij,mkj->mk", d, self._shapes, d) - 1.0
            out = np.minimum(out, ko.min(axis=1))
        return out


def free_space_margin(p, fs: FreeSpace) -> float:
    return fs.margin_detail(p).margin


# ---------------------------------------------------------------------------
# Reference path
# ---------------------------------------------------------------------------

def _adaptive_arc_length(func, a: float, b: float, rel_tol: float = 1e-7, max_depth: int = 30) -> float:
    """Arc length of func on [a, b] by recursive chord subdivision"""
    total = 0.0
    stack = [(a, b, np.linalg.norm(func(b) - func(a)), 0)]
    while stack:
        lo, hi, chord, depth = stack.pop()
        mid = 0.5 * (lo + hi)
        p_lo, p_mid, p_hi = func(lo), func(mid), func(hi)
        refined = np.linalg.norm(p_mid - p_lo) + np.linalg.norm(p_hi - p_mid)
        if depth >= 3 and (abs(refined - chord) <= rel_tol * max(refined, 1e-12) or depth >= max_depth):
            total += refined + (refined - chord) / 3.0
        else:
            stack.append((lo, mid, np.linalg.norm(p_mid - p_lo), depth + 1))
            stack.append((mid, hi, np.linalg.norm(p_hi - p_mid), depth + 1))
    return total


class Projection(NamedTuple):
    s: float
    point: np.ndarray
    lateral: float


class ReferencePath:
    """Arc-length parameterized centerline through the inspection points"""

    _TABLE_SAMPLES = 64

    def __init__(self, positions, quaternions, interpolation: Interpolation = Interpolation.LINEAR):
        positions = np.asarray(positions, dtype=float)
        if positions.shape[0] < 2:
            raise InvalidMissionError("a path needs at least two inspection points")
        chords = np.linalg.norm(np.diff(positions, axis=0), axis=1)
        if np.any(chords <= 0.0):
            k = int(np.argmin(chords))
            raise InvalidMissionError(f"inspection points {k} and {k + 1} coincide")
        self.positions = positions
        self.quaternions = np.array([normalize_quaternion(q) for q in quaternions])
        self.interpolation = Interpolation(interpolation)

        if self.interpolation is Interpolation.LINEAR:
            self.knots = np.concatenate([[0.0], np.cumsum(chords)])
            self._directions = np.diff(positions, axis=0) / chords[:, None]
        else:
            u_knots = np.concatenate([[0.0], np.cumsum(chords)])
            self._spline = CubicSpline(u_knots, positions, bc_type="natural", axis=0)
            self._d1 = self._spline.derivative(1)
            self._d2 = self._spline.derivative(2)
            seg_lengths = [_adaptive_arc_length(self._spline, u_knots[i], u_knots[i + 1])
                           for i in range(len(chords))]
            self.knots = np.concatenate([[0.0], np.cumsum(seg_lengths)])
            # s -> u: quadrature table per interval, scaled to the adaptive length and
            # inverted by Newton so that d(position)/ds is the unit tangent
            u_table, s_table, scale_table = [u_knots[:1]], [self.knots[:1]], []
            for i in range(len(chords)):
                u = np.linspace(u_knots[i], u_knots[i + 1], self._TABLE_SAMPLES + 1)
                cum = np.cumsum([self._speed_integral(u[j], u[j + 1]) for j in range(self._TABLE_SAMPLES)])
                scale = seg_lengths[i] / cum[-1]
                u_table.append(u[1:])
                s_table.append(self.knots[i] + scale * cum)
                scale_table.append(np.full(self._TABLE_SAMPLES, scale))
            self._u_table = np.concatenate(u_table)
            self._s_table = np.concatenate(s_table)
            self._s_table[-1] = self.knots[-1]
            self._scale_table = np.concatenate(scale_table)

        rotations = Rotation.from_quat(self.quaternions)
        self._slerp = Slerp(self.knots, rotations)
        seg = np.diff(self.knots)
        rel = rotations[:-1].inv() * rotations[1:]
        self._segment_rates = rel.as_rotvec() / seg[:, None]

    @property
    def length(self) -> float:
        return float(self.knots[-1])

    @property
    def n_segments(self) -> int:
        return self.knots.size - 1

    def clamp(self, s: float) -> float:
        return float(min(max(s, 0.0), self.length))

    def segment_index(self, s: float) -> int:
        k = int(np.searchsorted(self.knots, s, side="right")) - 1
        return min(max(k, 0), self.n_segments - 1)

    def at_kink(self, s: float, tol: float = 1e-12) -> bool:
        """True if s sits on an interior knot of a linear path (tangent undefined)"""
        if self.interpolation is not Interpolation.LINEAR:
            return False
        return bool(np.any(np.abs(self.knots[1:-1] - s) <= tol))

    def _speed(self, u):
        return np.linalg.norm(self._d1(u), axis=-1)

    def _speed_integral(self, a: float, b: float) -> float:
        half = 0.5 * (b - a)
        return float(half * (_GL_WEIGHTS @ self._speed(0.5 * (a + b) + half * _GL_NODES)))

    def _u_of_s(self, s: float) -> float:
        if s >= self._s_table[-1]:
            return float(self._u_table[-1])
        j = min(int(np.searchsorted(self._s_table, s, side="right")) - 1, self._scale_table.size - 1)
        u0, s0, scale = self._u_table[j], self._s_table[j], self._scale_table[j]
        u = u0 + (s - s0) / (scale * self._speed(u0))
        for _ in range(6):
            step = (s0 + scale * self._speed_integral(u0, u) - s) / (scale * self._speed(u))
            u -= step
            if abs(step) < 1e-15 * max(1.0, abs(u)):
                break
        return float(u)

    def position(self, s: float) -> np.ndarray:
        s = self.clamp(s)
        if self.interpolation is Interpolation.LINEAR:
            if s >= self.length:
                return self.positions[-1].copy()
            k = self.segment_index(s)
            return self.positions[k] + (s - self.knots[k]) * self._directions[k]
        return self._spline(self._u_of_s(s))

    def tangent(self, s: float) -> np.ndarray:
        """Unit tangent; on a linear-path kink this is the outgoing segment's direction"""
        s = self.clamp(s)
        if self.interpolation is Interpolation.LINEAR:
            return self._directions[self.segment_index(s)].copy()
        d = self._d1(self._u_of_s(s))
        return d / np.linalg.norm(d)

    def tangent_rate(self, s: float) -> np.ndarray:
        """d(tangent)/ds; zero on linear segments"""
        if self.interpolation is Interpolation.LINEAR:
            return np.zeros(3)
        u = self._u_of_s(self.clamp(s))
        d1, d2 = self._d1(u), self._d2(u)
        n = np.linalg.norm(d1)
        t = d1 / n
        return (d2 - t * (t @ d2)) / n ** 2

    def orientation(self, s: float) -> np.ndarray:
        return self._slerp(self.clamp(s)).as_quat()

    def orientation_rate(self, s: float) -> np.ndarray:
        """Body-frame rotation of the reference attitude per metre of progress"""
        return self._segment_rates[self.segment_index(self.clamp(s))].copy()

    def turn_angles(self) -> np.ndarray:
        """Heading change at each interior knot [rad]"""
        angles = np.zeros(self.knots.size)
        eps = 1e-6
        for k in range(1, self.knots.size - 1):
            t_in = self.tangent(self.knots[k] - eps)
            t_out = self.tangent(self.knots[k] + eps)
            angles[k] = float(np.arccos(np.clip(t_in @ t_out, -1.0, 1.0)))
        return angles

    def speed_limit(self, s: float, v_max: float, a_brake: float) -> float:
        """Progress speed that still allows braking into every corner ahead and stopping at the end"""
        angles = self.turn_angles()
        corner = v_max * 0.5 * (1.0 + np.cos(angles))
        corner[-1] = 0.0
        ahead = self.knots >= s
        if not np.any(ahead):
            return 0.0
        reach = np.sqrt(corner[ahead] ** 2 + 2.0 * a_brake * (self.knots[ahead] - s))
        return float(min(v_max, reach.min()))

    def sample(self, per_segment: int = SAMPLES_PER_SEGMENT) -> Tuple[np.ndarray, np.ndarray]:
        """(s, positions) with ``per_segment`` samples on each segment, knots included"""
        s_vals = np.unique(np.concatenate([
            np.linspace(self.knots[k], self.knots[k + 1], per_segment)
            for k in range(self.n_segments)
        ]))
        return s_vals, np.array([self.position(s) for s in s_vals])


def build_path(points: Sequence[InspectionPoint],
               interpolation: Interpolation = Interpolation.LINEAR) -> ReferencePath:
    if len(points) < 2:
        raise InvalidMissionError("a path needs at least two inspection points")
    return ReferencePath([p.position for p in points], [p.orientation for p in points], interpolation)


def _segment_foot(p: np.ndarray, a: np.ndarray, b: np.ndarray) -> Tuple[float, np.ndarray]:
    d = b - a
    lam = float(np.clip((p - a) @ d / (d @ d), 0.0, 1.0))
    return lam, a + lam * d


def project_to_path(p, path: ReferencePath, s_hint: Optional[float] = None) -> Projection:
    """Closest path point, searched within one segment either side of ``s_hint``.

    Without a hint the whole path is searched. Ties go to the candidate
    nearest the hint so that progress does not jump backwards.
    """
    p = np.asarray(p, dtype=float)
    if s_hint is None:
        segments = range(path.n_segments)
        hint = 0.0
    else:
        hint = path.clamp(s_hint)
        k = path.segment_index(hint)
        segments = range(max(k - 1, 0), min(k + 2, path.n_segments))

    candidates = []
    if path.interpolation is Interpolation.LINEAR:
        for k in segments:
            lam, foot = _segment_foot(p, path.positions[k], path.positions[k + 1])
            s = path.knots[k] + lam * (path.knots[k + 1] - path.knots[k])
            candidates.append((float(np.linalg.norm(p - foot)), float(s), foot))
    else:
        lo = path.knots[segments[0]]
        hi = path.knots[segments[-1] + 1]
        grid = np.linspace(lo, hi, 32 * len(segments) + 1)
        dists = np.array([np.linalg.norm(p - path.position(s)) for s in grid])
        step = grid[1] - grid[0]
        # refine every local minimum of the coarse scan
        for i in np.flatnonzero((dists <= np.roll(dists, 1)) | (np.arange(grid.size) == 0)):
            if i + 1 < grid.size and dists[i] > dists[i + 1]:
                continue
            bounds = (max(lo, grid[i] - step), min(hi, grid[i] + step))
            res = minimize_scalar(lambda s: np.linalg.norm(p - path.position(s)),
                                  bounds=bounds, method="bounded", options={"xatol": 1e-6})
            s = float(res.x) if res.fun <= dists[i] else float(grid[i])
            foot = path.position(s)
            candidates.append((float(np.linalg.norm(p - foot)), s, foot))

    best_dist = min(c[0] for c in candidates)
    tied = [c for c in candidates if c[0] <= best_dist + 1e-9]
    dist, s, foot = min(tied, key=lambda c: abs(c[1] - hint))
    return Projection(s=s, point=foot, lateral=dist)


# ---------------------------------------------------------------------------
# Mission validation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Violation:
    """A contiguous stretch of the sampled path outside free space"""
    kind: str                 # "waypoint" if the stretch contains an inspection point, else "segment"
    index: int                # waypoint index or segment index of the worst sample
    constraint: str
    margin: float
    s_start: float
    s_end: float
    position: Tuple[float, float, float]

    def describe(self) -> str:
        where = f"{self.kind} {self.index}"
        return (f"{where} violates {self.constraint} (margin {self.margin:.4f} m^2-scaled, "
                f"s in [{self.s_start:.3f}, {self.s_end:.3f}])")


def validate_mission(points: Sequence[InspectionPoint], fs: FreeSpace,
                     interpolation: Interpolation = Interpolation.LINEAR) -> List[Violation]:
    """Check every inspection point and 100 samples per segment; empty list means feasible"""
    path = build_path(points, interpolation)
    s_vals, samples = path.sample(SAMPLES_PER_SEGMENT)
    margins = fs.margins(samples)
    bad = margins <= 0.0
    knot_samples = {int(np.argmin(np.abs(s_vals - s))): k for k, s in enumerate(path.knots)}
    for i, k in knot_samples.items():
        bad[i] = fs.margin_detail(points[k].position).margin <= 0.0

    violations = []
    i = 0
    while i < s_vals.size:
        if not bad[i]:
            i += 1
            continue
        j = i
        while j + 1 < s_vals.size and bad[j + 1]:
            j += 1
        run = np.arange(i, j + 1)
        worst = run[int(np.argmin(margins[run]))]
        detail = fs.margin_detail(samples[worst])
        waypoints = [knot_samples[r] for r in run if r in knot_samples]
        if waypoints:
            kind, index = "waypoint", waypoints[0]
            detail = fs.margin_detail(points[index].position)
        else:
            kind, index = "segment", path.segment_index(s_vals[worst])
        violations.append(Violation(
            kind=kind, index=index, constraint=detail.constraint, margin=detail.margin,
            s_start=float(s_vals[i]), s_end=float(s_vals[j]),
            position=tuple(float(c) for c in samples[worst]),
        ))
        i = j + 1
    if violations:
        logger.info("mission validation found %d violation(s)", len(violations))
    return violations
