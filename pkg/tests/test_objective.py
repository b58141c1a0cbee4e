import logging

import numpy as np
import pytest

from models.schemas import Interpolation
from utils.dynamics import State, normalize_quaternion
from utils.errors import InvalidArgumentError
from utils.geometry import InspectionPoint, build_path
from utils.objective import (
    AugmentedState,
    FlybyWeights,
    LingerWeights,
    attitude_error,
    contour_lag,
    cost_gradient,
    flyby_stage_cost,
    flyby_terminal_cost,
    linger_stage_cost,
    linger_terminal_cost,
    tracking_error,
)


def _random_state_vector(rng, speed=0.2):
    return np.concatenate([
        rng.normal(size=3),
        normalize_quaternion(rng.normal(size=4)),
        speed * rng.normal(size=3),
        speed * rng.normal(size=3),
    ])


def _central_difference(f, x, h=1e-6):
    g = np.zeros_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = h
        g[i] = (f(x + e) - f(x - e)) / (2 * h)
    return g


def _relative_error(analytic, fd):
    return np.max(np.abs(analytic - fd)) / max(1.0, np.max(np.abs(fd)))


@pytest.fixture
def linger_weights():
    return LingerWeights.default()


@pytest.fixture
def curved_path():
    points = [
        InspectionPoint((0, 0, 0)),
        InspectionPoint((4, 1, 0), orientation=(0, 0, 0.3826834323650898, 0.9238795325112867)),
        InspectionPoint((7, 4, 2), orientation=(0.2, 0.1, 0.3, 0.9273618495495704)),
    ]
    return {
        Interpolation.LINEAR: build_path(points, Interpolation.LINEAR),
        Interpolation.CUBIC: build_path(points, Interpolation.CUBIC),
    }


# attitude error

def test_attitude_error_examples():
    q = normalize_quaternion([0.1, -0.2, 0.3, 0.9])
    np.testing.assert_array_equal(attitude_error(q, q), np.zeros(3))
    np.testing.assert_allclose(attitude_error(-q, q), np.zeros(3), atol=1e-15)
    s = np.sin(np.pi / 4)
    np.testing.assert_allclose(attitude_error([0, 0, s, s], [0, 0, 0, 1]), [0, 0, 2 * s])


# linger

def test_linger_cost_zero_at_reference(linger_weights, rng):
    x = _random_state_vector(rng)
    assert linger_stage_cost(x, np.zeros(12), x, linger_weights) == 0.0
    assert linger_terminal_cost(x, x, linger_weights) == 0.0


def test_linger_single_position_term():
    Q = np.diag([1.0, 1.0, 1.0] + [0.0] * 9)
    w = LingerWeights(Q=Q, R=0.1 * np.eye(12), Q_N=Q)
    x_ref = State.at_rest([0, 0, 0])
    x = State.at_rest([1, 0, 0])
    assert linger_stage_cost(x, np.zeros(12), x_ref, w) == pytest.approx(1.0, abs=1e-14)


def test_linger_cost_matches_matrix_form(linger_weights, rng):
    for _ in range(20):
        x, x_ref = _random_state_vector(rng), _random_state_vector(rng)
        u = rng.uniform(0, 0.2, 12)
        e = tracking_error(x, x_ref)
        expected = e @ linger_weights.Q @ e + u @ linger_weights.R @ u
        assert linger_stage_cost(x, u, x_ref, linger_weights) == pytest.approx(expected, rel=1e-12)
        expected_terminal = e @ linger_weights.Q_N @ e
        assert linger_terminal_cost(x, x_ref, linger_weights) == pytest.approx(expected_terminal, rel=1e-12)


def test_terminal_weight_scaling(rng):
    Q = np.diag(rng.uniform(0.5, 3.0, 12))
    once = LingerWeights(Q=Q, R=np.eye(12), Q_N=Q)
    twice = LingerWeights(Q=Q, R=np.eye(12), Q_N=2.0 * Q)
    x, x_ref = _random_state_vector(rng), _random_state_vector(rng)
    assert linger_terminal_cost(x, x_ref, twice) == pytest.approx(2.0 * linger_terminal_cost(x, x_ref, once), rel=1e-12)


def test_linger_cost_double_cover_invariant(linger_weights, rng):
    x, x_ref = _random_state_vector(rng), _random_state_vector(rng)
    u = rng.uniform(0, 0.2, 12)
    flipped = x.copy()
    flipped[3:7] *= -1.0
    ref_flipped = x_ref.copy()
    ref_flipped[3:7] *= -1.0
    base = linger_stage_cost(x, u, x_ref, linger_weights)
    assert linger_stage_cost(flipped, u, x_ref, linger_weights) == pytest.approx(base, rel=1e-12)
    assert linger_stage_cost(x, u, ref_flipped, linger_weights) == pytest.approx(base, rel=1e-12)


def test_weight_scaling_scales_cost(linger_weights, rng):
    x, x_ref = _random_state_vector(rng), _random_state_vector(rng)
    u = rng.uniform(0, 0.2, 12)
    scaled = linger_weights.scaled(3.5)
    assert linger_stage_cost(x, u, x_ref, scaled) == pytest.approx(3.5 * linger_stage_cost(x, u, x_ref, linger_weights), rel=1e-12)


def test_linger_input_gradient_is_2Ru(linger_weights, rng):
    x, x_ref = _random_state_vector(rng), _random_state_vector(rng)
    u = rng.uniform(0, 0.2, 12)
    grad = cost_gradient(linger_stage_cost, x, u, x_ref, linger_weights)
    np.testing.assert_allclose(grad.u, 2.0 * linger_weights.R @ u, atol=1e-14)


def test_linger_gradient_vanishes_at_minimum(linger_weights, rng):
    x = _random_state_vector(rng)
    grad = cost_gradient(linger_stage_cost, x, np.zeros(12), x, linger_weights)
    assert np.max(np.abs(grad.x)) < 1e-8
    assert np.max(np.abs(grad.u)) < 1e-8


def test_linger_gradients_match_finite_differences(linger_weights, rng):
    worst = 0.0
    for _ in range(100):
        x, x_ref = _random_state_vector(rng), _random_state_vector(rng)
        u = rng.uniform(0, 0.2, 12)
        grad = cost_gradient(linger_stage_cost, x, u, x_ref, linger_weights)
        worst = max(worst, _relative_error(grad.x, _central_difference(lambda z: linger_stage_cost(z, u, x_ref, linger_weights), x)))
        worst = max(worst, _relative_error(grad.u, _central_difference(lambda z: linger_stage_cost(x, z, x_ref, linger_weights), u)))
        grad_n = cost_gradient(linger_terminal_cost, x, x_ref, linger_weights)
        worst = max(worst, _relative_error(grad_n.x, _central_difference(lambda z: linger_terminal_cost(z, x_ref, linger_weights), x)))
    assert worst <= 1e-5


def test_unregistered_cost_rejected():
    with pytest.raises(InvalidArgumentError):
        cost_gradient(lambda x: 0.0, np.zeros(13))


# flyby

def _augmented(rng, path, speed=0.2, offset=0.5):
    while True:
        s = rng.uniform(0.05, path.length - 0.05)
        if np.min(np.abs(path.knots - s)) > 1e-3:
            break
    x = _random_state_vector(rng, speed)
    x[0:3] = path.position(s) + offset * rng.normal(size=3)
    return np.append(x, s)


def test_flyby_cost_zero_on_path(curved_path):
    path = curved_path[Interpolation.LINEAR]
    s = 2.0
    state = State.at_rest(path.position(s), path.orientation(s))
    xa = AugmentedState(state, s, 0.0)
    assert flyby_stage_cost(xa, np.zeros(12), path, FlybyWeights(), 0.2) == pytest.approx(0.0, abs=1e-20)


def test_flyby_perpendicular_offset():
    path = build_path([InspectionPoint((0, 0, 0)), InspectionPoint((10, 0, 0))])
    w = FlybyWeights(q_c=1.0, q_l=0.0, q_att=0.0, mu=0.0, q_v=0.0, q_omega=0.0)
    xa = AugmentedState(State.at_rest([4.0, 1.0, 0.0]), 4.0)
    assert flyby_stage_cost(xa, np.zeros(12), path, w, 0.2) == pytest.approx(1.0)


def test_flyby_progress_rate_read_from_augmented_state():
    path = build_path([InspectionPoint((0, 0, 0)), InspectionPoint((10, 0, 0))])
    w = FlybyWeights()
    state = State.at_rest([4.0, 0.0, 0.0])
    still = flyby_stage_cost(AugmentedState(state, 4.0, 0.0), np.zeros(12), path, w, 0.2)
    moving = flyby_stage_cost(AugmentedState(state, 4.0, 0.5), np.zeros(12), path, w, 0.2)
    assert still == pytest.approx(0.0, abs=1e-20)
    assert moving == pytest.approx(-w.mu * 0.5 * 0.2)
    grad = cost_gradient(flyby_stage_cost, AugmentedState(state, 4.0, 0.5), np.zeros(12), path, w, 0.2)
    assert grad.u.shape == (13,)
    assert grad.u[-1] == pytest.approx(-w.mu * 0.2)


def test_flyby_cost_ignores_rates_without_damping(curved_path):
    path = curved_path[Interpolation.LINEAR]
    s = 2.0
    spinning = State(path.position(s), path.orientation(s), [0.05, 0.0, 0.0], [0.0, 0.0, 0.5])
    xa = AugmentedState(spinning, s, 0.0)
    assert flyby_stage_cost(xa, np.zeros(12), path, FlybyWeights(), 0.2) == pytest.approx(0.0, abs=1e-20)
    assert flyby_stage_cost(xa, np.zeros(12), path, FlybyWeights.damped(), 0.2) > 0.0


def test_flyby_progress_is_rewarded():
    path = build_path([InspectionPoint((0, 0, 0)), InspectionPoint((10, 0, 0))])
    w = FlybyWeights(q_v=0.0)
    xa = np.append(State.at_rest([4.0, 0.3, 0.1]).as_vector(), 4.0)
    u = np.zeros(13)
    costs = []
    for v_s in (0.0, 0.1, 0.2):
        u[-1] = v_s
        costs.append(flyby_stage_cost(xa, u, path, w, 0.2))
    assert costs[0] > costs[1] > costs[2]
    assert costs[0] - costs[1] == pytest.approx(w.mu * 0.1 * 0.2)


@pytest.mark.parametrize("interpolation", [Interpolation.LINEAR, Interpolation.CUBIC])
def test_contour_lag_orthogonal_decomposition(curved_path, interpolation, rng):
    path = curved_path[interpolation]
    for _ in range(50):
        xa = _augmented(rng, path)
        e_c, e_l, t, point = contour_lag(xa[:3], xa[13], path)
        assert e_c @ t == pytest.approx(0.0, abs=1e-10)
        assert e_c @ e_c + e_l ** 2 == pytest.approx(np.sum((xa[:3] - point) ** 2), abs=1e-10)


def test_flyby_without_reward_is_nonnegative(curved_path, rng):
    path = curved_path[Interpolation.CUBIC]
    w = FlybyWeights(mu=0.0)
    for _ in range(20):
        u = np.append(rng.uniform(0, 0.2, 12), rng.uniform(0, 0.3))
        assert flyby_stage_cost(_augmented(rng, path), u, path, w, 0.2) >= 0.0


@pytest.mark.parametrize("interpolation", [Interpolation.LINEAR, Interpolation.CUBIC])
def test_flyby_gradients_match_finite_differences(curved_path, interpolation, rng):
    path = curved_path[interpolation]
    w = FlybyWeights.damped()
    worst = 0.0
    for _ in range(100):
        xa = _augmented(rng, path)
        u = np.append(rng.uniform(0, 0.2, 12), rng.uniform(0, 0.3))
        grad = cost_gradient(flyby_stage_cost, xa, u, path, w, 0.2)
        assert not grad.one_sided
        worst = max(worst, _relative_error(grad.x, _central_difference(lambda z: flyby_stage_cost(z, u, path, w, 0.2), xa)))
        worst = max(worst, _relative_error(grad.u, _central_difference(lambda z: flyby_stage_cost(xa, z, path, w, 0.2), u)))
        grad_n = cost_gradient(flyby_terminal_cost, xa, path, w)
        worst = max(worst, _relative_error(grad_n.x, _central_difference(lambda z: flyby_terminal_cost(z, path, w), xa)))
    assert worst <= 1e-5


def test_flyby_gradient_on_kink_is_flagged(curved_path):
    path = curved_path[Interpolation.LINEAR]
    s = float(path.knots[1])
    xa = np.append(State.at_rest(path.position(s) + [0.0, 0.0, 0.2]).as_vector(), s)
    grad = cost_gradient(flyby_stage_cost, xa, np.zeros(13), path, FlybyWeights(), 0.2)
    assert grad.one_sided
    assert np.all(np.isfinite(grad.x))


def test_progress_outside_path_is_clamped(caplog):
    path = build_path([InspectionPoint((0, 0, 0)), InspectionPoint((10, 0, 0))])
    x = State.at_rest([0.5, 0.2, 0.0]).as_vector()
    w = FlybyWeights()
    with caplog.at_level(logging.WARNING, logger="utils.objective"):
        below = flyby_terminal_cost(np.append(x, -1.0), path, w)
    assert "clamped" in caplog.text
    assert below == pytest.approx(flyby_terminal_cost(np.append(x, 0.0), path, w))


def test_negative_progress_rate_rejected():
    with pytest.raises(InvalidArgumentError):
        AugmentedState(State.at_rest([0, 0, 0]), 1.0, -0.1)
