import numpy as np
import pytest
from scipy.optimize import lsq_linear

from models.schemas import Mode, PlanStatus
from utils.dynamics import FaultMask, State, make_default_vehicle, rk4_step
from utils.errors import IntegrationError, InvalidArgumentError, InvalidMissionError
from utils.geometry import InspectionPoint, build_path
from utils.objective import FlybyWeights, LingerWeights, Residual
from utils.planner import (
    Guess,
    LingerClock,
    LingerSchedule,
    NlpInstance,
    NmpcPlanner,
    PlannerParams,
    SqpSettings,
    at_waypoint,
    lagrangian_gradient,
    plan,
    shift_warm_start,
    sqp_solve,
    transcribe,
    velocity_envelope,
)

DT = 0.5
A_DI = np.array([[1.0, DT], [0.0, 1.0]])
B_DI = np.array([[0.5 * DT ** 2], [DT]])
STAGE_W = np.array([1.0, 0.5])
INPUT_W = 0.3
TERMINAL_W = 3.0


def _double_integrator(horizon=10, u_max=10.0, scale=1.0, x0=(1.0, 0.0)):
    root = np.sqrt(scale)

    def step(x, u):
        return A_DI @ x + B_DI @ u, A_DI, B_DI

    def stage_residual(k, x, u):
        r = root * np.concatenate([STAGE_W * x, INPUT_W * u])
        jac_x = root * np.vstack([np.diag(STAGE_W), np.zeros((1, 2))])
        jac_u = root * np.array([[0.0], [0.0], [INPUT_W]])
        return Residual(r, jac_x, jac_u)

    def terminal_residual(x):
        return Residual(root * TERMINAL_W * x, root * TERMINAL_W * np.eye(2), None)

    return NlpInstance(
        x0=np.array(x0), horizon=horizon, n_x=2, n_u=1, step=step,
        stage_residual=stage_residual, terminal_residual=terminal_residual,
        u_lower=np.full((horizon, 1), -u_max), u_upper=np.full((horizon, 1), u_max),
        x_lower=np.full((horizon + 1, 2), -np.inf), x_upper=np.full((horizon + 1, 2), np.inf),
    )


def _dense_oracle(horizon, u_max, x0=(1.0, 0.0)):
    """Bounded least squares over the stacked input sequence"""
    x0 = np.asarray(x0)
    rows, offsets = [], []
    S = np.zeros((2, horizon))
    c = x0.copy()
    for k in range(horizon):
        Ru = np.zeros((1, horizon))
        Ru[0, k] = INPUT_W
        rows += [STAGE_W[:, None] * S, Ru]
        offsets += [STAGE_W * c, np.zeros(1)]
        S = A_DI @ S
        S[:, k] += B_DI[:, 0]
        c = A_DI @ c
    rows.append(TERMINAL_W * S)
    offsets.append(TERMINAL_W * c)
    M, m = np.vstack(rows), np.concatenate(offsets)
    return lsq_linear(M, -m, bounds=(-u_max, u_max), method="bvls", tol=1e-14).x


def _straight_linger_points(final_dwell=100.0):
    return [
        InspectionPoint((0.0, 0.0, 0.0), t=0.0, t_l=0.5),
        InspectionPoint((1.0, 0.0, 0.0), t=1.0, t_l=0.5),
        InspectionPoint((2.0, 0.0, 0.0), t=2.0, t_l=final_dwell),
    ]


# generic SQP

@pytest.mark.parametrize("u_max", [10.0, 0.05])
def test_linear_quadratic_matches_dense_oracle(u_max):
    nlp = _double_integrator(u_max=u_max)
    result = sqp_solve(nlp, params=SqpSettings(max_iter=10))
    assert result.status is PlanStatus.CONVERGED
    np.testing.assert_allclose(result.u[:, 0], _dense_oracle(10, u_max), atol=1e-6)
    np.testing.assert_allclose(result.states[0], [1.0, 0.0])


def test_linear_quadratic_converges_in_one_step():
    result = sqp_solve(_double_integrator(u_max=10.0), params=SqpSettings(max_iter=10))
    assert result.status is PlanStatus.CONVERGED
    assert result.iterations == 1


def test_bounds_are_active_in_constrained_case():
    result = sqp_solve(_double_integrator(u_max=0.05), params=SqpSettings(max_iter=10))
    assert np.any(np.isclose(result.u[:, 0], -0.05, atol=1e-9))
    assert np.all(np.abs(result.u) <= 0.05 + 1e-12)


def test_reported_multipliers_satisfy_kkt():
    nlp = _double_integrator(u_max=0.05)
    result = sqp_solve(nlp, params=SqpSettings(max_iter=10))
    z = nlp.pack(result.states, result.inputs)
    assert lagrangian_gradient(nlp, z, result.multipliers) <= 1e-6
    assert result.kkt_residual <= 1e-6
    assert all(np.all(m >= -1e-9) for m in result.multipliers.mu)


def test_weight_scaling_leaves_minimizer_unchanged():
    base = sqp_solve(_double_integrator(u_max=0.05), params=SqpSettings(max_iter=10))
    scaled = sqp_solve(_double_integrator(u_max=0.05, scale=25.0), params=SqpSettings(max_iter=10))
    np.testing.assert_allclose(scaled.u, base.u, atol=1e-6)


def test_solver_reports_integration_failure_instead_of_raising():
    nlp = _double_integrator()

    def exploding(x, u):
        raise IntegrationError("blew up", component="velocity")

    nlp.step = exploding
    guess = Guess(np.zeros((11, 2)), np.zeros((10, 1)), np.zeros(0))
    result = sqp_solve(nlp, guess)
    assert result.status is PlanStatus.FAILED
    assert "velocity" in result.message
    assert np.all(np.isfinite(result.u))


def test_nlp_shape_checks():
    nlp = _double_integrator()
    with pytest.raises(InvalidArgumentError):
        NlpInstance(
            x0=np.zeros(3), horizon=2, n_x=2, n_u=1, step=nlp.step,
            stage_residual=nlp.stage_residual, terminal_residual=nlp.terminal_residual,
            u_lower=np.zeros((2, 1)), u_upper=np.ones((2, 1)),
            x_lower=np.zeros((3, 2)), x_upper=np.ones((3, 2)),
        )
    assert nlp.dim == 11 * 2 + 10


# warm start and envelope

def test_shift_warm_start_drops_first_stage():
    X = np.arange(12.0).reshape(6, 2)
    U = np.arange(5.0).reshape(5, 1)
    shifted = shift_warm_start(Guess(X, U, np.zeros(0)), x0=np.array([-1.0, -1.0]))
    np.testing.assert_array_equal(shifted.X[1:5], X[2:6])
    np.testing.assert_array_equal(shifted.X[5], X[5])
    np.testing.assert_array_equal(shifted.X[0], [-1.0, -1.0])
    np.testing.assert_array_equal(shifted.U[:, 0], [1.0, 2.0, 3.0, 4.0, 4.0])


def test_shift_warm_start_needs_two_stages():
    with pytest.raises(InvalidArgumentError):
        shift_warm_start(Guess(np.zeros((2, 2)), np.zeros((1, 1)), np.zeros(0)))


def test_velocity_envelope_brakes_out_overspeed():
    env = velocity_envelope(np.array([0.5, 0.1, -0.4]), 0.25, 0.1, 5, 1.0)
    np.testing.assert_allclose(env[0], [0.5, 0.25, 0.4])
    np.testing.assert_allclose(env[2], [0.3, 0.25, 0.25])
    np.testing.assert_allclose(env[-1], [0.25, 0.25, 0.25])
    assert np.all(np.diff(env, axis=0) <= 0.0)


def test_planner_params_validation():
    with pytest.raises(InvalidArgumentError):
        PlannerParams(horizon=1)
    with pytest.raises(InvalidArgumentError):
        PlannerParams(mode=Mode.LINGER, weights=FlybyWeights())
    assert isinstance(PlannerParams(mode="linger").weights, LingerWeights)


# linger schedule

def test_schedule_reference_at_dwell_and_transit():
    schedule = LingerSchedule(_straight_linger_points())
    np.testing.assert_allclose(schedule.reference(0.2)[0:3], [0.0, 0.0, 0.0])
    np.testing.assert_allclose(schedule.reference(1.2)[0:3], [1.0, 0.0, 0.0])
    mid = schedule.reference(0.75)
    np.testing.assert_allclose(mid[0:3], [0.5, 0.0, 0.0])
    assert mid[7] == pytest.approx(1.5 * 1.0 / 0.5)
    np.testing.assert_allclose(schedule.reference(0.5)[7:10], 0.0, atol=1e-15)
    np.testing.assert_allclose(schedule.reference(1.0 - 1e-12)[7:10], 0.0, atol=1e-9)
    np.testing.assert_allclose(schedule.reference(500.0)[0:3], [2.0, 0.0, 0.0])
    assert schedule.end_time == pytest.approx(102.0)
    assert schedule.dwell_index(1.3) == 1
    assert schedule.dwell_index(1.7) is None


def test_schedule_rejects_overlapping_times():
    points = [InspectionPoint((0, 0, 0), t=0.0, t_l=2.0), InspectionPoint((1, 0, 0), t=1.0, t_l=1.0)]
    with pytest.raises(InvalidMissionError):
        LingerSchedule(points)


def test_schedule_needs_timing():
    with pytest.raises(InvalidMissionError):
        LingerSchedule([InspectionPoint((0, 0, 0))])


def test_clock_holds_until_arrival():
    schedule = LingerSchedule([
        InspectionPoint((0, 0, 0), t=0.0, t_l=1.0),
        InspectionPoint((1, 0, 0), t=5.0, t_l=1.0),
    ])
    clock = LingerClock(schedule)
    start = State.at_rest([0.0, 0.0, 0.0])
    clock.advance(start, 10.0)
    assert clock.arrived == [True, False]
    assert clock.time == pytest.approx(5.0)
    assert clock.held
    clock.advance(start, 1.0)
    assert clock.time == pytest.approx(5.0)

    there = State.at_rest([1.0, 0.0, 0.05])
    assert at_waypoint(there, schedule.points[1])
    clock.advance(there, 0.2)
    assert not clock.held
    assert not clock.complete
    clock.advance(there, 1.0)
    assert clock.complete


def test_moving_vehicle_is_not_at_waypoint():
    moving = State([1.0, 0.0, 0.0], [0, 0, 0, 1], [0.05, 0.0, 0.0], [0.0, 0.0, 0.0])
    assert not at_waypoint(moving, InspectionPoint((1.0, 0.0, 0.0)))


# full planner

def test_linger_at_target_needs_no_thrust(straight_fs):
    points = [InspectionPoint((0.0, 0.0, 0.0), t=0.0, t_l=100.0), InspectionPoint((2.0, 0.0, 0.0), t=200.0, t_l=1.0)]
    params = PlannerParams(mode=Mode.LINGER, horizon=8, sqp=SqpSettings(max_iter=5))
    result = plan(points, straight_fs, State.at_rest([0.0, 0.0, 0.0]), params)
    assert result.status is PlanStatus.CONVERGED
    np.testing.assert_allclose(result.u, 0.0, atol=1e-6)
    assert result.slack_max <= 1e-9


def test_unreachable_terminal_set_is_relaxed(straight_fs):
    points = _straight_linger_points()
    params = PlannerParams(mode=Mode.LINGER, horizon=10, sqp=SqpSettings(max_iter=3))
    nlp = transcribe(State.at_rest([0.0, 0.0, 0.0]), points, straight_fs, params, t=0.0)
    assert nlp.terminal_constraint is not None
    result = sqp_solve(nlp, params=params, n_thrusters=12)
    assert result.status is PlanStatus.INFEASIBLE_SOFT
    assert result.relaxed_terminal


def test_terminal_set_only_inside_dwell(straight_fs):
    params = PlannerParams(mode=Mode.LINGER, horizon=10)
    nlp = transcribe(State.at_rest([0.0, 0.0, 0.0]), _straight_linger_points(), straight_fs, params, t=-1.0)
    assert nlp.terminal_constraint is not None
    nlp = transcribe(State.at_rest([0.0, 0.0, 0.0]), _straight_linger_points(), straight_fs, params, t=-0.3)
    assert nlp.terminal_constraint is None


@pytest.mark.parametrize("mode, n_x, n_u", [(Mode.LINGER, 13, 12), (Mode.FLYBY, 14, 13)])
def test_transcribed_decision_vector_size(straight_fs, mode, n_x, n_u):
    params = PlannerParams(mode=mode, horizon=7)
    points = _straight_linger_points() if mode is Mode.LINGER else _straight_linger_points()[:2]
    nlp = transcribe(State.at_rest([0.2, 0.0, 0.0]), points, straight_fs, params, t=0.0)
    assert (nlp.n_x, nlp.n_u, nlp.n_slack) == (n_x, n_u, 7)
    assert nlp.dim == 8 * n_x + 7 * n_u + 7


def test_transcribe_rejects_empty_window(straight_fs):
    with pytest.raises(InvalidArgumentError):
        transcribe(State.at_rest([0.0, 0.0, 0.0]), [], straight_fs, PlannerParams())


@pytest.mark.parametrize("seed", range(4))
def test_merit_never_increases(straight_points, straight_fs, seed):
    rng = np.random.default_rng(seed)
    x0 = State([rng.uniform(0.2, 1.5), *rng.uniform(-0.3, 0.3, 2)], [0, 0, 0, 1],
               rng.uniform(-0.05, 0.05, 3), rng.uniform(-0.02, 0.02, 3))
    params = PlannerParams(mode=Mode.FLYBY, horizon=8, sqp=SqpSettings(max_iter=4))
    result = plan(straight_points, straight_fs, x0, params)
    assert result.status is not PlanStatus.FAILED
    assert result.merit_history
    for before, after in result.merit_history:
        assert after <= before + 1e-10 * max(1.0, abs(before))


def test_flyby_progress_is_monotone(straight_points, straight_fs, vehicle):
    params = PlannerParams(mode=Mode.FLYBY, horizon=6, sqp=SqpSettings(max_iter=2))
    planner = NmpcPlanner(straight_points, straight_fs, params, vehicle)
    state = State.at_rest([0.1, 0.0, 0.0])
    seen = []
    for _ in range(3):
        result = planner.plan(state)
        assert np.all(np.diff(result.progress) >= -1e-9)
        assert np.all(result.inputs[:, -1] >= 0.0)
        seen.append(planner.progress)
        state = rk4_step(state, result.u[0], params.dt, vehicle)
    planner.plan(State.at_rest([1.0, 0.0, 0.0]))
    high = planner.progress
    planner.plan(State.at_rest([0.5, 0.0, 0.0]))
    assert planner.progress == high
    assert seen == sorted(seen)


def test_cold_and_warm_planner_agree_on_first_call(straight_points, straight_fs):
    params = PlannerParams(mode=Mode.FLYBY, horizon=6, sqp=SqpSettings(max_iter=2))
    x0 = State.at_rest([0.3, 0.1, 0.0])
    warm = NmpcPlanner(straight_points, straight_fs, params, warm_start=True).plan(x0)
    cold = NmpcPlanner(straight_points, straight_fs, params, warm_start=False).plan(x0)
    assert warm.same_plan(cold)


def test_true_mask_only_used_when_enabled(straight_points, straight_fs):
    mask = FaultMask.nominal(12).with_scale(3, 0.0)
    blind = NmpcPlanner(straight_points, straight_fs, PlannerParams(horizon=4))
    blind.set_true_mask(mask)
    assert blind.mask is None
    informed = NmpcPlanner(straight_points, straight_fs, PlannerParams(horizon=4, use_true_mask=True))
    informed.set_true_mask(mask)
    assert informed.mask is mask


def test_non_finite_state_never_reaches_planner(straight_points, straight_fs):
    planner = NmpcPlanner(straight_points, straight_fs, PlannerParams(horizon=4))
    x = State.at_rest([0.0, 0.0, 0.0]).as_vector()
    x[0] = np.nan
    with pytest.raises(InvalidArgumentError):
        planner.plan(State.from_vector(x))


def test_flyby_path_built_from_points(straight_points, straight_fs):
    planner = NmpcPlanner(straight_points, straight_fs, PlannerParams(horizon=4))
    assert planner.path.length == pytest.approx(build_path(straight_points).length)
    assert planner.schedule is None
    assert make_default_vehicle().n_u == planner.vehicle.n_u
