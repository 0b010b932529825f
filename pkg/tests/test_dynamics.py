import numpy as np
import pytest
import scipy.linalg
from hypothesis import given, settings
from hypothesis import strategies as st

from gcbflab.dynamics import (
    CF,
    DynamicsConfig,
    DynamicsError,
    EnvKind,
    action_derivative,
    clamp,
    crazyflie_two_level,
    drift,
    dynamics_derivative,
    input_matrix,
    lqr_gain,
    motor_mixing,
    motor_unmixing,
    nominal_control,
    step,
)

ENVS = list(EnvKind)
DIMS = {"SingleIntegrator": (2, 2, 2), "DoubleIntegrator": (4, 2, 2), "DubinsCar": (4, 2, 2), "LinearDrone": (6, 3, 3), "CrazyflieDrone": (12, 4, 3)}


@pytest.mark.parametrize("env", ENVS)
def test_dimensions(env):
    assert (env.state_dim, env.action_dim, env.pos_dim) == DIMS[env.value]


def test_crazyflie_constants():
    assert (CF.m, CF.Ixx, CF.Iyy, CF.Izz, CF.C_T, CF.C_D, CF.d, CF.g) == (0.0299, 1.395e-5, 1.395e-5, 2.173e-5, 3.1582e-10, 7.9379e-12, 0.03973, 9.8)


def test_single_integrator_zero_input():
    x = np.array([0.3, -1.2])
    assert np.array_equal(dynamics_derivative("SingleIntegrator", x, np.zeros(2)), np.zeros(2))


def test_double_integrator_hand_example():
    xd = dynamics_derivative("DoubleIntegrator", np.array([0.0, 0.0, 1.0, 0.0]), np.array([0.0, 1.0]))
    assert xd.tolist() == [1.0, 0.0, 0.0, 1.0]


def test_dubins_straight_line():
    xd = dynamics_derivative("DubinsCar", np.array([0.0, 0.0, 0.0, 2.0]), np.zeros(2))
    assert np.allclose(xd, [2.0, 0.0, 0.0, 0.0], atol=1e-15)


def test_crazyflie_singularity():
    x = np.zeros(12)
    x[7] = np.pi / 2
    with pytest.raises(DynamicsError):
        drift("CrazyflieDrone", x)


def _rand_state(env, gen):
    x = gen.uniform(-1, 1, env.state_dim)
    if env is EnvKind.CrazyflieDrone:
        x[6:9] = gen.uniform(-0.4, 0.4, 3)
    return x


@pytest.mark.parametrize("env", ENVS)
def test_control_affine(env):
    gen = np.random.default_rng(1)
    m = input_matrix(env, np.zeros(env.state_dim)).shape[-1]
    for _ in range(20):
        x = _rand_state(env, gen)
        u1, u2, a = gen.standard_normal(m), gen.standard_normal(m), gen.standard_normal()
        f0 = dynamics_derivative(env, x, np.zeros(m))
        d = lambda u: dynamics_derivative(env, x, u) - f0
        assert np.allclose(d(a * u1 + u2), a * d(u1) + d(u2), atol=1e-9 * max(1, np.abs(d(u1)).max()))


def test_euler_step_hand_example():
    cfg = DynamicsConfig("SingleIntegrator")
    assert np.allclose(step(cfg, np.array([1.0, 1.0]), np.array([1.0, 0.0]), 0.03), [1.03, 1.0], atol=1e-15)


def test_double_integrator_rest_is_equilibrium():
    cfg = DynamicsConfig("DoubleIntegrator")
    x = np.array([0.4, 0.7, 0.0, 0.0])
    assert np.array_equal(step(cfg, x, np.zeros(2)), x)


@pytest.mark.parametrize("env", ENVS)
@settings(max_examples=20, deadline=None)
@given(data=st.lists(st.floats(-5, 5), min_size=4, max_size=4))
def test_step_clamps_first(env, data):
    cfg = DynamicsConfig(env)
    x = _rand_state(env, np.random.default_rng(0))
    u = np.array(data[: env.action_dim])
    assert np.array_equal(step(cfg, x, u), step(cfg, x, clamp(cfg, u)))
    assert np.array_equal(clamp(cfg, clamp(cfg, u)), clamp(cfg, u))


def test_bad_dt_rejected():
    with pytest.raises(ValueError):
        step(DynamicsConfig("SingleIntegrator"), np.zeros(2), np.zeros(2), dt=0.0)
    with pytest.raises(ValueError):
        DynamicsConfig("SingleIntegrator", dt=-1.0)


@pytest.mark.parametrize("env", ["DoubleIntegrator", "LinearDrone"])
def test_euler_global_error_order(env):
    # exact solution of the linear model under a constant input via the matrix exponential
    e = EnvKind(env)
    n = e.state_dim
    A = np.array([(drift(e, np.eye(n)[k])) for k in range(n)]).T
    B = input_matrix(e, np.zeros(n))
    u = np.full(e.action_dim, 0.3)
    x0 = np.linspace(-0.5, 0.5, n)
    cfg = DynamicsConfig(e)
    M = scipy.linalg.expm(np.block([[A, B @ u[:, None]], [np.zeros((1, n + 1))]]))
    exact = (M @ np.append(x0, 1.0))[:n]

    def euler(dt):
        x = x0.copy()
        for _ in range(int(round(1.0 / dt))):
            x = step(cfg, x, u, dt)
        return x

    e1, e2 = np.linalg.norm(euler(0.01) - exact), np.linalg.norm(euler(0.005) - exact)
    assert 1.9 <= e1 / e2


def test_double_integrator_goal_is_zero_control():
    cfg = DynamicsConfig("DoubleIntegrator")
    assert np.array_equal(nominal_control(cfg, np.array([1.0, 2.0, 0.0, 0.0]), np.array([1.0, 2.0])), np.zeros(2))


def test_single_integrator_nominal_hand_example():
    cfg = DynamicsConfig("SingleIntegrator")
    assert nominal_control(cfg, np.zeros(2), np.array([1.0, 0.0])).tolist() == [1.0, 0.0]
    assert nominal_control(cfg, np.zeros(2), np.array([5.0, -5.0])).tolist() == [1.0, -1.0]


def test_lqr_gain_1d_double_integrator():
    K = lqr_gain(np.array([[0.0, 1.0], [0.0, 0.0]]), np.array([[0.0], [1.0]]), np.eye(2), np.eye(1))
    assert np.allclose(K, [[1.0, np.sqrt(3.0)]], atol=1e-10)


def test_lqr_closed_loop_converges():
    cfg = DynamicsConfig("DoubleIntegrator", u_lo=(-1e9, -1e9), u_hi=(1e9, 1e9))
    gen = np.random.default_rng(3)
    for _ in range(5):
        x = np.append(gen.uniform(0, 4, 2), gen.uniform(-1, 1, 2))
        g = gen.uniform(0, 4, 2)
        for _ in range(int(30 / cfg.dt)):
            x = step(cfg, x, nominal_control(cfg, x, g))
        assert np.linalg.norm(np.append(x[:2] - g, x[2:])) < 1e-3


@pytest.mark.parametrize("env", ENVS)
def test_nominal_output_within_limits(env):
    cfg = DynamicsConfig(env)
    gen = np.random.default_rng(4)
    for _ in range(20):
        u = nominal_control(cfg, _rand_state(env, gen) * 3, gen.uniform(-3, 3, env.pos_dim))
        assert np.all(u >= cfg.lo) and np.all(u <= cfg.hi)


def test_dubins_nominal_law():
    cfg = DynamicsConfig("DubinsCar")
    u = nominal_control(cfg, np.array([0.0, 0.0, 0.0, 0.0]), np.array([0.0, 0.5]))
    assert u == pytest.approx([1.0, 0.5])  # heading error pi/2 clamps to 1; v_des = 0.5


def test_crazyflie_hover_command():
    U = crazyflie_two_level(np.zeros(12), np.zeros(3), 0.0)
    assert U[0] == pytest.approx(CF.m * CF.g, abs=1e-12) and U[0] == pytest.approx(0.293, abs=1e-3)
    assert np.allclose(U[1:], 0.0, atol=1e-15)
    cfg = DynamicsConfig("CrazyflieDrone")
    assert np.allclose(action_derivative(cfg, np.zeros(12), np.zeros(4)), 0.0, atol=1e-12)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-1.0, 1.0), min_size=4, max_size=4))
def test_mixing_round_trip(U):
    w2, _ = motor_mixing(np.array(U))
    assert np.allclose(motor_unmixing(w2), U, atol=1e-9)


def test_equal_motor_speeds_give_pure_thrust():
    U = motor_unmixing(np.full(4, 1.5e8))
    assert U[0] > 0 and np.allclose(U[1:], 0.0, atol=1e-12)


def test_negative_motor_speed_flagged():
    _, sat = motor_mixing(np.array([0.0, 0.0, 0.0, 1.0]))
    assert sat
