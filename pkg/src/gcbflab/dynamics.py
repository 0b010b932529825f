"""Agent dynamics: five control-affine models, Euler stepping, nominal controllers.

States are numpy arrays with the agent state on the last axis, so every
function here accepts a single agent ``(n,)`` or any batch ``(..., n)``.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
import scipy.linalg

DT = 0.03


class DynamicsError(Exception):
    pass


class EnvKind(str, enum.Enum):
    SingleIntegrator = "SingleIntegrator"
    DoubleIntegrator = "DoubleIntegrator"
    DubinsCar = "DubinsCar"
    LinearDrone = "LinearDrone"
    CrazyflieDrone = "CrazyflieDrone"

    @property
    def state_dim(self) -> int:
        return _DIMS[self][0]

    @property
    def action_dim(self) -> int:
        """Dimension of the action the policy/QP chooses."""
        return _DIMS[self][1]

    @property
    def pos_dim(self) -> int:
        return _DIMS[self][2]

    @property
    def edge_dim(self) -> int:
        return _DIMS[self][3]


# (state n, action m, position dim, edge feature dim)
_DIMS = {
    EnvKind.SingleIntegrator: (2, 2, 2, 2),
    EnvKind.DoubleIntegrator: (4, 2, 2, 4),
    EnvKind.DubinsCar: (4, 2, 2, 4),
    EnvKind.LinearDrone: (6, 3, 3, 6),
    EnvKind.CrazyflieDrone: (12, 4, 3, 6),
}


def as_env(env) -> EnvKind:
    return env if isinstance(env, EnvKind) else EnvKind(env)


@dataclass(frozen=True)
class CrazyflieParams:
    m: float = 0.0299
    Ixx: float = 1.395e-5
    Iyy: float = 1.395e-5
    Izz: float = 2.173e-5
    C_T: float = 3.1582e-10
    C_D: float = 7.9379e-12
    d: float = 0.03973
    g: float = 9.8

    def mixing_matrix(self) -> np.ndarray:
        a = self.d * self.C_T * np.sqrt(2.0)
        ct, cd = self.C_T, self.C_D
        return np.array(
            [
                [ct, ct, ct, ct],
                [-a, -a, a, a],
                [-a, a, a, -a],
                [-cd, cd, -cd, cd],
            ]
        )


CF = CrazyflieParams()

# Crazyflie state layout
CF_POS = slice(0, 3)
CF_VEL = slice(3, 6)  # body-frame u, v, w
CF_ANG = slice(6, 9)  # phi, theta, psi
CF_RATE = slice(9, 12)  # r, q, p in the order of their equations


def default_limits(env) -> tuple[np.ndarray, np.ndarray]:
    """Box limits on the policy action.  Artifact defaults."""
    m = as_env(env).action_dim
    return -np.ones(m), np.ones(m)


@dataclass(frozen=True)
class DynamicsConfig:
    env: EnvKind
    u_lo: tuple = ()
    u_hi: tuple = ()
    dt: float = DT
    dubins_v_max: float = 1.0
    dubins_k_theta: float = 1.0
    dubins_k_v: float = 1.0
    si_gain: float = 1.0
    goal_tol: float = 1e-3
    # inner-loop LQR weights for the Crazyflie (reduced 8-state model)
    cf_q: tuple = (1.0, 1.0, 1.0, 1.0, 1.0, 1e-2, 1e-2, 1e-2)
    cf_r: tuple = (10.0, 1e5, 1e5, 1e5)

    def __post_init__(self):
        env = as_env(self.env)
        object.__setattr__(self, "env", env)
        lo, hi = default_limits(env)
        if not self.u_lo:
            object.__setattr__(self, "u_lo", tuple(lo))
        if not self.u_hi:
            object.__setattr__(self, "u_hi", tuple(hi))
        if len(self.u_lo) != env.action_dim or len(self.u_hi) != env.action_dim:
            raise ValueError("control limits have the wrong dimension")
        if np.any(np.asarray(self.u_lo) > np.asarray(self.u_hi)):
            raise ValueError("u_lo must not exceed u_hi")
        if self.dt <= 0:
            raise ValueError("dt must be positive")

    @property
    def lo(self) -> np.ndarray:
        return np.asarray(self.u_lo, dtype=float)

    @property
    def hi(self) -> np.ndarray:
        return np.asarray(self.u_hi, dtype=float)


def clamp(cfg: DynamicsConfig, u) -> np.ndarray:
    return np.clip(np.asarray(u, dtype=float), cfg.lo, cfg.hi)


# ---------------------------------------------------------------------------
# open-loop models


def _cf_check(x):
    theta = x[..., 7]
    if np.any(np.abs(theta) >= np.pi / 2 - 1e-6):
        raise DynamicsError("Crazyflie pitch reached the cos(theta)=0 singularity")


def drift(env, x) -> np.ndarray:
    """f(x)."""
    env = as_env(env)
    x = np.asarray(x, dtype=float)
    if env is EnvKind.SingleIntegrator:
        return np.zeros_like(x)
    if env is EnvKind.DoubleIntegrator:
        return np.concatenate([x[..., 2:4], np.zeros_like(x[..., 2:4])], axis=-1)
    if env is EnvKind.DubinsCar:
        th, v = x[..., 2], x[..., 3]
        z = np.zeros_like(th)
        return np.stack([v * np.cos(th), v * np.sin(th), z, z], axis=-1)
    if env is EnvKind.LinearDrone:
        v = x[..., 3:6]
        return np.concatenate([v, -np.array([1.1, 1.1, 6.0]) * v], axis=-1)
    _cf_check(x)
    return _cf_drift(x)


def input_matrix(env, x) -> np.ndarray:
    """g(x), shape (..., n, m).  For the Crazyflie m is the raw (U1..U4) input."""
    env = as_env(env)
    x = np.asarray(x, dtype=float)
    batch = x.shape[:-1]
    n = env.state_dim
    if env is EnvKind.SingleIntegrator:
        G = np.eye(2)
    elif env in (EnvKind.DoubleIntegrator, EnvKind.DubinsCar):
        G = np.zeros((4, 2))
        G[2, 0] = G[3, 1] = 1.0
    elif env is EnvKind.LinearDrone:
        G = np.zeros((6, 3))
        G[3, 0], G[4, 1], G[5, 2] = 1.1, 1.1, 6.0
    else:
        G = np.zeros((12, 4))
        G[5, 0] = 1.0 / CF.m
        G[9, 1] = 1.0 / CF.Izz
        G[10, 2] = 1.0 / CF.Iyy
        G[11, 3] = 1.0 / CF.Ixx
    return np.broadcast_to(G, batch + (n, G.shape[1])).copy()


def _cf_drift(x):
    p = CF
    u, v, w = x[..., 3], x[..., 4], x[..., 5]
    phi, th, psi = x[..., 6], x[..., 7], x[..., 8]
    r, q, pr = x[..., 9], x[..., 10], x[..., 11]
    c, s, t = np.cos, np.sin, np.tan
    dpx = (c(phi) * c(psi) * s(th) + s(phi) * s(psi)) * w - (s(psi) * c(phi) - c(psi) * s(phi) * s(th)) * v + u * c(psi) * c(th)
    dpy = (s(phi) * s(psi) * s(th) + c(phi) * c(psi)) * v - (c(psi) * s(phi) - s(psi) * c(phi) * s(th)) * w + u * s(psi) * c(th)
    dpz = w * c(phi) * c(th) - u * s(th) + v * s(phi) * c(th)
    du = r * v - q * w + p.g * s(th)
    dv = pr * w - r * u - p.g * s(phi) * c(th)
    dw = q * u - pr * v - p.g * c(th) * c(phi)
    dphi = r * c(phi) / c(th) + q * s(phi) / c(th)
    dth = q * c(phi) - r * s(phi)
    dpsi = pr + r * c(phi) * t(th) + q * s(phi) * t(th)
    dr = -pr * q * (p.Iyy - p.Ixx) / p.Izz
    dq = -pr * r * (p.Ixx - p.Izz) / p.Iyy
    dp = -q * r * (p.Izz - p.Iyy) / p.Ixx
    return np.stack([dpx, dpy, dpz, du, dv, dw, dphi, dth, dpsi, dr, dq, dp], axis=-1)


def dynamics_derivative(env, x, u) -> np.ndarray:
    """f(x) + g(x) u with the model's own input (raw U1..U4 for the Crazyflie)."""
    env = as_env(env)
    f = drift(env, x)
    G = input_matrix(env, x)
    return f + np.einsum("...nm,...m->...n", G, np.asarray(u, dtype=float))


def world_velocity(env, x) -> np.ndarray:
    """Time derivative of the position block."""
    env = as_env(env)
    x = np.asarray(x, dtype=float)
    if env is EnvKind.SingleIntegrator:
        raise ValueError("single-integrator velocity is the control input")
    if env is EnvKind.DubinsCar:
        return drift(env, x)[..., :2]
    if env is EnvKind.CrazyflieDrone:
        return drift(env, x)[..., :3]
    k = env.pos_dim
    return x[..., k : 2 * k]


# ---------------------------------------------------------------------------
# LQR and the Crazyflie two-level controller


def lqr_gain(A, B, Q, R) -> np.ndarray:
    """Continuous-time infinite-horizon LQR gain K = R^-1 B^T P."""
    P = scipy.linalg.solve_continuous_are(A, B, Q, R)
    return np.linalg.solve(R, B.T @ P)


def dlqr_gain(A, B, Q, R) -> np.ndarray:
    P = scipy.linalg.solve_discrete_are(A, B, Q, R)
    return np.linalg.solve(R + B.T @ P @ B, B.T @ P @ A)


@lru_cache(maxsize=None)
def _linear_lqr(env: EnvKind) -> np.ndarray:
    if env is EnvKind.DoubleIntegrator:
        A = np.zeros((4, 4))
        A[0, 2] = A[1, 3] = 1.0
    elif env is EnvKind.LinearDrone:
        A = np.zeros((6, 6))
        A[0:3, 3:6] = np.eye(3)
        A[3:6, 3:6] = -np.diag([1.1, 1.1, 6.0])
    else:
        raise ValueError(env)
    B = input_matrix(env, np.zeros(env.state_dim))
    return lqr_gain(A, B, np.eye(A.shape[0]), np.eye(B.shape[1]))


def cf_hover_linearization() -> tuple[np.ndarray, np.ndarray]:
    """(A, B) of the reduced hover model, state [u, v, w, phi, theta, r, q, p], input U."""
    p = CF
    A = np.zeros((8, 8))
    A[0, 4] = p.g  # u' = g theta
    A[1, 3] = -p.g  # v' = -g phi
    A[3, 5] = 1.0  # phi' = r
    A[4, 6] = 1.0  # theta' = q
    B = np.zeros((8, 4))
    B[2, 0] = 1.0 / p.m
    B[5, 1] = 1.0 / p.Izz
    B[6, 2] = 1.0 / p.Iyy
    B[7, 3] = 1.0 / p.Ixx
    return A, B


_CF_REDUCED = np.array([3, 4, 5, 6, 7, 9, 10, 11])


@lru_cache(maxsize=8)
def _cf_inner_gain(q: tuple, r: tuple, dt: float) -> np.ndarray:
    A, B = cf_hover_linearization()
    Ad, Bd = np.eye(8) + dt * A, dt * B
    return dlqr_gain(Ad, Bd, np.diag(q), np.diag(r))


def cf_rotation(x) -> np.ndarray:
    """Body-to-world rotation implied by the position equations, shape (..., 3, 3)."""
    phi, th, psi = x[..., 6], x[..., 7], x[..., 8]
    c, s = np.cos, np.sin
    Rm = np.empty(x.shape[:-1] + (3, 3), dtype=np.result_type(x, float))
    Rm[..., 0, 0] = c(psi) * c(th)
    Rm[..., 0, 1] = c(psi) * s(phi) * s(th) - s(psi) * c(phi)
    Rm[..., 0, 2] = c(phi) * c(psi) * s(th) + s(phi) * s(psi)
    Rm[..., 1, 0] = s(psi) * c(th)
    Rm[..., 1, 1] = s(phi) * s(psi) * s(th) + c(phi) * c(psi)
    Rm[..., 1, 2] = s(psi) * c(phi) * s(th) - c(psi) * s(phi)
    Rm[..., 2, 0] = -s(th)
    Rm[..., 2, 1] = s(phi) * c(th)
    Rm[..., 2, 2] = c(phi) * c(th)
    return Rm


def _cf_affine_command(cfg: DynamicsConfig, x):
    """U = U0 + Kc @ cmd, the inner loop written as an affine map of the command."""
    x = np.asarray(x, dtype=float)
    K = _cf_inner_gain(tuple(cfg.cf_q), tuple(cfg.cf_r), cfg.dt)
    xr = x[..., _CF_REDUCED]
    U_hover = np.array([CF.m * CF.g, 0.0, 0.0, 0.0])
    U0 = U_hover - xr @ K.T
    # reference reduced state = S @ cmd (body-frame velocity from world reference, yaw rate on p)
    Rt = np.swapaxes(cf_rotation(x), -1, -2)
    S = np.zeros(x.shape[:-1] + (8, 4))
    S[..., 0:3, 0:3] = Rt
    S[..., 7, 3] = 1.0
    Kc = np.einsum("uk,...kc->...uc", K, S)
    return U0, Kc


def crazyflie_two_level(x, ref_velocity, ref_yaw_rate, cfg: DynamicsConfig | None = None) -> np.ndarray:
    """Inner-loop LQR about hover tracking a world-frame velocity and yaw-rate reference."""
    cfg = cfg or DynamicsConfig(EnvKind.CrazyflieDrone)
    x = np.asarray(x, dtype=float)
    _cf_check(x)
    cmd = np.concatenate([np.asarray(ref_velocity, float), np.atleast_1d(np.asarray(ref_yaw_rate, float))], axis=-1)
    U0, Kc = _cf_affine_command(cfg, x)
    return U0 + np.einsum("...uc,...c->...u", Kc, cmd)


def motor_mixing(U, params: CrazyflieParams = CF) -> tuple[np.ndarray, bool]:
    """Squared motor speeds for (U1..U4); the flag is True if any would be negative."""
    w2 = np.linalg.solve(params.mixing_matrix(), np.asarray(U, dtype=float).T).T
    return w2, bool(np.any(w2 < 0))


def motor_unmixing(w2, params: CrazyflieParams = CF) -> np.ndarray:
    return np.asarray(w2, dtype=float) @ params.mixing_matrix().T


# ---------------------------------------------------------------------------
# closed action -> derivative maps used by the simulator, QPs and training


def action_affine(cfg: DynamicsConfig, x) -> tuple[np.ndarray, np.ndarray]:
    """(f_a, G_a) with xdot = f_a(x) + G_a(x) a for the policy action ``a``."""
    env = cfg.env
    x = np.asarray(x, dtype=float)
    if env is EnvKind.CrazyflieDrone:
        _cf_check(x)
        U0, Kc = _cf_affine_command(cfg, x)
        G = input_matrix(env, x)
        f = drift(env, x) + np.einsum("...nm,...m->...n", G, U0)
        return f, np.einsum("...nm,...mc->...nc", G, Kc)
    return drift(env, x), input_matrix(env, x)


def action_derivative(cfg: DynamicsConfig, x, a) -> np.ndarray:
    f, G = action_affine(cfg, x)
    return f + np.einsum("...nm,...m->...n", G, np.asarray(a, dtype=float))


def step(cfg: DynamicsConfig, x, a, dt: float | None = None) -> np.ndarray:
    """Explicit Euler step with the action clamped to the box first."""
    dt = cfg.dt if dt is None else dt
    if dt <= 0:
        raise ValueError("dt must be positive")
    x = np.asarray(x, dtype=float)
    return x + dt * action_derivative(cfg, x, clamp(cfg, a))


# ---------------------------------------------------------------------------
# nominal controllers


def wrap_angle(a):
    return (np.asarray(a) + np.pi) % (2 * np.pi) - np.pi


def nominal_control(cfg: DynamicsConfig, x, p_goal) -> np.ndarray:
    env = cfg.env
    x = np.asarray(x, dtype=float)
    pg = np.asarray(p_goal, dtype=float)
    k = env.pos_dim
    dp = pg - x[..., :k]
    if env is EnvKind.SingleIntegrator:
        u = cfg.si_gain * dp
    elif env in (EnvKind.DoubleIntegrator, EnvKind.LinearDrone):
        K = _linear_lqr(env)
        err = x.copy()
        err[..., :k] = -dp
        u = -err @ K.T
    elif env is EnvKind.DubinsCar:
        dist = np.linalg.norm(dp, axis=-1)
        heading = np.arctan2(dp[..., 1], dp[..., 0])
        turn = cfg.dubins_k_theta * wrap_angle(heading - x[..., 2])
        turn = np.where(dist > cfg.goal_tol, turn, 0.0)
        v_des = np.minimum(dist, cfg.dubins_v_max)
        u = np.stack([turn, cfg.dubins_k_v * (v_des - x[..., 3])], axis=-1)
    else:
        # outer loop: LQR on p' = v_ref with Q = R = I gives unit gain; yaw driven to 0
        u = np.concatenate([dp, -x[..., 8:9]], axis=-1)
    return clamp(cfg, u)
