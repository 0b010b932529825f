"""CBF-QP controllers: the learned-certificate target pi_QP and hand-crafted HOCBF baselines."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .dynamics import DynamicsConfig, EnvKind, action_affine, as_env, clamp, nominal_control
from .gnn import GnnParams, as_batch, certificate_values, tracked_inputs
from .graph import GraphBatch, build_graph, edge_state, edge_state_jacobian
from .qp import INFEASIBLE, QpProblem, solve_relaxed
from .world import LidarScan, World, lidar_for, pairwise_distances

ALPHA0 = {
    EnvKind.SingleIntegrator: 1.0,  # unused: h := h0
    EnvKind.DoubleIntegrator: 10.0,
    EnvKind.DubinsCar: 5.0,
    EnvKind.LinearDrone: 3.0,
    EnvKind.CrazyflieDrone: 3.0,
}


@dataclass(frozen=True)
class HocbfParams:
    alpha: float = 1.0
    alpha0: float | None = None  # None: per-env default
    slack_penalty: float = 1e3

    def __post_init__(self):
        if self.alpha <= 0 or (self.alpha0 is not None and self.alpha0 <= 0):
            raise ValueError("alpha and alpha0 must be positive")

    def a0(self, env) -> float:
        return ALPHA0[as_env(env)] if self.alpha0 is None else self.alpha0


BASELINES = {
    "cbf1.0": ("centralized", 1.0),
    "cbf0.1": ("centralized", 0.1),
    "deccbf1.0": ("decentralized", 1.0),
    "deccbf0.1": ("decentralized", 0.1),
}


# ---------------------------------------------------------------------------
# hand-crafted HOCBF


def _pos_vel_jac(env: EnvKind, X: np.ndarray):
    """Position, world velocity and their Jacobians w.r.t. the state, for each row of X."""
    k, n = env.pos_dim, env.state_dim
    e = edge_state(env, X)
    J = edge_state_jacobian(env, X)
    if J is None:
        J = np.broadcast_to(np.eye(n), X.shape[:-1] + (n, n))
    return e[..., :k], e[..., k : 2 * k], J[..., :k, :], J[..., k : 2 * k, :]


def hocbf_pairs(env, Xi, Xj, alpha0: float, r: float, static_j=None):
    """h and its state gradients for pairs (i, j).

    ``h0 = |p_i - p_j|^2 - (2r)^2``; for SingleIntegrator ``h = h0``, otherwise
    ``h = dh0/dt + alpha0 h0`` with velocities read from the state.  Rows with
    ``static_j`` set treat j as a motionless point (a LiDAR hit).
    Returns ``(h0, h, dh/dx_i, dh/dx_j)``.
    """
    env = as_env(env)
    Xi = np.atleast_2d(np.asarray(Xi, dtype=float))
    Xj = np.atleast_2d(np.asarray(Xj, dtype=float))
    static = np.zeros(Xi.shape[0], dtype=bool) if static_j is None else np.asarray(static_j, dtype=bool)
    k = env.pos_dim
    dp = Xi[:, :k] - Xj[:, :k]
    h0 = (dp * dp).sum(-1) - (2 * r) ** 2
    if env is EnvKind.SingleIntegrator:
        ai = np.zeros_like(Xi)
        ai[:, :k] = 2 * dp
        aj = np.where(static[:, None], 0.0, -ai)
        return h0, h0.copy(), ai, aj
    _, vi, Jpi, Jvi = _pos_vel_jac(env, Xi)
    _, vj, Jpj, Jvj = _pos_vel_jac(env, Xj)
    vj = np.where(static[:, None], 0.0, vj)
    dv = vi - vj
    h = 2 * (dp * dv).sum(-1) + alpha0 * h0
    w = 2 * dv + 2 * alpha0 * dp
    ai = np.einsum("pk,pkn->pn", w, Jpi) + np.einsum("pk,pkn->pn", 2 * dp, Jvi)
    aj = -np.einsum("pk,pkn->pn", w, Jpj) - np.einsum("pk,pkn->pn", 2 * dp, Jvj)
    aj = np.where(static[:, None], 0.0, aj)
    return h0, h, ai, aj


def hocbf_value(env, x_i, x_j, alpha0: float, r: float) -> tuple[float, float]:
    h0, h, _, _ = hocbf_pairs(env, x_i, x_j, alpha0, r)
    return float(h0[0]), float(h[0])


@dataclass(frozen=True)
class PairRows:
    """HOCBF rows ``c_i u_i + c_j u_j >= rhs`` (``j = -1`` for an obstacle point)."""

    i: np.ndarray
    j: np.ndarray
    c_i: np.ndarray  # (P, m)
    c_j: np.ndarray  # (P, m), zero for obstacle rows
    rhs: np.ndarray  # (P,) = -alpha h - dh/dx_i f_i - dh/dx_j f_j
    h: np.ndarray

    def __len__(self) -> int:
        return self.i.size


def pair_rows(cfg: DynamicsConfig, world: World, params: HocbfParams, scan: LidarScan | None = None, agents=None) -> PairRows:
    """Rows for every unordered agent pair within R and every LiDAR hit of ``agents`` (default all)."""
    env = world.env
    X = world.states
    N = world.n_agents
    D = pairwise_distances(world.positions)
    ii, jj = np.nonzero(np.triu(D < world.R, k=1))
    scan = lidar_for(world) if scan is None else scan
    if agents is not None:
        keep = np.isin(ii, agents) | np.isin(jj, agents)
        ii, jj = ii[keep], jj[keep]
        hk = np.isin(scan.owner, agents)
    else:
        hk = np.ones(len(scan.owner), dtype=bool)
    ho, hp = scan.owner[hk], scan.padded_states(env.state_dim)[hk]
    I = np.concatenate([ii, ho]).astype(np.int64)
    J = np.concatenate([jj, np.full(ho.size, -1)]).astype(np.int64)
    Xi = X[I]
    Xj = np.concatenate([X[jj], hp], axis=0)
    static = J < 0
    _, h, ai, aj = hocbf_pairs(env, Xi, Xj, params.a0(env), world.r, static)
    f, G = action_affine(cfg, X) if N else (np.zeros((0, env.state_dim)), np.zeros((0, env.state_dim, env.action_dim)))
    Jc = np.where(static, 0, J)
    c_i = np.einsum("pn,pnm->pm", ai, G[I]) if I.size else np.zeros((0, env.action_dim))
    c_j = np.einsum("pn,pnm->pm", aj, G[Jc]) if I.size else np.zeros((0, env.action_dim))
    drift_term = (ai * f[I]).sum(-1) + np.where(static, 0.0, (aj * f[Jc]).sum(-1)) if I.size else np.zeros(0)
    rhs = -params.alpha * h - drift_term
    return PairRows(I, J, c_i, np.where(static[:, None], 0.0, c_j), rhs, h)


def centralized_rows(rows: PairRows, N: int, m: int) -> tuple[np.ndarray, np.ndarray]:
    A = np.zeros((len(rows), N * m))
    for p in range(len(rows)):
        i, j = rows.i[p], rows.j[p]
        A[p, i * m : (i + 1) * m] = rows.c_i[p]
        if j >= 0:
            A[p, j * m : (j + 1) * m] = rows.c_j[p]
    return A, rows.rhs.copy()


def decentralized_rows(rows: PairRows, i: int) -> tuple[np.ndarray, np.ndarray]:
    """Agent i's share: half of every pair right-hand side, the full one for obstacles."""
    mine_i = rows.i == i
    mine_j = rows.j == i
    coef = np.concatenate([rows.c_i[mine_i], rows.c_j[mine_j]], axis=0)
    static = rows.j < 0
    rhs_i = np.where(static[mine_i], rows.rhs[mine_i], 0.5 * rows.rhs[mine_i])
    rhs_j = 0.5 * rows.rhs[mine_j]
    return coef, np.concatenate([rhs_i, rhs_j])


def _nominal(cfg, world, u_nom):
    return nominal_control(cfg, world.states, world.goals) if u_nom is None else np.asarray(u_nom, dtype=float)


def _filter(u_nom, A, b, lo, hi, penalty):
    n = u_nom.size
    sol = solve_relaxed(QpProblem(np.eye(n), -u_nom, A, b, lo, hi), penalty)
    if sol.status == INFEASIBLE:
        raise RuntimeError("relaxed QP reported infeasible; box limits are inconsistent")
    return sol.u, sol.relaxed


def centralized_cbfqp_controller(world: World, params: HocbfParams, cfg: DynamicsConfig | None = None, u_nom=None, scan=None):
    """Returns (controls (N, m), relaxed flag)."""
    cfg = cfg or DynamicsConfig(world.env)
    N, m = world.n_agents, world.env.action_dim
    u_nom = clamp(cfg, _nominal(cfg, world, u_nom))
    rows = pair_rows(cfg, world, params, scan)
    if len(rows) == 0:
        return u_nom, False
    A, b = centralized_rows(rows, N, m)
    u, relaxed = _filter(u_nom.reshape(-1), A, b, np.tile(cfg.lo, N), np.tile(cfg.hi, N), params.slack_penalty)
    return clamp(cfg, u.reshape(N, m)), relaxed


def decentralized_cbfqp_controller(world: World, i: int, params: HocbfParams, cfg: DynamicsConfig | None = None, u_nom=None, scan=None, rows=None):
    """Agent i's own QP.  Returns (u_i, relaxed flag)."""
    cfg = cfg or DynamicsConfig(world.env)
    u_nom = clamp(cfg, _nominal(cfg, world, u_nom))
    rows = pair_rows(cfg, world, params, scan, agents=[i]) if rows is None else rows
    A, b = decentralized_rows(rows, i)
    if A.shape[0] == 0:
        return u_nom[i], False
    u, relaxed = _filter(u_nom[i], A, b, cfg.lo, cfg.hi, params.slack_penalty)
    return clamp(cfg, u), relaxed


def decentralized_all(world: World, params: HocbfParams, cfg: DynamicsConfig | None = None, u_nom=None, scan=None):
    cfg = cfg or DynamicsConfig(world.env)
    u_nom = clamp(cfg, _nominal(cfg, world, u_nom))
    rows = pair_rows(cfg, world, params, scan)
    out = u_nom.copy()
    relaxed = np.zeros(world.n_agents, dtype=bool)
    involved = np.unique(np.concatenate([rows.i, rows.j[rows.j >= 0]]))
    for i in involved.tolist():
        out[i], relaxed[i] = decentralized_cbfqp_controller(world, i, params, cfg, u_nom, scan, rows)
    return out, relaxed


# ---------------------------------------------------------------------------
# learned-certificate QP target


def certificate_jacobian(cert: GnnParams, graph) -> tuple[np.ndarray, list[np.ndarray]]:
    """h for every agent and, per graph, the dense block ``J[i, j] = dh_i/dx_j`` of shape (N, N, n).

    Goal nodes are constants; LiDAR hits move with their owner (obstacles are fixed).
    """
    batch = as_batch(graph)
    A, n = batch.agent_states.shape
    tape = ad.Tape(check_finite=True)
    dx = tape.variable(np.zeros((A, n)))
    agent_e, hit_e = tracked_inputs(batch, dx)
    h = certificate_values(cert, batch, agent_e, hit_e=hit_e)
    blocks = [np.zeros((k, k, n)) for k in batch.n_per_graph]
    graph_of = batch.agent_graph
    starts = np.concatenate([[0], np.cumsum(batch.n_per_graph)[:-1]]).astype(int)
    local = np.arange(A) - starts[graph_of] if A else np.zeros(0, dtype=int)
    influence = _influence(batch)
    color = _color(influence)
    for c in range(int(color.max(initial=-1)) + 1):
        seed = (color == c).astype(float)
        (g,) = tape.grad(h, [dx], seed)
        # every agent j is influenced by at most one receiver i of this color
        recv_of = np.full(A, -1)
        ii, jj = np.nonzero(influence[color == c])
        recv_of[jj] = np.nonzero(color == c)[0][ii]
        for j in np.nonzero(recv_of >= 0)[0]:
            i = recv_of[j]
            blocks[graph_of[i]][local[i], local[j]] = g[j]
    return h.data.copy(), blocks


def _influence(batch: GraphBatch) -> np.ndarray:
    """Boolean (A, A): row i marks agent i and every agent with an edge into i."""
    A = batch.n_agents
    row = np.full(batch.node_kind.size, -1)
    row[batch.agent_nodes] = np.arange(A)
    r, s = row[batch.receivers], row[batch.senders]
    M = np.eye(A, dtype=bool)
    ok = s >= 0
    M[r[ok], s[ok]] = True
    return M


def _color(influence: np.ndarray) -> np.ndarray:
    """Greedy coloring so that receivers sharing a color have disjoint influence sets."""
    A = influence.shape[0]
    conflict = (influence.astype(np.int32) @ influence.T.astype(np.int32)) > 0
    color = np.full(A, -1)
    for i in range(A):
        used = set(color[conflict[i] & (color >= 0)].tolist())
        c = 0
        while c in used:
            c += 1
        color[i] = c
    return color


@dataclass
class QpTarget:
    u: np.ndarray  # (N, m)
    relaxed: bool
    h: np.ndarray  # (N,)


def qp_target_from_jacobian(cfg: DynamicsConfig, X: np.ndarray, h: np.ndarray, J: np.ndarray, alpha: float, u_nom: np.ndarray, penalty: float = 1e3) -> QpTarget:
    """Joint minimizer of sum |u_i - u_nom_i|^2 over the box, one row per agent:
    ``sum_j dh_i/dx_j (f_j + g_j u_j) >= -alpha h_i``."""
    N, m = u_nom.shape
    f, G = action_affine(cfg, X)
    A = np.einsum("ijn,jnm->ijm", J, G).reshape(N, N * m)
    b = -alpha * h - np.einsum("ijn,jn->i", J, f)
    u0 = clamp(cfg, u_nom)
    if np.all(A @ u0.reshape(-1) - b > 0):
        return QpTarget(u0, False, h)
    u, relaxed = _filter(u0.reshape(-1), A, b, np.tile(cfg.lo, N), np.tile(cfg.hi, N), penalty)
    return QpTarget(clamp(cfg, u.reshape(N, m)), relaxed, h)


def pi_qp_target(world: World, cert: GnnParams, alpha: float, u_nom=None, cfg: DynamicsConfig | None = None, graph=None) -> QpTarget:
    cfg = cfg or DynamicsConfig(world.env)
    graph = build_graph(world) if graph is None else graph
    h, (J,) = certificate_jacobian(cert, graph)
    return qp_target_from_jacobian(cfg, world.states, h, J, alpha, _nominal(cfg, world, u_nom))


def batched_qp_targets(cfg: DynamicsConfig, batch: GraphBatch, cert: GnnParams, alpha: float, u_nom: np.ndarray, penalty: float = 1e3):
    """pi_QP for every graph of a batch.  Returns (targets (A, m), relaxed per graph, h (A,))."""
    h, blocks = certificate_jacobian(cert, batch)
    X = batch.agent_states
    out = np.zeros_like(u_nom)
    relaxed = np.zeros(len(blocks), dtype=bool)
    s = 0
    for gid, J in enumerate(blocks):
        N = J.shape[0]
        t = qp_target_from_jacobian(cfg, X[s : s + N], h[s : s + N], J, alpha, u_nom[s : s + N], penalty)
        out[s : s + N], relaxed[gid] = t.u, t.relaxed
        s += N
    return out, relaxed, h
