"""Scene graphs: agents, goals and LiDAR hits as nodes, sensing edges into agents."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dynamics import EnvKind, as_env, cf_rotation
from .world import LidarScan, World, lidar_for, pairwise_distances

AGENT, GOAL, HIT = 0, 1, 2


def edge_state(env, x: np.ndarray) -> np.ndarray:
    """Per-node map e(x) whose differences are the edge features."""
    env = as_env(env)
    x = np.asarray(x)
    if env is EnvKind.DubinsCar:
        th, v = x[..., 2], x[..., 3]
        return np.stack([x[..., 0], x[..., 1], v * np.cos(th), v * np.sin(th)], axis=-1)
    if env is EnvKind.CrazyflieDrone:
        vel = np.einsum("...ij,...j->...i", cf_rotation(x), x[..., 3:6])
        return np.concatenate([x[..., :3], vel], axis=-1)
    return x.copy()


def edge_state_jacobian(env, x: np.ndarray) -> np.ndarray | None:
    """d e(x) / dx, shape (..., rho, n); None when e is the identity."""
    env = as_env(env)
    x = np.asarray(x, dtype=float)
    if env is EnvKind.DubinsCar:
        th, v = x[..., 2], x[..., 3]
        J = np.zeros(x.shape[:-1] + (4, 4))
        J[..., 0, 0] = J[..., 1, 1] = 1.0
        J[..., 2, 2], J[..., 2, 3] = -v * np.sin(th), np.cos(th)
        J[..., 3, 2], J[..., 3, 3] = v * np.cos(th), np.sin(th)
        return J
    if env is EnvKind.CrazyflieDrone:
        # complex-step differentiation: exact to rounding for analytic maps
        n = x.shape[-1]
        h = 1e-30
        J = np.zeros(x.shape[:-1] + (6, n))
        for k in range(n):
            xc = x.astype(complex)
            xc[..., k] += 1j * h
            J[..., :, k] = edge_state(env, xc).imag / h
        return J
    return None


@dataclass(frozen=True)
class SceneGraph:
    env: EnvKind
    n_agents: int
    node_kind: np.ndarray  # (V,)
    node_states: np.ndarray  # (V, n); goals and hits zero-padded
    receivers: np.ndarray  # (E,)
    senders: np.ndarray  # (E,)
    scan: LidarScan

    @property
    def n_nodes(self) -> int:
        return self.node_kind.shape[0]

    @property
    def n_edges(self) -> int:
        return self.receivers.shape[0]

    @property
    def node_features(self) -> np.ndarray:
        return np.eye(3)[self.node_kind]

    @property
    def edge_features(self) -> np.ndarray:
        e = edge_state(self.env, self.node_states)
        return e[self.senders] - e[self.receivers]

    def incoming(self, i: int) -> np.ndarray:
        return self.senders[self.receivers == i]


def build_graph(world: World, scan: LidarScan | None = None) -> SceneGraph:
    env = world.env
    N, n, k = world.n_agents, env.state_dim, env.pos_dim
    scan = lidar_for(world) if scan is None else scan
    H = len(scan.owner)
    goal_states = np.zeros((N, n))
    goal_states[:, :k] = world.goals
    node_states = np.concatenate([world.states, goal_states, scan.padded_states(n)], axis=0)
    node_kind = np.concatenate([np.full(N, AGENT), np.full(N, GOAL), np.full(H, HIT)])

    D = pairwise_distances(world.positions)
    np.fill_diagonal(D, np.inf)
    ri, sj = np.nonzero(D < world.R)
    recv = np.concatenate([ri, np.arange(N), scan.owner])
    send = np.concatenate([sj, N + np.arange(N), 2 * N + np.arange(H)])
    order = np.lexsort((send, recv))
    return SceneGraph(env, N, node_kind, node_states, recv[order].astype(np.int64), send[order].astype(np.int64), scan)


@dataclass(frozen=True)
class GraphBatch:
    """Several scene graphs flattened into one node/edge list.

    ``agent_nodes[a]`` is the flat node id of the a-th agent (graphs in order),
    ``edge_slots`` is an (A, D) matrix of edge ids per receiving agent padded
    with -1, which is the layout the attention softmax runs on.
    """

    env: EnvKind
    node_kind: np.ndarray
    node_states: np.ndarray
    receivers: np.ndarray
    senders: np.ndarray
    agent_nodes: np.ndarray
    agent_graph: np.ndarray
    edge_slots: np.ndarray
    n_per_graph: tuple[int, ...]
    hit_nodes: np.ndarray  # flat node id of every LiDAR hit
    hit_agent: np.ndarray  # agent row (into agent_nodes) that owns each hit
    hit_jac: np.ndarray  # (H, pos_dim, pos_dim) d hit / d owner position

    @classmethod
    def from_graphs(cls, graphs: list[SceneGraph]) -> "GraphBatch":
        env = graphs[0].env
        kinds, states, recv, send, agents, agent_graph = [], [], [], [], [], []
        hit_nodes, hit_agent, hit_jac = [], [], []
        off = a_off = 0
        for g_id, g in enumerate(graphs):
            kinds.append(g.node_kind)
            states.append(g.node_states)
            recv.append(g.receivers + off)
            send.append(g.senders + off)
            agents.append(off + np.arange(g.n_agents))
            agent_graph.append(np.full(g.n_agents, g_id))
            hit_nodes.append(off + 2 * g.n_agents + np.arange(len(g.scan.owner)))
            hit_agent.append(a_off + g.scan.owner)
            hit_jac.append(g.scan.point_jacobian())
            off += g.n_nodes
            a_off += g.n_agents
        receivers = np.concatenate(recv)
        senders = np.concatenate(send)
        agent_nodes = np.concatenate(agents)
        node_to_agent = np.full(off, -1)
        node_to_agent[agent_nodes] = np.arange(agent_nodes.size)
        rows = node_to_agent[receivers]
        counts = np.bincount(rows, minlength=agent_nodes.size)
        D = int(counts.max()) if counts.size else 0
        slots = np.full((agent_nodes.size, D), -1, dtype=np.int64)
        order = np.argsort(rows, kind="stable")
        starts = np.concatenate([[0], np.cumsum(counts)[:-1]])
        pos_in_row = np.arange(receivers.size) - starts[rows[order]]
        slots[rows[order], pos_in_row] = order
        return cls(
            env,
            np.concatenate(kinds),
            np.concatenate(states, axis=0),
            receivers,
            senders,
            agent_nodes,
            np.concatenate(agent_graph),
            slots,
            tuple(g.n_agents for g in graphs),
            np.concatenate(hit_nodes).astype(np.int64),
            np.concatenate(hit_agent).astype(np.int64),
            np.concatenate(hit_jac, axis=0),
        )

    @property
    def n_agents(self) -> int:
        return self.agent_nodes.size

    @property
    def agent_states(self) -> np.ndarray:
        return self.node_states[self.agent_nodes]
