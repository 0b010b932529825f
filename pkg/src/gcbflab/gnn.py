"""Attention GNN shared by the certificate h and the policy network.

One aggregation round per receiving agent::

    q_ij = psi1([v_i, v_j, e_ij])
    w_ij = softmax_j psi2(q_ij)
    out_i = psi4(sum_j w_ij psi3(q_ij))

All functions take a :class:`~gcbflab.graph.GraphBatch`; single graphs are
wrapped on the fly.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .dynamics import DynamicsConfig, as_env, clamp
from .graph import GraphBatch, SceneGraph, edge_state, edge_state_jacobian
from .rng import RngState

# (hidden, hidden, out) per MLP; input size of psi1 depends on the edge dim
HIDDEN = {"psi1": (256, 256, 128), "psi2": (128, 128, 1), "psi3": (256, 256, 128), "psi4": (256, 256, None)}
MLP_INPUT = {"psi2": 128, "psi3": 128, "psi4": 128}
_PAD = -1e30


@dataclass
class GnnParams:
    """Flat name -> array map, e.g. ``psi1.0.W``."""

    arrays: dict[str, np.ndarray]
    out_dim: int

    def names(self) -> list[str]:
        return list(self.arrays)

    def values(self) -> list[np.ndarray]:
        return list(self.arrays.values())

    def with_values(self, values) -> "GnnParams":
        return GnnParams(dict(zip(self.arrays, values)), self.out_dim)

    def on_tape(self, tape: ad.Tape) -> dict[str, Tensor]:
        return {k: tape.variable(v) for k, v in self.arrays.items()}

    def constants(self) -> dict[str, Tensor]:
        return {k: Tensor(v) for k, v in self.arrays.items()}

    def n_params(self) -> int:
        return int(sum(v.size for v in self.arrays.values()))


def layer_sizes(env, out_dim: int) -> dict[str, list[int]]:
    env = as_env(env)
    sizes = {}
    for name, (h1, h2, out) in HIDDEN.items():
        d_in = 6 + env.edge_dim if name == "psi1" else MLP_INPUT[name]
        sizes[name] = [d_in, h1, h2, out if out is not None else out_dim]
    return sizes


def _orthogonal(gen: np.random.Generator, n_in: int, n_out: int, gain: float) -> np.ndarray:
    a = gen.standard_normal((max(n_in, n_out), min(n_in, n_out)))
    q, r = np.linalg.qr(a)
    q = q * np.sign(np.diag(r))
    w = q if n_in >= n_out else q.T
    return gain * w[:n_in, :n_out]


def init_params(rng: RngState, env, out_dim: int, final_gain: float = 0.01) -> GnnParams:
    """Orthogonal init (gain sqrt 2) for hidden layers; ``final_gain`` on the output layer of psi4.

    ``final_gain=0`` gives a zero output layer, used for the policy residual.
    """
    gen = rng.generator()
    arrays: dict[str, np.ndarray] = {}
    for name, dims in layer_sizes(env, out_dim).items():
        for k in range(3):
            last = k == 2
            if last and name == "psi4":
                gain = final_gain
            else:
                gain = 1.0 if last else np.sqrt(2.0)
            W = _orthogonal(gen, dims[k], dims[k + 1], gain) if gain else np.zeros((dims[k], dims[k + 1]))
            arrays[f"{name}.{k}.W"] = W
            arrays[f"{name}.{k}.b"] = np.zeros(dims[k + 1])
    return GnnParams(arrays, out_dim)


def init_certificate(rng: RngState, env) -> GnnParams:
    return init_params(rng, env, 1, final_gain=0.01)


def init_policy(rng: RngState, env) -> GnnParams:
    return init_params(rng, env, as_env(env).action_dim, final_gain=0.0)


def mlp(p: dict[str, Tensor], name: str, x: Tensor) -> Tensor:
    for k in range(3):
        x = ad.add(ad.matmul(x, p[f"{name}.{k}.W"]), p[f"{name}.{k}.b"])
        if k < 2:
            x = ad.relu(x)
    return x


def as_batch(graph) -> GraphBatch:
    if isinstance(graph, GraphBatch):
        return graph
    if isinstance(graph, SceneGraph):
        return GraphBatch.from_graphs([graph])
    return GraphBatch.from_graphs(list(graph))


def _rows(t: Tensor, idx: np.ndarray, width: int) -> Tensor:
    """Gather rows ``idx`` of a 2-D tensor as shape (len(idx), 1, width)."""
    return ad.slice_(t, (idx[:, None, None], np.arange(width)[None, None, :]))


def tracked_inputs(batch: GraphBatch, dx: Tensor) -> tuple[Tensor, Tensor | None]:
    """First-order node e-states for agent states ``X + dx``, with ``dx`` a tracked (A, n) tensor.

    Values are exact at ``dx = 0``-valued perturbations (``dx`` typically holds
    ``x - stop_gradient(x)``); derivatives carry the true Jacobians of e(x) and of the
    LiDAR hit points, which slide with their owner across the obstacle surface.
    Returns ``(agent_e (A, rho), hit_e (H, rho) or None)``.
    """
    env = batch.env
    X = batch.agent_states
    A, n = X.shape
    k, rho = env.pos_dim, env.edge_dim
    Je = edge_state_jacobian(env, X)
    e0 = Tensor(edge_state(env, X))
    if Je is None:
        agent_e = ad.add(e0, dx)
    else:
        agent_e = ad.add(e0, ad.sum_(ad.mul(Tensor(Je), _rows(dx, np.arange(A), n)), axis=2))
    H = batch.hit_nodes.size
    if H == 0:
        return agent_e, None
    hit0 = batch.node_states[batch.hit_nodes, :k]
    dp = ad.sum_(ad.mul(Tensor(batch.hit_jac), _rows(dx, batch.hit_agent, k)), axis=2)
    hit_pos = ad.add(Tensor(hit0), dp)
    hit_e = ad.concatenate([hit_pos, Tensor(np.zeros((H, rho - k)))], axis=1) if rho > k else hit_pos
    return agent_e, hit_e


def node_edge_states(batch: GraphBatch, agent_e: Tensor | None = None, hit_e: Tensor | None = None) -> tuple[Tensor, np.ndarray, np.ndarray]:
    """Node e-states as one tensor plus sender/receiver indices into it.

    Agents occupy the first ``A`` rows and LiDAR hits the next ``H`` (so tracked
    tensors can be spliced in); goal nodes follow as constants.
    """
    V = batch.node_kind.size
    A = batch.n_agents
    H = batch.hit_nodes.size
    is_goal = np.ones(V, dtype=bool)
    is_goal[batch.agent_nodes] = False
    is_goal[batch.hit_nodes] = False
    goals = np.nonzero(is_goal)[0]
    remap = np.empty(V, dtype=np.int64)
    remap[batch.agent_nodes] = np.arange(A)
    remap[batch.hit_nodes] = A + np.arange(H)
    remap[goals] = A + H + np.arange(goals.size)
    e_all = edge_state(batch.env, batch.node_states)
    if agent_e is None:
        agent_e = Tensor(e_all[batch.agent_nodes])
    if hit_e is None:
        hit_e = Tensor(e_all[batch.hit_nodes])
    parts = [agent_e] + ([hit_e] if H else []) + ([Tensor(e_all[goals])] if goals.size else [])
    nodes = ad.concatenate(parts, axis=0) if len(parts) > 1 else agent_e
    return nodes, remap[batch.senders], remap[batch.receivers]


def edge_inputs(batch: GraphBatch, agent_e: Tensor | None = None, hit_e: Tensor | None = None) -> Tensor:
    """z_ij = [v_i, v_j, e_j - e_i] for every edge, shape (E, 6 + rho)."""
    nodes, s, r = node_edge_states(batch, agent_e, hit_e)
    e = ad.sub(ad.slice_(nodes, s), ad.slice_(nodes, r))
    onehot = np.eye(3)
    v = np.concatenate([onehot[batch.node_kind[batch.receivers]], onehot[batch.node_kind[batch.senders]]], axis=1)
    return ad.concatenate([Tensor(v), e], axis=1)


def gnn_apply(p: dict[str, Tensor], batch: GraphBatch, agent_e: Tensor | None = None, hit_e: Tensor | None = None):
    """Returns (per-agent outputs (A, out), attention weights (A, D, 1))."""
    z = edge_inputs(batch, agent_e, hit_e)
    q = mlp(p, "psi1", z)
    logits = mlp(p, "psi2", q)
    vals = mlp(p, "psi3", q)
    slots = batch.edge_slots
    idx = np.where(slots >= 0, slots, 0)
    mask = np.where(slots >= 0, 0.0, _PAD)[..., None]
    w = ad.softmax(ad.add(ad.slice_(logits, idx), Tensor(mask)), axis=1)
    agg = ad.sum_(ad.mul(w, ad.slice_(vals, idx)), axis=1)
    return mlp(p, "psi4", agg), w


def certificate_values(params: GnnParams | None, graph, agent_e: Tensor | None = None, p: dict | None = None, hit_e: Tensor | None = None) -> Tensor:
    """h for every agent in the batch, shape (A,)."""
    batch = as_batch(graph)
    out, _ = gnn_apply(p if p is not None else params.constants(), batch, agent_e, hit_e)
    return ad.sum_(out, axis=1)


def gcbf_forward(params: GnnParams, graph: SceneGraph, i: int | None = None):
    """h_i for one agent, or the vector of all h when ``i`` is None."""
    h = certificate_values(params, graph).data
    return h if i is None else float(h[i])


def policy_residual(params: GnnParams | None, graph, agent_e: Tensor | None = None, p: dict | None = None, hit_e: Tensor | None = None) -> Tensor:
    batch = as_batch(graph)
    out, _ = gnn_apply(p if p is not None else params.constants(), batch, agent_e, hit_e)
    return out


def policy_actions(params: GnnParams, graph, u_nom: np.ndarray, cfg: DynamicsConfig) -> np.ndarray:
    """clamp(pi_NN + u_nom) for every agent of the batch."""
    res = policy_residual(params, graph).data
    return clamp(cfg, res + u_nom)


def policy_forward(params: GnnParams, graph: SceneGraph, i: int, u_nom_i, cfg: DynamicsConfig) -> np.ndarray:
    res = policy_residual(params, graph).data[i]
    return clamp(cfg, res + np.asarray(u_nom_i, dtype=float))


def attention_weights(params: GnnParams, graph: SceneGraph, i: int) -> list[tuple[int, float]]:
    """(sender node, weight) pairs for agent ``i``'s incoming edges."""
    batch = as_batch(graph)
    _, w = gnn_apply(params.constants(), batch)
    slots = batch.edge_slots[i]
    return [(int(batch.senders[e]), float(w.data[i, k, 0])) for k, e in enumerate(slots) if e >= 0]


def all_attention(params: GnnParams, batch: GraphBatch) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Flat (receiver agent row, sender node, weight) for every edge in the batch."""
    _, w = gnn_apply(params.constants(), batch)
    rows, cols = np.nonzero(batch.edge_slots >= 0)
    edges = batch.edge_slots[rows, cols]
    return rows, batch.senders[edges], w.data[rows, cols, 0]
