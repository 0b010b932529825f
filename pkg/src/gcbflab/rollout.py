"""Closed-loop simulation of several worlds under one controller."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .cbf import BASELINES, HocbfParams, centralized_cbfqp_controller, decentralized_all
from .dynamics import DynamicsConfig, clamp, nominal_control, step
from .gnn import GnnParams, certificate_values, policy_residual
from .graph import GraphBatch, build_graph
from .world import LidarScan, World, lidar_for, safety_status


class Controller:
    """Maps a list of worlds (and their LiDAR scans) to controls of shape (S, N, m)."""

    name = "controller"
    needs_graph = False

    def __init__(self, cfg: DynamicsConfig):
        self.cfg = cfg

    def act(self, worlds: list[World], scans: list[LidarScan], graphs=None) -> np.ndarray:
        raise NotImplementedError


class NominalController(Controller):
    name = "nominal"

    def act(self, worlds, scans, graphs=None):
        return np.stack([clamp(self.cfg, nominal_control(self.cfg, w.states, w.goals)) for w in worlds])


class GnnController(Controller):
    """clamp(pi_NN + pi_nom) evaluated for all worlds in one batched pass."""

    name = "gcbf+"
    needs_graph = True

    def __init__(self, cfg: DynamicsConfig, policy: GnnParams):
        super().__init__(cfg)
        self.policy = policy

    def act(self, worlds, scans, graphs=None):
        graphs = graphs or [build_graph(w, s) for w, s in zip(worlds, scans)]
        batch = GraphBatch.from_graphs(graphs)
        res = policy_residual(self.policy, batch).data
        X = batch.agent_states
        goals = np.concatenate([w.goals for w in worlds])
        u = clamp(self.cfg, res + nominal_control(self.cfg, X, goals))
        return u.reshape(len(worlds), -1, u.shape[-1])


class CbfQpController(Controller):
    """Hand-crafted HOCBF-QP baseline, centralized or decentralized."""

    def __init__(self, cfg: DynamicsConfig, name: str, params: HocbfParams | None = None):
        super().__init__(cfg)
        kind, alpha = BASELINES[name]
        self.name = name
        self.kind = kind
        self.params = params or HocbfParams(alpha=alpha)
        self.relaxations = 0

    def act(self, worlds, scans, graphs=None):
        out = []
        for w, s in zip(worlds, scans):
            if self.kind == "centralized":
                u, relaxed = centralized_cbfqp_controller(w, self.params, self.cfg, scan=s)
                self.relaxations += int(relaxed)
            else:
                u, relaxed = decentralized_all(w, self.params, self.cfg, scan=s)
                self.relaxations += int(relaxed.sum())
            out.append(u)
        return np.stack(out)


def make_controller(name: str, cfg: DynamicsConfig, policy: GnnParams | None = None) -> Controller:
    name = name.lower()
    if name == "nominal":
        return NominalController(cfg)
    if name in BASELINES:
        return CbfQpController(cfg, name)
    if name in ("gcbf+", "gcbf"):
        if policy is None:
            raise ValueError("the gcbf+ controller needs a policy checkpoint")
        return GnnController(cfg, policy)
    raise ValueError(f"unknown controller {name!r}")


@dataclass
class Rollout:
    """Trajectories of S worlds with N agents each over K steps (K + 1 states)."""

    worlds: list[World]  # initial snapshots (goals and obstacles are fixed)
    states: np.ndarray  # (S, K + 1, N, n)
    actions: np.ndarray  # (S, K, N, m)
    safe: np.ndarray  # (S, K + 1, N) membership of the local safe set
    h: np.ndarray | None = None  # (S, K + 1, N) certificate values when recorded
    meta: dict = field(default_factory=dict)

    @property
    def n_steps(self) -> int:
        return self.actions.shape[1]

    def world_at(self, s: int, t: int) -> World:
        w = self.worlds[s]
        return w.with_states(self.states[s, t], advance=t - w.t)

    def extend(self, other: "Rollout") -> "Rollout":
        """Append a continuation whose first state is this rollout's last."""
        h = None
        if self.h is not None and other.h is not None:
            h = np.concatenate([self.h, other.h[:, 1:]], axis=1)
        return Rollout(
            self.worlds,
            np.concatenate([self.states, other.states[:, 1:]], axis=1),
            np.concatenate([self.actions, other.actions], axis=1),
            np.concatenate([self.safe, other.safe[:, 1:]], axis=1),
            h,
            self.meta,
        )


def simulate(cfg: DynamicsConfig, worlds: list[World], controller: Controller, steps: int, certificate: GnnParams | None = None) -> Rollout:
    """Run ``steps`` explicit-Euler steps of every world under ``controller``.

    With ``certificate`` set, h is evaluated for every agent at every step.
    """
    S = len(worlds)
    N, n, m = worlds[0].n_agents, cfg.env.state_dim, cfg.env.action_dim
    states = np.zeros((S, steps + 1, N, n))
    actions = np.zeros((S, steps, N, m))
    safe = np.zeros((S, steps + 1, N), dtype=bool)
    hs = np.zeros((S, steps + 1, N)) if certificate is not None else None
    cur = list(worlds)
    for t in range(steps + 1):
        scans = [lidar_for(w) for w in cur]
        states[:, t] = [w.states for w in cur]
        safe[:, t] = [safety_status(w, sc) for w, sc in zip(cur, scans)]
        graphs = None
        if controller.needs_graph or certificate is not None:
            graphs = [build_graph(w, sc) for w, sc in zip(cur, scans)]
        if certificate is not None:
            hs[:, t] = certificate_values(certificate, GraphBatch.from_graphs(graphs)).data.reshape(S, N)
        if t == steps:
            break
        u = controller.act(cur, scans, graphs)
        actions[:, t] = u
        cur = [w.with_states(step(cfg, w.states, u[s])) for s, w in enumerate(cur)]
    return Rollout(list(worlds), states, actions, safe, hs, {"dt": cfg.dt})
