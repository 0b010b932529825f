"""GCBF+ training: on-policy collection, T-step invariance labels, losses and Adam updates."""
from __future__ import annotations

import time
from dataclasses import asdict, dataclass, field, replace
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .cbf import batched_qp_targets
from .dynamics import DynamicsConfig, EnvKind, action_affine, as_env, clamp, nominal_control
from .gnn import GnnParams, certificate_values, init_certificate, init_policy, policy_residual, tracked_inputs
from .graph import GraphBatch, SceneGraph, build_graph
from .optim import AdamState, adam_update
from .rng import RngState
from .rollout import Controller, GnnController, Rollout, simulate
from .world import R_AGENT, R_SENSE, World, check_world_constants, sample_scenario

# T, eta_ctrl, lr policy, lr certificate
TABLE2 = {
    EnvKind.SingleIntegrator: (1, 1e-4, 1e-5, 1e-5),
    EnvKind.DoubleIntegrator: (32, 1e-4, 1e-5, 1e-5),
    EnvKind.DubinsCar: (32, 1e-5, 3e-5, 3e-5),
    EnvKind.LinearDrone: (32, 1e-3, 1e-5, 1e-5),
    EnvKind.CrazyflieDrone: (32, 3e-5, 1e-5, 1e-4),
}

SAFE, UNLABELED, UNSAFE = 1, 0, -1


@dataclass
class TrainConfig:
    env: str = "DoubleIntegrator"
    T: int | None = None  # None: per-env table default
    eta_ctrl: float | None = None
    lr_policy: float | None = None
    lr_cbf: float | None = None
    eta_deriv: float = 0.2
    gamma: float = 0.02
    alpha: float = 1.0
    total_steps: int = 1000
    updates_per_step: int = 1  # Adam updates (fresh minibatch each) per training step
    n_agents: int = 8
    n_obstacles: int = 8
    area: float | None = None  # None: 4 in 2D, 2 in 3D
    n_scenarios: int = 16
    rollout_length: int = 64
    collect_every: int = 32  # training steps between collection rounds
    batch_size: int = 64
    ctrl_target: str = "qp"  # "qp" or "nominal"
    slack_penalty: float = 1e3
    checkpoint_every: int = 250
    jacobian_chunk: int = 64
    R: float = R_SENSE
    r: float = R_AGENT
    n_rays: int | None = None  # None: 32 in 2D, 130 in 3D

    def __post_init__(self):
        env = as_env(self.env)
        self.env = env.value
        T, eta, lrp, lrc = TABLE2[env]
        self.T = T if self.T is None else self.T
        self.eta_ctrl = eta if self.eta_ctrl is None else self.eta_ctrl
        self.lr_policy = lrp if self.lr_policy is None else self.lr_policy
        self.lr_cbf = lrc if self.lr_cbf is None else self.lr_cbf
        self.area = (4.0 if env.pos_dim == 2 else 2.0) if self.area is None else self.area
        if self.ctrl_target not in ("qp", "nominal"):
            raise ValueError("ctrl_target must be 'qp' or 'nominal'")
        for name in ("T", "total_steps", "updates_per_step", "n_agents", "n_scenarios", "rollout_length", "collect_every", "batch_size", "jacobian_chunk", "checkpoint_every"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be at least 1")
        for name in ("eta_ctrl", "eta_deriv", "gamma", "alpha", "lr_policy", "lr_cbf", "slack_penalty"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if self.n_obstacles < 0:
            raise ValueError("n_obstacles must be non-negative")
        check_world_constants(self.R, self.r, self.n_rays)

    @property
    def env_kind(self) -> EnvKind:
        return as_env(self.env)


# ---------------------------------------------------------------------------
# data


def sample_worlds(cfg: TrainConfig, rng: RngState, count: int) -> list[World]:
    return [sample_scenario(cfg.env_kind, cfg.n_agents, cfg.area, cfg.n_obstacles, g, cfg.R, cfg.r, cfg.n_rays) for g in rng.split(count)]


def collect_onpolicy(cfg: TrainConfig, dyn: DynamicsConfig, policy: GnnParams | Controller, rng: RngState, extra: int = 0) -> Rollout:
    """``n_scenarios`` fresh scenarios rolled out for ``rollout_length + extra`` steps.

    The first ``rollout_length`` steps are the transitions; the ``extra`` tail is
    the continuation used by :func:`label_invariance`.
    """
    ctrl = policy if isinstance(policy, Controller) else GnnController(dyn, policy)
    worlds = sample_worlds(cfg, rng, cfg.n_scenarios)
    ro = simulate(dyn, worlds, ctrl, cfg.rollout_length + extra)
    ro.meta["n_transitions"] = cfg.rollout_length
    return ro


@dataclass
class LabeledDataset:
    labels: np.ndarray  # (S, L, N) in {SAFE, UNLABELED, UNSAFE}

    @property
    def safe(self) -> np.ndarray:
        return self.labels == SAFE

    @property
    def unsafe(self) -> np.ndarray:
        return self.labels == UNSAFE

    def counts(self) -> dict:
        return {"safe": int(self.safe.sum()), "unsafe": int(self.unsafe.sum()), "unlabeled": int((self.labels == UNLABELED).sum())}


def label_invariance(rollout: Rollout, T: int, controller: Controller | None = None, dyn: DynamicsConfig | None = None, n_transitions: int | None = None) -> LabeledDataset:
    """Label transitions t < L per agent.

    Currently unsafe -> UNSAFE; safe at every step t..t+T of the closed loop -> SAFE;
    otherwise UNLABELED.  When the recorded continuation is shorter than ``L + T``
    it is extended by simulating ``controller`` from the last state.
    """
    if T < 1:
        raise ValueError("T must be at least 1")
    L = rollout.meta.get("n_transitions", rollout.n_steps) if n_transitions is None else n_transitions
    need = L + T - rollout.n_steps
    if need > 0:
        if controller is None:
            raise ValueError("rollout too short for the horizon and no controller given to extend it")
        dyn = dyn or controller.cfg
        last = [rollout.world_at(s, rollout.n_steps) for s in range(len(rollout.worlds))]
        rollout = rollout.extend(simulate(dyn, last, controller, need))
    unsafe = ~rollout.safe  # (S, K+1, N)
    c = np.concatenate([np.zeros_like(unsafe[:, :1], dtype=np.int64), np.cumsum(unsafe, axis=1)], axis=1)
    t = np.arange(L)
    window = c[:, t + T + 1] - c[:, t]  # unsafe count over t..t+T
    labels = np.where(unsafe[:, :L], UNSAFE, np.where(window == 0, SAFE, UNLABELED)).astype(np.int8)
    return LabeledDataset(labels)


# ---------------------------------------------------------------------------
# batches and losses


@dataclass
class TrainBatch:
    worlds: list[World]  # B snapshots at t_k
    graph: GraphBatch  # graphs at t_k
    u_nom: np.ndarray  # (A, m)
    target: np.ndarray  # (A, m) constant control target
    safe_mask: np.ndarray  # (A,)
    unsafe_mask: np.ndarray  # (A,)

    @classmethod
    def build(cls, dyn: DynamicsConfig, worlds, target, labels, graphs=None) -> "TrainBatch":
        graphs = graphs or [build_graph(w) for w in worlds]
        batch = GraphBatch.from_graphs(graphs)
        goals = np.concatenate([w.goals for w in worlds])
        u_nom = nominal_control(dyn, batch.agent_states, goals)
        labels = np.concatenate([np.asarray(l).reshape(-1) for l in labels])
        return cls(list(worlds), batch, u_nom, np.asarray(target, dtype=float).reshape(u_nom.shape), labels == SAFE, labels == UNSAFE)


@dataclass
class LossBreakdown:
    total: float
    deriv: float
    safe: float
    unsafe: float
    ctrl: float
    per_agent: dict = field(default_factory=dict)  # term -> (A,) array

    def as_dict(self) -> dict:
        return {"total": self.total, "deriv": self.deriv, "safe": self.safe, "unsafe": self.unsafe, "ctrl": self.ctrl}


def _column(t: Tensor, k: int) -> Tensor:
    return ad.slice_(t, (slice(None), slice(k, k + 1)))


def next_state(dyn: DynamicsConfig, X: np.ndarray, u: Tensor) -> Tensor:
    """x + dt (f(x) + G(x) u) with ``u`` tracked."""
    f, G = action_affine(dyn, X)
    xdot = Tensor(f)
    for k in range(G.shape[-1]):
        xdot = ad.add(xdot, ad.mul(Tensor(G[:, :, k]), _column(u, k)))
    return ad.add(Tensor(X), ad.scale(xdot, dyn.dt))


def applied_control(pol_p: dict, tb: TrainBatch, dyn: DynamicsConfig) -> Tensor:
    """clamp(pi_NN + u_nom) in value; derivative taken through the pre-clamp sum."""
    pre = ad.add(policy_residual(None, tb.graph, p=pol_p), Tensor(tb.u_nom))
    return ad.add(pre, Tensor(clamp(dyn, pre.data) - pre.data))


def hdot_terms(cert_p: dict, pol_p: dict, tb: TrainBatch, dyn: DynamicsConfig):
    """(h_t, h_{t+1}, hdot, u) for every agent; h_{t+1} sees the graph rebuilt at the next state."""
    h_t = certificate_values(None, tb.graph, p=cert_p)
    u = applied_control(pol_p, tb, dyn)
    X = tb.graph.agent_states
    x1 = next_state(dyn, X, u)
    S = np.cumsum((0,) + tb.graph.n_per_graph)
    nxt = [w.with_states(x1.data[S[k] : S[k + 1]]) for k, w in enumerate(tb.worlds)]
    batch1 = GraphBatch.from_graphs([build_graph(w) for w in nxt])
    agent_e, hit_e = tracked_inputs(batch1, ad.sub(x1, Tensor(x1.data)))
    h_1 = certificate_values(None, batch1, agent_e, p=cert_p, hit_e=hit_e)
    hdot = ad.scale(ad.sub(h_1, h_t), 1.0 / dyn.dt)
    return h_t, h_1, hdot, u


def loss_terms(cert_p: dict, pol_p: dict, tb: TrainBatch, cfg: TrainConfig, dyn: DynamicsConfig) -> dict[str, Tensor]:
    """Per-agent loss terms (each shape (A,)) and their scalar ``total``."""
    h_t, _, hdot, u = hdot_terms(cert_p, pol_p, tb, dyn)
    A = h_t.shape[0]
    gamma = Tensor(np.full(A, cfg.gamma))
    deriv = ad.scale(ad.hinge(ad.sub(ad.sub(gamma, hdot), ad.scale(h_t, cfg.alpha))), cfg.eta_deriv)
    safe = ad.mul(ad.hinge(ad.sub(gamma, h_t)), Tensor(tb.safe_mask.astype(float)))
    unsafe = ad.mul(ad.hinge(ad.add(gamma, h_t)), Tensor(tb.unsafe_mask.astype(float)))
    ctrl = ad.scale(ad.l2_norm(ad.sub(u, Tensor(tb.target)), axis=1), cfg.eta_ctrl)
    total = ad.add(ad.add(ad.sum_(deriv), ad.sum_(safe)), ad.add(ad.sum_(unsafe), ad.sum_(ctrl)))
    return {"deriv": deriv, "safe": safe, "unsafe": unsafe, "ctrl": ctrl, "total": total}


def cbf_loss(cert: GnnParams, policy: GnnParams, tb: TrainBatch, cfg: TrainConfig, dyn: DynamicsConfig) -> float:
    t = loss_terms(cert.constants(), policy.constants(), tb, cfg, dyn)
    return float(t["deriv"].data.sum() + t["safe"].data.sum() + t["unsafe"].data.sum())


def ctrl_loss(policy: GnnParams, tb: TrainBatch, cfg: TrainConfig, dyn: DynamicsConfig) -> float:
    u = applied_control(policy.constants(), tb, dyn).data
    return float(cfg.eta_ctrl * np.linalg.norm(u - tb.target, axis=1).sum())


def _breakdown(terms: dict[str, Tensor]) -> LossBreakdown:
    per = {k: v.data.copy() for k, v in terms.items() if k != "total"}
    return LossBreakdown(float(terms["total"].data), *(float(per[k].sum()) for k in ("deriv", "safe", "unsafe", "ctrl")), per)


# ---------------------------------------------------------------------------
# optimization


@dataclass
class TrainState:
    cert: GnnParams
    policy: GnnParams
    opt_cert: AdamState
    opt_policy: AdamState
    step: int = 0

    @classmethod
    def fresh(cls, cfg: TrainConfig, rng: RngState) -> "TrainState":
        cert = init_certificate(rng.child(0), cfg.env_kind)
        policy = init_policy(rng.child(1), cfg.env_kind)
        return cls(cert, policy, AdamState.zeros_like(cert.values(), lr=cfg.lr_cbf), AdamState.zeros_like(policy.values(), lr=cfg.lr_policy))


class NonFiniteLossError(RuntimeError):
    pass


def train_step(state: TrainState, tb: TrainBatch, cfg: TrainConfig, dyn: DynamicsConfig) -> tuple[TrainState, LossBreakdown]:
    tape = ad.Tape()
    cert_p = state.cert.on_tape(tape)
    pol_p = state.policy.on_tape(tape)
    try:
        terms = loss_terms(cert_p, pol_p, tb, cfg, dyn)
    except ad.NonFiniteError as exc:
        raise NonFiniteLossError(f"step {state.step}: {exc}") from exc
    if not terms["total"].is_finite():
        raise NonFiniteLossError(f"step {state.step}: loss is {terms['total'].data}")
    names_c, names_p = state.cert.names(), state.policy.names()
    grads = tape.grad(terms["total"], [cert_p[k] for k in names_c] + [pol_p[k] for k in names_p])
    gc, gp = grads[: len(names_c)], grads[len(names_c) :]
    new_c, opt_c = adam_update(state.cert.values(), gc, state.opt_cert)
    new_p, opt_p = adam_update(state.policy.values(), gp, state.opt_policy)
    new = TrainState(state.cert.with_values(new_c), state.policy.with_values(new_p), opt_c, opt_p, state.step + 1)
    return new, _breakdown(terms)


@dataclass
class DataRound:
    """One collection round: transitions, labels and constant control targets."""

    rollout: Rollout
    labels: LabeledDataset
    targets: np.ndarray  # (S, L, N, m)
    relaxed_fraction: float
    graphs: list[list[SceneGraph]]

    def sample(self, dyn: DynamicsConfig, gen: np.random.Generator, batch_size: int) -> TrainBatch:
        S, L = self.labels.labels.shape[:2]
        flat = gen.choice(S * L, size=min(batch_size, S * L), replace=False)
        ss, tt = np.divmod(flat, L)
        worlds = [self.rollout.world_at(s, t) for s, t in zip(ss, tt)]
        graphs = [self.graphs[s][t] for s, t in zip(ss, tt)]
        return TrainBatch.build(dyn, worlds, [self.targets[s, t] for s, t in zip(ss, tt)], [self.labels.labels[s, t] for s, t in zip(ss, tt)], graphs)


def collect_round(cfg: TrainConfig, dyn: DynamicsConfig, state: TrainState, rng: RngState) -> DataRound:
    ctrl = GnnController(dyn, state.policy)
    ro = collect_onpolicy(cfg, dyn, ctrl, rng, extra=cfg.T)
    labels = label_invariance(ro, cfg.T, ctrl, dyn)
    S, L, N = labels.labels.shape
    m = dyn.env.action_dim
    graphs = [[build_graph(ro.world_at(s, t)) for t in range(L)] for s in range(S)]
    flat_graphs = [g for row in graphs for g in row]
    X = ro.states[:, :L].reshape(S * L * N, -1)
    goals = np.concatenate([np.tile(w.goals, (L, 1)) for w in ro.worlds])
    u_nom = clamp(dyn, nominal_control(dyn, X, goals))
    if cfg.ctrl_target == "nominal":
        return DataRound(ro, labels, u_nom.reshape(S, L, N, m), 0.0, graphs)
    targets = np.zeros_like(u_nom)
    relaxed = []
    per = N
    for a in range(0, len(flat_graphs), cfg.jacobian_chunk):
        chunk = flat_graphs[a : a + cfg.jacobian_chunk]
        batch = GraphBatch.from_graphs(chunk)
        sl = slice(a * per, (a + len(chunk)) * per)
        t, r, _ = batched_qp_targets(dyn, batch, state.cert, cfg.alpha, u_nom[sl], cfg.slack_penalty)
        targets[sl] = t
        relaxed.append(r)
    return DataRound(ro, labels, targets.reshape(S, L, N, m), float(np.concatenate(relaxed).mean()), graphs)


@dataclass
class TrainResult:
    state: TrainState
    history: list[dict]


def train(
    cfg: TrainConfig,
    rng: RngState,
    dyn: DynamicsConfig | None = None,
    log: Callable[[dict], None] | None = None,
    checkpoint: Callable[[TrainState], None] | None = None,
) -> TrainResult:
    """Alternate collection, labeling, QP targets and Adam steps for ``cfg.total_steps``.

    ``log`` receives one record per step; ``checkpoint`` is called every
    ``cfg.checkpoint_every`` steps and after the last one.
    """
    dyn = dyn or DynamicsConfig(cfg.env_kind)
    state = TrainState.fresh(cfg, rng.child(0))
    data_rng = rng.child(1)
    gen = rng.child(2).generator()
    history: list[dict] = []
    data: DataRound | None = None
    rounds = 0
    for k in range(cfg.total_steps):
        t0 = time.perf_counter()
        if k % cfg.collect_every == 0:
            data = collect_round(cfg, dyn, state, data_rng.child(rounds))
            rounds += 1
        for _ in range(cfg.updates_per_step):
            tb = data.sample(dyn, gen, cfg.batch_size)
            state, loss = train_step(state, tb, cfg, dyn)
        state = replace(state, step=k + 1)
        rec = {"step": state.step, "updates": state.opt_cert.step, **loss.as_dict(), **{f"n_{k2}": v for k2, v in data.labels.counts().items()}, "relaxed_fraction": data.relaxed_fraction, "wall_time": time.perf_counter() - t0}
        history.append(rec)
        if log:
            log(rec)
        if checkpoint and (state.step % cfg.checkpoint_every == 0 or state.step == cfg.total_steps):
            checkpoint(state)
    return TrainResult(state, history)


def config_dict(cfg: TrainConfig) -> dict:
    return asdict(cfg)
