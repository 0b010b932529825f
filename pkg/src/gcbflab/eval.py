"""Evaluation: safety/reach/success metrics, experiment drivers and theory audits."""
from __future__ import annotations

import time
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .dynamics import DynamicsConfig, as_env
from .gnn import GnnParams, all_attention, certificate_values
from .graph import GraphBatch, build_graph
from .rng import RngState
from .rollout import Controller, Rollout, make_controller, simulate
from .world import R_AGENT, R_SENSE, World, check_world_constants, pairwise_distances, sample_scenario

EPISODE_STEPS = 4096
FULL_INSTANCES = 32
DESK_INSTANCES = 8
DESK_MAX_AGENTS = 256


@dataclass
class ExperimentSpec:
    env: str = "DoubleIntegrator"
    controller: str = "gcbf+"
    n_agents: list = field(default_factory=lambda: [8])
    area: float = 4.0
    n_obstacles: list = field(default_factory=lambda: [0])
    steps: int = EPISODE_STEPS
    instances: int | None = None  # None: 8 at desk scale, 32 at full scale
    seeds: list = field(default_factory=lambda: [0])
    full_scale: bool = False
    R: float = R_SENSE
    r: float = R_AGENT
    n_rays: int | None = None  # None: 32 in 2D, 130 in 3D

    def __post_init__(self):
        self.env = as_env(self.env).value
        self.controller = self.controller.lower()
        self.n_agents = [int(n) for n in np.atleast_1d(self.n_agents)]
        self.n_obstacles = [int(n) for n in np.atleast_1d(self.n_obstacles)]
        self.seeds = [int(s) for s in np.atleast_1d(self.seeds)]
        if self.instances is None:
            self.instances = FULL_INSTANCES if self.full_scale else DESK_INSTANCES
        if self.steps < 1 or self.instances < 1 or self.area <= 0:
            raise ValueError("steps, instances and area must be positive")
        if min(self.n_agents) < 1 or min(self.n_obstacles) < 0 or not self.seeds:
            raise ValueError("need N >= 1, non-negative obstacle counts and at least one seed")
        check_world_constants(self.R, self.r, self.n_rays)
        if not self.full_scale:
            self.n_agents = [n for n in self.n_agents if n <= DESK_MAX_AGENTS] or [min(self.n_agents)]

    @property
    def world_constants(self) -> dict:
        return {"R": self.R, "r": self.r, "n_rays": self.n_rays}


@dataclass
class Metrics:
    env: str
    controller: str
    n_agents: int
    area: float
    n_obstacles: int
    seeds: tuple
    instances: int
    steps: int
    safety: float
    reach: float
    success: float
    safety_std: float = 0.0
    reach_std: float = 0.0
    success_std: float = 0.0

    @property
    def density(self) -> float:
        dim = as_env(self.env).pos_dim
        return self.n_agents / self.area**dim

    def row(self) -> dict:
        d = asdict(self)
        d["seeds"] = " ".join(str(s) for s in self.seeds)
        d["density"] = self.density
        return d


METRIC_COLUMNS = [
    "env", "controller", "n_agents", "area", "n_obstacles", "seeds", "instances", "steps", "density",
    "safety", "reach", "success", "safety_std", "reach_std", "success_std",
]


def agent_outcomes(ro: Rollout, r: float) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per (instance, agent): safe over the whole episode, reached at the final step, both."""
    safe = ro.safe.all(axis=1)
    k = ro.worlds[0].env.pos_dim
    goals = np.stack([w.goals for w in ro.worlds])
    dist = np.linalg.norm(ro.states[:, -1, :, :k] - goals, axis=-1)
    reach = dist <= 2 * r
    return safe, reach, safe & reach


def metrics_from(outcomes: list[tuple[np.ndarray, np.ndarray, np.ndarray]], **meta) -> Metrics:
    safe = np.concatenate([o[0] for o in outcomes])
    reach = np.concatenate([o[1] for o in outcomes])
    succ = np.concatenate([o[2] for o in outcomes])
    per = [x.mean(axis=1) for x in (safe, reach, succ)]  # mean over agents, per instance
    return Metrics(
        **meta,
        safety=float(per[0].mean()), reach=float(per[1].mean()), success=float(per[2].mean()),
        safety_std=float(per[0].std()), reach_std=float(per[1].std()), success_std=float(per[2].std()),
    )


def eval_worlds(env, n_agents: int, area: float, n_obstacles: int, instances: int, seed: int,
                R: float = R_SENSE, r: float = R_AGENT, n_rays: int | None = None) -> list[World]:
    # evaluation scenarios use their own stream so they never coincide with training draws
    rng = RngState(seed, stream=1_000_003)
    return [sample_scenario(env, n_agents, area, n_obstacles, g, R, r, n_rays) for g in rng.split(instances)]


def rollout_eval(
    env,
    controller: Controller | str,
    n_agents: int,
    area: float,
    n_obstacles: int = 0,
    steps: int = EPISODE_STEPS,
    instances: int = DESK_INSTANCES,
    seed: int = 0,
    policy: GnnParams | None = None,
    dyn: DynamicsConfig | None = None,
    worlds: list[World] | None = None,
    certificate: GnnParams | None = None,
    world_constants: dict | None = None,
) -> tuple[Rollout, Metrics]:
    env = as_env(env)
    dyn = dyn or DynamicsConfig(env)
    ctrl = make_controller(controller, dyn, policy) if isinstance(controller, str) else controller
    worlds = worlds if worlds is not None else eval_worlds(env, n_agents, area, n_obstacles, instances, seed, **(world_constants or {}))
    ro = simulate(dyn, worlds, ctrl, steps, certificate)
    meta = dict(env=env.value, controller=ctrl.name, n_agents=worlds[0].n_agents, area=area, n_obstacles=n_obstacles,
                seeds=(seed,), instances=len(worlds), steps=steps)
    return ro, metrics_from([agent_outcomes(ro, worlds[0].r)], **meta)


def run_experiment(spec: ExperimentSpec, policies: dict | None = None, dyn: DynamicsConfig | None = None) -> list[Metrics]:
    """One Metrics row per (N, obstacle count), aggregated over the experiment seeds.

    ``policies`` maps seed -> policy parameters for the learned controller.
    """
    rows = []
    for N in spec.n_agents:
        for n_obs in spec.n_obstacles:
            outs = []
            for seed in spec.seeds:
                pol = None if policies is None else policies[seed]
                ro, _ = rollout_eval(spec.env, spec.controller, N, spec.area, n_obs, spec.steps, spec.instances, seed, pol, dyn,
                                     world_constants=spec.world_constants)
                outs.append(agent_outcomes(ro, ro.worlds[0].r))
            rows.append(metrics_from(outs, env=spec.env, controller=spec.controller, n_agents=N, area=spec.area,
                                     n_obstacles=n_obs, seeds=tuple(spec.seeds), instances=spec.instances * len(spec.seeds), steps=spec.steps))
    return rows


# ---------------------------------------------------------------------------
# invariance-theorem audit


@dataclass
class AuditReport:
    n_steps: int
    derivative_violations: list  # (instance, step, channel, residual)
    h_negative: list  # (instance, step, channel, h)
    collisions: list  # (instance, step, i, j); j = -1 for an obstacle
    started_in_set: bool
    tolerance: float

    @property
    def first_collision(self):
        return self.collisions[0] if self.collisions else None

    @property
    def theorem_consistent(self) -> bool:
        """Zero derivative violations from a start inside the set must imply no h < 0 and no collision."""
        if self.derivative_violations or not self.started_in_set:
            return True
        return not self.h_negative and not self.collisions

    def summary(self) -> dict:
        return {
            "n_steps": self.n_steps, "tolerance": self.tolerance, "started_in_set": self.started_in_set,
            "derivative_violations": len(self.derivative_violations), "h_negative": len(self.h_negative),
            "collisions": len(self.collisions), "first_collision": self.first_collision,
            "theorem_consistent": self.theorem_consistent,
        }


def collision_events(ro: Rollout, first_only: bool = True) -> list:
    """(instance, step, i, j) for pairs at distance <= 2r, and (instance, step, i, -1) for obstacle contact."""
    out = []
    r = ro.worlds[0].r
    k = ro.worlds[0].env.pos_dim
    for s in range(ro.states.shape[0]):
        for t in range(ro.states.shape[1]):
            if ro.safe[s, t].all():
                continue
            pos = ro.states[s, t, :, :k]
            D = pairwise_distances(pos)
            ii, jj = np.nonzero(np.triu(D <= 2 * r, k=1))
            ev = [(s, t, int(i), int(j)) for i, j in zip(ii, jj)]
            agents_in_pairs = set(ii.tolist()) | set(jj.tolist())
            ev += [(s, t, int(i), -1) for i in np.nonzero(~ro.safe[s, t])[0] if i not in agents_in_pairs]
            out.extend(ev)
            if first_only and ev:
                break
    return sorted(out)


def check_theorem1(ro: Rollout, h: np.ndarray, alpha: float, hdot: np.ndarray | None = None, tolerance: float = 1e-6, active: np.ndarray | None = None) -> AuditReport:
    """Audit a closed-loop trajectory against the CBF invariance theorem.

    ``h`` has shape (S, K + 1, P) (one channel per barrier, e.g. per agent or per pair);
    ``hdot`` (S, K, P) defaults to the forward difference of ``h``.  ``active`` (S, K, P)
    marks where the derivative condition is required (default everywhere); a local
    barrier is only enforced while its pair is inside the sensing radius.
    """
    dt = None
    h = np.asarray(h, dtype=float)
    if hdot is None:
        dt = ro.meta.get("dt")
        if dt is None:
            raise ValueError("hdot not given and the rollout does not record dt")
        hdot = (h[:, 1:] - h[:, :-1]) / dt
    resid = hdot + alpha * h[:, :-1]
    if active is not None:
        resid = np.where(active, resid, np.inf)
    a = [(int(s), int(t), int(p), float(resid[s, t, p])) for s, t, p in zip(*np.nonzero(resid < -tolerance))]
    b = [(int(s), int(t), int(p), float(h[s, t, p])) for s, t, p in zip(*np.nonzero(h < 0))]
    c = collision_events(ro, first_only=False)
    return AuditReport(ro.n_steps, a, b, c, bool(np.all(h[:, 0] >= 0) and ro.safe[:, 0].all()), tolerance)


def distance_cbf_channels(ro: Rollout, r: float | None = None) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Pairwise h0 = |p_i - p_j|^2 - (2r)^2 and its exact derivative along the recorded controls.

    For single integrators the velocity is the control, so dh0/dt = 2 (p_i - p_j).(u_i - u_j).
    Returns (h (S, K+1, P), hdot (S, K, P), active (S, K, P)) over all unordered pairs,
    where ``active`` marks pairs closer than the sensing radius.
    """
    r = ro.worlds[0].r if r is None else r
    k = ro.worlds[0].env.pos_dim
    N = ro.states.shape[2]
    ii, jj = np.triu_indices(N, 1)
    p = ro.states[..., :k]
    dp = p[:, :, ii] - p[:, :, jj]
    h = (dp * dp).sum(-1) - (2 * r) ** 2
    du = ro.actions[:, :, ii] - ro.actions[:, :, jj]
    hdot = 2 * (dp[:, :-1] * du).sum(-1)
    active = np.sqrt((dp[:, :-1] ** 2).sum(-1)) < ro.worlds[0].R
    return h, hdot, active


def lemma1_scalar(alpha: float, v0: float, times: np.ndarray) -> np.ndarray:
    """Solution of v' = -alpha v: positive for every t when v0 > 0."""
    return v0 * np.exp(-alpha * np.asarray(times, dtype=float))


# ---------------------------------------------------------------------------
# attention-locality audit


@dataclass
class AttentionAudit:
    distances: np.ndarray
    weights: np.ndarray
    probes: int
    locality_failures: int
    R: float

    def band_mean(self, lo: float, hi: float) -> float:
        """Mean weight over d in [lo R, hi R); nan when the band is empty."""
        m = (self.distances >= lo * self.R) & (self.distances < hi * self.R)
        return float(self.weights[m].mean()) if m.any() else float("nan")

    def band_count(self, lo: float, hi: float) -> int:
        return int(((self.distances >= lo * self.R) & (self.distances < hi * self.R)).sum())

    @property
    def decays(self) -> bool:
        far, near = self.band_mean(0.9, 1.0), self.band_mean(0.4, 0.5)
        return bool(np.isfinite(far) and np.isfinite(near) and far < near)

    @property
    def locality_holds(self) -> bool:
        return self.probes > 0 and self.locality_failures == 0


def check_assumption1(
    cert: GnnParams,
    rng: RngState,
    n_samples: int = 1000,
    policy: GnnParams | None = None,
    env=None,
    n_agents: int = 8,
    area: float = 4.0,
    n_obstacles: int = 8,
    steps: int = 64,
    scenarios: int = 16,
    dyn: DynamicsConfig | None = None,
) -> AttentionAudit:
    """Attention weight vs inter-agent distance on closed-loop samples, plus hard-locality probes.

    Each probe picks an agent i and an agent j with no edge into i, moves j to another
    point at least R away from i, and requires h_i to stay bit-identical.
    """
    env = as_env(env or "DoubleIntegrator")
    dyn = dyn or DynamicsConfig(env)
    gen = rng.child(0).generator()
    worlds = [sample_scenario(env, n_agents, area, n_obstacles, r) for r in rng.child(1).split(scenarios)]
    ctrl = make_controller("gcbf+" if policy is not None else "nominal", dyn, policy)
    ro = simulate(dyn, worlds, ctrl, steps)
    snaps = [ro.world_at(s, t) for s in range(scenarios) for t in range(0, steps + 1)]
    dists, weights = [], []
    for a in range(0, len(snaps), 64):
        graphs = [build_graph(w) for w in snaps[a : a + 64]]
        batch = GraphBatch.from_graphs(graphs)
        rows, senders, w = all_attention(cert, batch)
        agent_row = np.full(batch.node_kind.size, -1)
        agent_row[batch.agent_nodes] = np.arange(batch.n_agents)
        sa = agent_row[senders]
        ok = sa >= 0
        pos = batch.agent_states[:, : env.pos_dim]
        dists.append(np.linalg.norm(pos[rows[ok]] - pos[sa[ok]], axis=1))
        weights.append(w[ok])
    failures = probes = 0
    R = worlds[0].R
    tries = 0
    while probes < n_samples and tries < 50 * n_samples:
        tries += 1
        w = snaps[int(gen.integers(len(snaps)))]
        i, j = (int(v) for v in gen.choice(w.n_agents, size=2, replace=False))
        pos = w.positions
        if np.linalg.norm(pos[i] - pos[j]) < R:
            continue
        X = w.states.copy()
        cand = gen.uniform(0.0, area, size=env.pos_dim)
        if np.linalg.norm(cand - pos[i]) < R:
            continue
        X[j, : env.pos_dim] = cand
        X[j, env.pos_dim :] += gen.normal(0.0, 0.5, size=env.state_dim - env.pos_dim)
        h0 = certificate_values(cert, build_graph(w)).data[i]
        h1 = certificate_values(cert, build_graph(w.with_states(X, 0))).data[i]
        probes += 1
        failures += int(h0 != h1)
    return AttentionAudit(np.concatenate(dists), np.concatenate(weights), probes, failures, R)


# ---------------------------------------------------------------------------
# sweeps


ALPHA_GRID = (1e-2, 1e-1, 1.0, 1e1, 1e2)
T_GRID = (4, 8, 16, 32, 64)


@dataclass
class SweepCell:
    alpha: float
    T: int
    metrics: Metrics

    def row(self) -> dict:
        return {"alpha": self.alpha, "T": self.T, **self.metrics.row()}


def sweep_sensitivity(base, rng: RngState, alphas=ALPHA_GRID, Ts=T_GRID, eval_steps: int = EPISODE_STEPS,
                      instances: int = DESK_INSTANCES, n_obstacles: int | None = None, cells=None, log=None) -> list[SweepCell]:
    """Train one policy per (alpha, T) cell from the same seed and evaluate it.

    ``cells`` restricts the grid to explicit (alpha, T) pairs.  Training uses
    ``base`` (a TrainConfig) with alpha and T replaced.
    """
    from .trainer import train  # local import keeps eval usable without the trainer

    out = []
    grid = cells if cells is not None else [(a, T) for a in alphas for T in Ts]
    n_obs = base.n_obstacles if n_obstacles is None else n_obstacles
    for a, T in grid:
        cfg = replace(base, alpha=float(a), T=int(T))
        res = train(cfg, rng)
        _, m = rollout_eval(cfg.env, "gcbf+", cfg.n_agents, cfg.area, n_obs, eval_steps, instances, rng.seed, res.state.policy,
                            world_constants={"R": cfg.R, "r": cfg.r, "n_rays": cfg.n_rays})
        cell = SweepCell(float(a), int(T), m)
        if log:
            log(cell)
        out.append(cell)
    return out


@dataclass
class ScalingRow:
    metrics: Metrics
    seconds: float
    mean_edges_per_agent: float


def scaling_experiment(spec: ExperimentSpec, policies: dict | None = None, dyn: DynamicsConfig | None = None, log=None) -> tuple[list[ScalingRow], int]:
    """Evaluate for every N of ``spec`` at fixed area; returns rows and the largest completed N.

    A MemoryError stops the series and is reported through the returned N.
    """
    rows = []
    largest = 0
    for N in spec.n_agents:
        t0 = time.perf_counter()
        try:
            sub = replace(spec, n_agents=[N], n_obstacles=spec.n_obstacles[:1])
            (m,) = run_experiment(sub, policies, dyn)
        except MemoryError:
            break
        secs = time.perf_counter() - t0
        ws = eval_worlds(spec.env, N, spec.area, spec.n_obstacles[0], 1, spec.seeds[0], **spec.world_constants)
        g = build_graph(ws[0])
        row = ScalingRow(m, secs, g.n_edges / N)
        rows.append(row)
        largest = N
        if log:
            log(row)
    return rows, largest
