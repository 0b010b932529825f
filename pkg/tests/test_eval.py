from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gcbflab.dynamics import DynamicsConfig
from gcbflab.eval import (
    DESK_INSTANCES,
    FULL_INSTANCES,
    ExperimentSpec,
    Metrics,
    agent_outcomes,
    check_assumption1,
    check_theorem1,
    collision_events,
    distance_cbf_channels,
    lemma1_scalar,
    metrics_from,
    rollout_eval,
    run_experiment,
    scaling_experiment,
    sweep_sensitivity,
)
from gcbflab.gnn import init_certificate, init_policy
from gcbflab.rng import RngState
from gcbflab.rollout import NominalController, simulate
from gcbflab.trainer import TrainConfig, train
from gcbflab.world import Obstacles, World

SI = DynamicsConfig("SingleIntegrator")
DI = DynamicsConfig("DoubleIntegrator")


def _world(states, goals, env="DoubleIntegrator"):
    return World(env, np.array(states, dtype=float), np.array(goals, dtype=float), Obstacles.empty(2))


# --- metrics -------------------------------------------------------------------------------


def test_single_agent_nominal_is_safe_and_reaches():
    w = _world([[1.0, 1.0, 0, 0]], [[3.0, 2.5]])
    ro, m = rollout_eval("DoubleIntegrator", "nominal", 1, 4.0, steps=1024, worlds=[w])
    assert (m.safety, m.reach, m.success) == (1.0, 1.0, 1.0)


def test_forced_overlap_counts_both_agents_unsafe():
    w = _world([[1.0, 1.0, 0, 0], [1.05, 1.0, 0, 0], [3.0, 3.0, 0, 0], [3.0, 1.0, 0, 0]],
               [[1.0, 1.0], [1.05, 1.0], [3.0, 3.0], [3.0, 1.0]])
    ro, m = rollout_eval("DoubleIntegrator", "nominal", 4, 4.0, steps=8, worlds=[w])
    safe, reach, succ = agent_outcomes(ro, w.r)
    assert safe[0].tolist() == [False, False, True, True]
    assert m.safety == 0.5 and m.reach == 1.0 and m.success == 0.5


def test_rates_average_agents_then_instances():
    safe = np.array([[True, False], [True, True]])
    reach = np.array([[True, True], [False, True]])
    m = metrics_from([(safe, reach, safe & reach)], env="DoubleIntegrator", controller="x", n_agents=2, area=1.0,
                     n_obstacles=0, seeds=(0,), instances=2, steps=1)
    assert (m.safety, m.reach, m.success) == (0.75, 0.75, 0.5)
    assert m.safety_std == 0.25


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 6), st.integers(1, 6), st.integers(0, 2**32 - 1))
def test_success_never_exceeds_safety_or_reach(S, N, seed):
    gen = np.random.default_rng(seed)
    outs = []
    for _ in range(2):
        safe, reach = gen.random((S, N)) < 0.6, gen.random((S, N)) < 0.6
        outs.append((safe, reach, safe & reach))
    m = metrics_from(outs, env="DoubleIntegrator", controller="x", n_agents=N, area=1.0, n_obstacles=0, seeds=(0, 1),
                     instances=2 * S, steps=1)
    assert m.success <= min(m.safety, m.reach)
    for safe, reach, succ in outs:
        assert np.all(succ.mean(1) <= np.minimum(safe.mean(1), reach.mean(1)))


def test_density_is_n_over_area_power():
    m = Metrics("DoubleIntegrator", "nominal", 64, 4.0, 0, (0,), 8, 10, 1, 1, 1)
    assert m.density == 4.0 and m.row()["density"] == 4.0
    m3 = replace(m, env="LinearDrone", area=2.0)
    assert m3.density == 8.0


def test_experiment_spec_defaults_and_validation():
    assert ExperimentSpec().instances == DESK_INSTANCES
    assert ExperimentSpec(full_scale=True).instances == FULL_INSTANCES
    assert ExperimentSpec(n_agents=[8, 256, 512, 1024]).n_agents == [8, 256]
    assert ExperimentSpec(n_agents=[8, 1024], full_scale=True).n_agents == [8, 1024]
    with pytest.raises(ValueError):
        ExperimentSpec(steps=0)
    with pytest.raises(ValueError):
        ExperimentSpec(n_agents=[0])


def test_metrics_deterministic_and_controller_agnostic():
    a = rollout_eval("SingleIntegrator", "deccbf0.1", 4, 1.5, 0, steps=64, instances=2, seed=3)[1]
    b = rollout_eval("SingleIntegrator", "deccbf0.1", 4, 1.5, 0, steps=64, instances=2, seed=3)[1]
    assert a.row() == b.row()
    # a learned controller runs through the same path
    pol = init_policy(RngState(0), "SingleIntegrator")
    c = rollout_eval("SingleIntegrator", "gcbf+", 4, 1.5, 0, steps=64, instances=2, seed=3, policy=pol)[1]
    d = rollout_eval("SingleIntegrator", "nominal", 4, 1.5, 0, steps=64, instances=2, seed=3)[1]
    assert (c.safety, c.reach, c.success) == (d.safety, d.reach, d.success)  # fresh policy adds zero residual


def test_gcbf_without_policy_rejected():
    with pytest.raises(ValueError):
        rollout_eval("DoubleIntegrator", "gcbf+", 2, 2.0, steps=1)


# --- Theorem-1 audit -------------------------------------------------------------------------


def test_collision_report_lists_first_step_and_pair():
    # agents 1 and 2 approach head-on at unit speed each
    w = _world([[0.0, 0.0], [1.0, 1.0], [1.0 + 2 * 0.05 + 2 * 0.3 + 1e-3, 1.0]], [[0.0, 0.0], [5.0, 1.0], [-5.0, 1.0]], "SingleIntegrator")

    class Push(NominalController):
        def act(self, worlds, scans, graphs=None):
            return np.array([[[0.0, 0.0], [1.0, 0.0], [-1.0, 0.0]]] * len(worlds))

    ro = simulate(SI, [w], Push(SI), 20)
    first = collision_events(ro)[0]
    # gap 0.6 + 1e-3 closes at 0.06 per step, so it reaches zero during step 11
    assert first == (0, 11, 1, 2)
    h, hdot, active = distance_cbf_channels(ro)
    rep = check_theorem1(ro, h, 1.0, hdot, active=active)
    assert rep.first_collision == first
    assert rep.derivative_violations and rep.theorem_consistent


def test_audit_flags_residual_and_negative_h():
    class _Ro:
        n_steps = 3
        meta = {"dt": 0.5}
        safe = np.ones((1, 4, 1), dtype=bool)
        states = np.zeros((1, 4, 1, 2))
        worlds = [_world([[0.0, 0.0]], [[0.0, 0.0]], "SingleIntegrator")]

    h = np.array([[[1.0], [0.2], [0.1], [0.02]]])
    rep = check_theorem1(_Ro(), h, alpha=1.0)
    # forward differences: -1.6, -0.2, -0.16; residuals -0.6, 0.0, -0.06
    assert [(t, round(r, 12)) for _, t, _, r in rep.derivative_violations] == [(0, -0.6), (2, -0.06)]
    assert rep.h_negative == [] and rep.started_in_set
    h2 = np.array([[[1.0], [0.9], [-0.1], [0.0]]])
    rep2 = check_theorem1(_Ro(), h2, alpha=1.0)
    assert rep2.h_negative == [(0, 2, 0, -0.1)]
    assert rep2.derivative_violations  # the drop into h < 0 necessarily violates the derivative condition


def test_theorem_consistency_logic():
    class _Ro:
        n_steps = 1
        meta = {"dt": 1.0}
        safe = np.ones((1, 2, 1), dtype=bool)
        states = np.zeros((1, 2, 1, 2))
        worlds = [_world([[0.0, 0.0]], [[0.0, 0.0]], "SingleIntegrator")]

    # an h that decays too slowly from a negative start is out of the theorem's premise
    rep = check_theorem1(_Ro(), np.array([[[-1.0], [-0.5]]]), 1.0)
    assert not rep.started_in_set and rep.theorem_consistent
    # a supplied hdot that satisfies the condition but a negative h afterwards contradicts the theorem
    rep = check_theorem1(_Ro(), np.array([[[1.0], [-0.5]]]), 1.0, hdot=np.array([[[0.0]]]))
    assert not rep.derivative_violations and not rep.theorem_consistent


def test_missing_dt_rejected():
    class _Ro:
        meta = {}

    with pytest.raises(ValueError):
        check_theorem1(_Ro(), np.zeros((1, 2, 1)), 1.0)


def test_distance_channels_exact_derivative():
    w = _world([[1.0, 1.0], [1.3, 1.1], [3.0, 3.0]], [[2.0, 2.0], [0.5, 0.5], [3.5, 3.0]], "SingleIntegrator")
    ro = simulate(SI, [w], NominalController(SI), 5)
    h, hdot, active = distance_cbf_channels(ro)
    assert h.shape == (1, 6, 3) and hdot.shape == (1, 5, 3)
    dp = ro.states[0, 0, 0] - ro.states[0, 0, 1]
    assert h[0, 0, 0] == pytest.approx(dp @ dp - 0.01, abs=1e-15)
    du = ro.actions[0, 0, 0] - ro.actions[0, 0, 1]
    assert hdot[0, 0, 0] == pytest.approx(2 * dp @ du, abs=1e-15)
    # the exact derivative and the forward difference agree up to the dt * |du|^2 curvature term
    fd = (h[0, 1, 0] - h[0, 0, 0]) / SI.dt
    assert fd - hdot[0, 0, 0] == pytest.approx(SI.dt * du @ du, abs=1e-12)
    assert active[0, 0].tolist() == [True, False, False]


def test_centralized_filter_keeps_si_pairs_apart():
    ro, m = rollout_eval("SingleIntegrator", "cbf1.0", 4, 1.0, 0, steps=256, instances=2, seed=1)
    h, hdot, active = distance_cbf_channels(ro)
    rep = check_theorem1(ro, h, 1.0, hdot, active=active)
    assert rep.started_in_set and not rep.derivative_violations
    assert not rep.h_negative and not rep.collisions and m.safety == 1.0


def test_lemma1_scalar_positive():
    t = np.linspace(0, 50, 1001)
    v = lemma1_scalar(1.0, 1.0, t)
    assert np.all(v > 0) and v[0] == 1.0
    assert np.allclose(np.diff(np.log(v)) / np.diff(t), -1.0)


# --- Assumption-1 audit ----------------------------------------------------------------------


def test_assumption1_audit_on_fresh_certificate():
    cert = init_certificate(RngState(0), "DoubleIntegrator")
    a = check_assumption1(cert, RngState(1), n_samples=40, n_agents=6, area=1.5, n_obstacles=2, steps=4, scenarios=2)
    assert a.probes == 40 and a.locality_holds
    assert np.all((a.weights >= 0) & (a.weights <= 1))
    assert np.all(a.distances < a.R)
    assert sum(a.band_count(lo / 10, (lo + 1) / 10) for lo in range(10)) == a.distances.size


def test_attention_band_helpers():
    from gcbflab.eval import AttentionAudit

    a = AttentionAudit(np.array([0.46, 0.22, 0.24, 0.01]), np.array([0.1, 0.8, 0.6, 1.0]), 5, 0, 0.5)
    assert a.band_mean(0.9, 1.0) == pytest.approx(0.1)
    assert a.band_mean(0.4, 0.5) == pytest.approx(0.7)
    assert a.band_count(0.4, 0.5) == 2 and a.decays and a.locality_holds
    assert np.isnan(a.band_mean(0.6, 0.7))
    assert not AttentionAudit(np.array([0.46]), np.array([0.1]), 5, 0, 0.5).decays  # empty near band
    assert not AttentionAudit(np.array([]), np.array([]), 5, 1, 0.5).locality_holds


# --- sweeps and scaling ------------------------------------------------------------------------

TINY = TrainConfig(n_agents=3, n_obstacles=1, area=1.5, n_scenarios=1, rollout_length=4, batch_size=4, collect_every=2, total_steps=2)


def test_sweep_default_cell_matches_direct_run():
    (cell,) = sweep_sensitivity(TINY, RngState(0), cells=[(1.0, 32)], eval_steps=16, instances=1)
    res = train(TINY, RngState(0))
    _, m = rollout_eval(TINY.env, "gcbf+", 3, 1.5, 1, 16, 1, 0, res.state.policy)
    assert cell.metrics.row() == m.row()
    assert cell.row()["alpha"] == 1.0 and cell.row()["T"] == 32


def test_sweep_grid_order():
    seen = []
    cells = sweep_sensitivity(TINY, RngState(0), alphas=(1.0, 100.0), Ts=(4,), eval_steps=2, instances=1, log=seen.append)
    assert [(c.alpha, c.T) for c in cells] == [(1.0, 4), (100.0, 4)] and seen == cells


def test_scaling_first_row_matches_rollout_eval():
    spec = ExperimentSpec(env="SingleIntegrator", controller="nominal", n_agents=[4, 8], area=2.0, steps=16, instances=2)
    rows, largest = scaling_experiment(spec)
    _, m = rollout_eval("SingleIntegrator", "nominal", 4, 2.0, 0, 16, 2, 0)
    assert rows[0].metrics.row() == m.row() and largest == 8
    assert rows[1].metrics.density == 2.0 and rows[1].mean_edges_per_agent >= 1.0


def test_scaling_reports_largest_completed_n(monkeypatch):
    import gcbflab.eval as ev

    real = ev.run_experiment

    def limited(spec, *a, **k):
        if spec.n_agents[0] > 4:
            raise MemoryError
        return real(spec, *a, **k)

    monkeypatch.setattr(ev, "run_experiment", limited)
    spec = ExperimentSpec(env="SingleIntegrator", controller="nominal", n_agents=[2, 4, 8, 16], area=2.0, steps=4, instances=1)
    rows, largest = scaling_experiment(spec)
    assert largest == 4 and len(rows) == 2


def test_run_experiment_pools_seeds():
    spec = ExperimentSpec(env="SingleIntegrator", controller="nominal", n_agents=[3], area=2.0, steps=8, instances=2, seeds=[0, 1])
    (m,) = run_experiment(spec)
    assert m.instances == 4 and m.seeds == (0, 1)
