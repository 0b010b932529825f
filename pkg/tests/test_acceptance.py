"""End-to-end acceptance criteria, one test each; results are summarised at the end of the run."""
import time

import numpy as np
import pytest

from gcbflab import autodiff as ad
from gcbflab.autodiff import gradient_check
from gcbflab.cbf import HocbfParams, centralized_rows, decentralized_rows, pair_rows
from gcbflab.dynamics import DynamicsConfig
from gcbflab.eval import METRIC_COLUMNS, check_assumption1, check_theorem1, distance_cbf_channels, rollout_eval, sweep_sensitivity
from gcbflab.gnn import certificate_values, init_certificate, init_policy, policy_residual
from gcbflab.io import jsonl_dumps, metrics_csv
from gcbflab.qp import OPTIMAL, QpProblem, kkt_residuals, solve_qp
from gcbflab.rng import RngState
from gcbflab.rollout import NominalController, simulate
from gcbflab.trainer import SAFE, UNLABELED, UNSAFE, TrainBatch, TrainConfig, collect_onpolicy, label_invariance, loss_terms, train
from gcbflab.world import Obstacles, World, sample_scenario

from oracles import dual_projected_gradient

pytestmark = pytest.mark.slow

DI = DynamicsConfig("DoubleIntegrator")


def _verdict(criteria, k, ok, detail):
    criteria[k] = (bool(ok), detail)
    assert ok, detail


# --- 1: gradient correctness ------------------------------------------------------------------


def _grad_case(seed):
    """A 4-agent batch near the goals (no control at a bound) with all hinges active (gamma = 2)."""
    gen = np.random.default_rng(seed)
    w = sample_scenario("DoubleIntegrator", 4, 1.0, 2, RngState(seed))
    X = w.states.copy()
    X[:, 2:] = gen.uniform(-0.1, 0.1, (4, 2))
    goals = X[:, :2] + gen.uniform(-0.05, 0.05, (4, 2))
    w = World(w.env, X, goals, w.obstacles, w.area, w.R, w.r, w.n_rays)
    cert = init_certificate(RngState(seed, stream=1), "DoubleIntegrator")
    pol = init_policy(RngState(seed, stream=2), "DoubleIntegrator")
    # the fresh output layer is zero; a small perturbation makes every policy layer carry gradient
    pol = pol.with_values([v + gen.normal(0, 0.02, v.shape) if k == "psi4.2.W" else v for k, v in pol.arrays.items()])
    tb = TrainBatch.build(DI, [w], gen.uniform(-0.5, 0.5, (4, 2)), [gen.choice([SAFE, UNSAFE, UNLABELED], 4)])
    return gen, cert, pol, tb


def test_criterion_01_gradient_correctness(criteria):
    t0 = time.perf_counter()
    cfg = TrainConfig(gamma=2.0)
    worst, checked, skipped, clamped = 0.0, 0, 0, 0
    for seed in range(20):
        gen, cert, pol, tb = _grad_case(seed)
        pre = policy_residual(None, tb.graph, p=pol.constants()).data + tb.u_nom
        clamped += int(np.any(np.abs(pre) >= 1.0))
        cases = []
        for net, params in (("cert", cert), ("policy", pol)):
            name = list(params.arrays)[int(gen.integers(len(params.arrays)))]

            def fn(x, net=net, params=params, name=name):
                p = params.constants()
                p[name] = x
                out = certificate_values(None, tb.graph, p=p) if net == "cert" else policy_residual(None, tb.graph, p=p)
                return ad.sum_(out)

            cases.append((fn, params.arrays[name]))
        for term, nets in (("deriv", ("cert", "policy")), ("safe", ("cert",)), ("unsafe", ("cert",)), ("ctrl", ("policy",))):
            for net in nets:
                params = cert if net == "cert" else pol
                name = list(params.arrays)[int(gen.integers(len(params.arrays)))]

                def fn(x, term=term, net=net, name=name):
                    cp, pp = cert.constants(), pol.constants()
                    (cp if net == "cert" else pp)[name] = x
                    return ad.sum_(loss_terms(cp, pp, tb, cfg, DI)[term])

                cases.append((fn, params.arrays[name]))
        for fn, p in cases:
            coords = [tuple(int(gen.integers(s)) for s in p.shape) for _ in range(3)]
            rep = gradient_check(fn, p, step=1e-6, tolerance=1e-5, coords=coords)
            worst = max(worst, rep.max_rel_error)
            checked += rep.n_checked
            skipped += len(rep.skipped)
    secs = time.perf_counter() - t0
    ok = worst < 1e-5 and clamped == 0 and skipped <= checked // 4 and secs < 120
    _verdict(criteria, 1, ok, f"max rel error {worst:.2e} over {checked} coordinates ({skipped} kinks skipped), {secs:.0f} s")


# --- 2: QP oracle equivalence ---------------------------------------------------------------------


def test_criterion_02_qp_oracle(criteria):
    t0 = time.perf_counter()
    gen = np.random.default_rng(12345)
    gap = kkt = 0.0
    for _ in range(100):
        n, k = int(gen.integers(1, 7)), int(gen.integers(0, 5))
        M = gen.normal(size=(n, n))
        H = M @ M.T + 0.1 * np.eye(n)
        A = gen.normal(size=(k, n))
        b = A @ gen.uniform(-0.5, 0.5, n) - gen.uniform(0, 1, k)
        prob = QpProblem(H, gen.normal(size=n), A, b, -np.ones(n), np.ones(n))
        sol = solve_qp(prob)
        assert sol.status == OPTIMAL
        kkt = max(kkt, max(kkt_residuals(prob, sol.u, sol.multipliers).values()))
        C, d = prob.stacked()
        ref = dual_projected_gradient(prob.H, prob.f, C, d)
        gap = max(gap, abs(prob.objective(sol.u) - prob.objective(ref)))
    secs = time.perf_counter() - t0
    _verdict(criteria, 2, gap < 1e-5 and kkt < 1e-8 and secs < 60, f"max objective gap {gap:.1e}, max KKT residual {kkt:.1e}, {secs:.0f} s")


# --- 3 and 5: single-integrator filters (shared with the determinism rerun) ------------------------


def _theorem_run():
    ro, m = rollout_eval("SingleIntegrator", "cbf1.0", 8, 4.0, 0, 4096, 8, 0)
    h, hdot, active = distance_cbf_channels(ro)
    rep = check_theorem1(ro, h, 1.0, hdot, active=active)
    files = {"metrics.csv": metrics_csv([m.row()], METRIC_COLUMNS), "audit.jsonl": jsonl_dumps([rep.summary()])}
    return rep, files


def _baseline_run():
    rows = [rollout_eval("SingleIntegrator", c, 8, 4.0, 0, 4096, 8, 0)[1] for c in ("cbf1.0", "deccbf0.1")]
    return rows, {"metrics.csv": metrics_csv([m.row() for m in rows], METRIC_COLUMNS)}


@pytest.fixture(scope="session")
def theorem_run():
    t0 = time.perf_counter()
    rep, files = _theorem_run()
    return rep, files, time.perf_counter() - t0


@pytest.fixture(scope="session")
def baseline_run():
    t0 = time.perf_counter()
    rows, files = _baseline_run()
    return rows, files, time.perf_counter() - t0


def test_criterion_03_theorem1_harness(criteria, theorem_run):
    rep, _, secs = theorem_run
    ok = rep.started_in_set and not rep.derivative_violations and not rep.h_negative and not rep.collisions and secs < 300
    _verdict(criteria, 3, ok, f"derivative violations {len(rep.derivative_violations)}, h<0 events {len(rep.h_negative)}, "
                              f"collisions {len(rep.collisions)} over 8 x 4096 steps, {secs:.0f} s")


# --- 4: constraint sharing identity ---------------------------------------------------------------


def test_criterion_04_constraint_sharing(criteria):
    gen = np.random.default_rng(4)
    envs = ("DoubleIntegrator", "DubinsCar", "LinearDrone")
    worst, states = 0.0, 0
    while states < 10_000:
        env = envs[states % 3]
        cfg = DynamicsConfig(env)
        w = sample_scenario(env, 2, 0.3, 0, RngState(int(gen.integers(2**31))))
        X = w.states.copy()
        X[:, w.env.pos_dim :] = gen.uniform(-1, 1, (2, w.env.state_dim - w.env.pos_dim))
        w = w.with_states(X)
        rows = pair_rows(cfg, w, HocbfParams(float(gen.choice([0.1, 1.0]))))
        if len(rows) == 0:
            continue
        m = w.env.action_dim
        A, b = centralized_rows(rows, 2, m)
        ci, bi = decentralized_rows(rows, 0)
        cj, bj = decentralized_rows(rows, 1)
        joint = np.concatenate([ci[0], cj[0]])
        worst = max(worst, np.abs(joint - A[0]).max(), abs(bi[0] + bj[0] - b[0]))
        states += 1
    _verdict(criteria, 4, worst <= 1e-12, f"max row mismatch {worst:.1e} over {states} random pair states")


def test_criterion_05_baseline_safety(criteria, baseline_run):
    rows, _, secs = baseline_run
    ok = all(m.safety == 1.0 for m in rows) and secs < 600
    _verdict(criteria, 5, ok, ", ".join(f"{m.controller} safety {m.safety}" for m in rows) + f", {secs:.0f} s")


# --- 6 and 7: end-to-end training -----------------------------------------------------------------


def _train_and_eval():
    res = train(TrainConfig(), RngState(0))
    _, m = rollout_eval("DoubleIntegrator", "gcbf+", 8, 4.0, 8, 4096, 8, 0, res.state.policy)
    return res.state, m, {"metrics.csv": metrics_csv([m.row()], METRIC_COLUMNS)}


@pytest.fixture(scope="session")
def trained():
    t0 = time.perf_counter()
    state, m, files = _train_and_eval()
    return state, m, files, time.perf_counter() - t0


def test_criterion_06_end_to_end_training(criteria, trained):
    state, m, _, secs = trained
    _, nominal = rollout_eval("DoubleIntegrator", "nominal", 8, 4.0, 8, 4096, 8, 0)
    ok = m.safety >= 0.95 and m.success >= 0.80 and secs <= 7200
    _verdict(criteria, 6, ok, f"after {state.opt_cert.step} Adam updates: safety {m.safety:.3f}, success {m.success:.3f} "
                              f"(nominal controller: safety {nominal.safety:.3f}, success {nominal.success:.3f}), {secs / 60:.0f} min")


def test_criterion_07_attention_decay(criteria, trained):
    state = trained[0]
    a = check_assumption1(state.cert, RngState(0), 1000, state.policy)
    far, near = a.band_mean(0.9, 1.0), a.band_mean(0.4, 0.5)
    ok = a.decays and a.locality_holds and a.probes == 1000
    _verdict(criteria, 7, ok, f"mean weight {far:.3f} on [0.9R, R) vs {near:.3f} on [0.4R, 0.5R); "
                              f"locality failures {a.locality_failures}/{a.probes}")


# --- 8: labeling ---------------------------------------------------------------------------------


def test_criterion_08_labeling(criteria):
    cfg = TrainConfig(n_scenarios=20, rollout_length=64)
    ctrl = NominalController(DI)
    ro = collect_onpolicy(cfg, DI, ctrl, RngState(8), extra=64)
    l8, l64 = label_invariance(ro, 8, ctrl, DI), label_invariance(ro, 64, ctrl, DI)
    n = l8.labels.size
    subset = not np.any(l64.safe & ~l8.safe)
    disjoint = not np.any(l8.safe & l8.unsafe) and not np.any(l64.safe & l64.unsafe)
    # stopping-distance example: speed 1 toward a wall 0.3 m ahead needs 0.5 m to stop
    wall = Obstacles(np.array([[1.45, 1.0]]), np.array([[0.1, 2.0]]))
    w = World("DoubleIntegrator", np.array([[1.0, 1.0, 1.0, 0.0]]), np.array([[0.0, 1.0]]), wall)

    class Brake(NominalController):
        def act(self, worlds, scans, graphs=None):
            u = np.zeros((len(worlds), 1, 2))
            u[..., 0] = -np.sign(np.stack([x.states[:, 2] for x in worlds]))
            return u

    def lab(T):
        r = simulate(DI, [w], Brake(DI), 1)
        r.meta["n_transitions"] = 1
        return int(label_invariance(r, T, Brake(DI), DI).labels[0, 0, 0])

    example = lab(32) == UNLABELED and lab(1) == SAFE
    ok = n >= 10_000 and subset and disjoint and example
    _verdict(criteria, 8, ok, f"{n} transitions: D_C(64) within D_C(8) {subset}, disjoint {disjoint}, "
                              f"|D_C(8)| {int(l8.safe.sum())}, |D_C(64)| {int(l64.safe.sum())}, |D_A| {int(l8.unsafe.sum())}; "
                              f"stopping example {'as specified' if example else 'misclassified'}")


# --- 9: sensitivity trend ---------------------------------------------------------------------------

SWEEP_STEPS = 128


def test_criterion_09_sensitivity_trend(criteria):
    t0 = time.perf_counter()
    cells = sweep_sensitivity(TrainConfig(total_steps=SWEEP_STEPS), RngState(0), cells=[(1.0, 4), (1.0, 32), (100.0, 4), (100.0, 32)])
    s = {(c.alpha, c.T): c.metrics.safety for c in cells}
    ok = s[1.0, 4] <= s[1.0, 32] and s[100.0, 32] <= s[1.0, 32]
    secs = time.perf_counter() - t0
    table = ", ".join(f"(alpha {a:g}, T {T}) {v:.3f}" for (a, T), v in s.items())
    _verdict(criteria, 9, ok and secs <= 6 * 3600, f"safety after {SWEEP_STEPS} steps per cell: {table}; {secs / 60:.0f} min")


# --- 10: determinism ------------------------------------------------------------------------------


def test_criterion_10_determinism(criteria, theorem_run, baseline_run, trained):
    same = {
        3: _theorem_run()[1] == theorem_run[1],
        5: _baseline_run()[1] == baseline_run[1],
        6: _train_and_eval()[2] == trained[2],
    }
    _verdict(criteria, 10, all(same.values()), ", ".join(f"criterion {k} metrics {'byte-identical' if v else 'DIFFER'}" for k, v in same.items()))
