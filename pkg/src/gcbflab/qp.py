"""Dense strictly convex QP: min 1/2 u'Hu + f'u  s.t.  A u >= b,  lo <= u <= hi.

Solved with the Goldfarb-Idnani dual active-set method: start from the
unconstrained minimizer, repeatedly add the most violated constraint and
drop active constraints whose multipliers would turn negative.  No feasible
starting point is needed and infeasibility is detected exactly.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

OPTIMAL, INFEASIBLE, ITERATION_LIMIT = "optimal", "infeasible", "iteration-limit"


@dataclass
class QpProblem:
    H: np.ndarray
    f: np.ndarray
    A: np.ndarray | None = None
    b: np.ndarray | None = None
    lo: np.ndarray | None = None
    hi: np.ndarray | None = None

    def __post_init__(self):
        self.H = np.atleast_2d(np.asarray(self.H, dtype=float))
        self.f = np.asarray(self.f, dtype=float).reshape(-1)
        n = self.f.size
        if self.H.shape != (n, n):
            raise ValueError(f"H has shape {self.H.shape}, expected {(n, n)}")
        if not np.allclose(self.H, self.H.T, atol=1e-12):
            raise ValueError("H must be symmetric")
        if self.A is None:
            self.A, self.b = np.zeros((0, n)), np.zeros(0)
        self.A = np.asarray(self.A, dtype=float).reshape(-1, n)
        self.b = np.asarray(self.b, dtype=float).reshape(-1)
        if self.b.size != self.A.shape[0]:
            raise ValueError("A and b disagree on the number of rows")
        self.lo = np.full(n, -np.inf) if self.lo is None else np.asarray(self.lo, dtype=float).reshape(-1)
        self.hi = np.full(n, np.inf) if self.hi is None else np.asarray(self.hi, dtype=float).reshape(-1)
        if self.lo.size != n or self.hi.size != n:
            raise ValueError("box limits have the wrong size")

    @property
    def dim(self) -> int:
        return self.f.size

    def stacked(self) -> tuple[np.ndarray, np.ndarray]:
        """All constraints as rows C u >= d (general rows first, then finite box sides)."""
        n = self.dim
        I = np.eye(n)
        lo_k = np.isfinite(self.lo)
        hi_k = np.isfinite(self.hi)
        C = np.vstack([self.A, I[lo_k], -I[hi_k]])
        d = np.concatenate([self.b, self.lo[lo_k], -self.hi[hi_k]])
        return C, d

    def objective(self, u) -> float:
        u = np.asarray(u, dtype=float)
        return float(0.5 * u @ self.H @ u + self.f @ u)


@dataclass
class QpSolution:
    u: np.ndarray
    status: str
    active: tuple[int, ...] = ()
    multipliers: np.ndarray = field(default_factory=lambda: np.zeros(0))
    residuals: dict = field(default_factory=dict)
    iterations: int = 0
    slack: np.ndarray | None = None

    @property
    def optimal(self) -> bool:
        return self.status == OPTIMAL

    @property
    def relaxed(self) -> bool:
        return self.slack is not None and bool(np.any(self.slack > 0))


def kkt_residuals(problem: QpProblem, u: np.ndarray, lam: np.ndarray) -> dict:
    C, d = problem.stacked()
    s = C @ u - d
    return {
        "stationarity": float(np.max(np.abs(problem.H @ u + problem.f - C.T @ lam), initial=0.0)),
        "primal": float(np.max(-s, initial=0.0)),
        "dual": float(np.max(-lam, initial=0.0)),
        "complementarity": float(np.max(np.abs(lam * s), initial=0.0)),
    }


def solve_qp(problem: QpProblem, max_iter: int | None = None, tol: float = 1e-12) -> QpSolution:
    n = problem.dim
    C, d = problem.stacked()
    m = C.shape[0]
    max_iter = 100 * max(n, 1) if max_iter is None else max_iter
    try:
        cho = scipy.linalg.cho_factor(problem.H)
    except np.linalg.LinAlgError as exc:
        raise ValueError("H must be positive definite") from exc

    def Ginv(v):
        return scipy.linalg.cho_solve(cho, v)

    x = Ginv(-problem.f)
    active: list[int] = []
    lam = np.zeros(0)
    norms = np.maximum(np.linalg.norm(C, axis=1), 1e-300)
    it = 0
    while True:
        s = C @ x - d
        if active:
            s[active] = np.inf
        viol = s / norms
        p = int(np.argmin(viol)) if m else -1
        if m == 0 or viol[p] >= -tol * max(1.0, abs(d[p]) / norms[p]):
            break
        lam_p = 0.0
        while True:
            it += 1
            if it > max_iter:
                return _finish(problem, x, active, lam, ITERATION_LIMIT, it)
            n_p = C[p]
            g_np = Ginv(n_p)
            if active:
                N = C[active].T
                GN = Ginv(N)
                M = N.T @ GN
                r = np.linalg.solve(M, N.T @ g_np)
                z = g_np - GN @ r
            else:
                r = np.zeros(0)
                z = g_np
            # partial step: largest dual step keeping active multipliers >= 0
            t1, k = np.inf, -1
            pos = r > 1e-14
            if np.any(pos):
                ratios = np.where(pos, lam / np.where(pos, r, 1.0), np.inf)
                k = int(np.argmin(ratios))
                t1 = float(ratios[k])
            zn = float(z @ n_p)
            t2 = np.inf if zn <= 1e-14 * max(1.0, n_p @ g_np) else -(n_p @ x - d[p]) / zn
            t = min(t1, t2)
            if not np.isfinite(t):
                return _finish(problem, x, active, lam, INFEASIBLE, it)
            if np.isfinite(t2):
                x = x + t * z
            lam = lam - t * r
            lam_p += t
            if t2 <= t1:
                active.append(p)
                lam = np.append(lam, lam_p)
                break
            active.pop(k)
            lam = np.delete(lam, k)
    return _finish(problem, x, active, lam, OPTIMAL, it)


def _finish(problem, x, active, lam, status, it) -> QpSolution:
    C, d = problem.stacked()
    full = np.zeros(C.shape[0])
    if status == OPTIMAL and active:
        # polish: solve the equality-constrained KKT system on the final active set
        n, q = problem.dim, len(active)
        N = C[active]
        K = np.block([[problem.H, -N.T], [N, np.zeros((q, q))]])
        try:
            sol = np.linalg.solve(K, np.concatenate([-problem.f, d[active]]))
            x_ref, lam_ref = sol[:n], sol[n:]
            if np.all(lam_ref >= -1e-12) and np.all(C @ x_ref - d >= -1e-10):
                x, lam = x_ref, np.maximum(lam_ref, 0.0)
        except np.linalg.LinAlgError:
            pass
    if active:
        full[active] = lam
    res = kkt_residuals(problem, x, full)
    return QpSolution(x, status, tuple(active), full, res, it)


def solve_relaxed(problem: QpProblem, penalty: float = 1e3, max_iter: int | None = None) -> QpSolution:
    """Solve exactly when feasible; otherwise add per-row slack s >= 0 costing ``penalty * s^2``.

    Box limits are never relaxed.  The returned solution carries the slack
    vector (all zeros when no relaxation was needed).
    """
    sol = solve_qp(problem, max_iter)
    k = problem.A.shape[0]
    if sol.status != INFEASIBLE:
        sol.slack = np.zeros(k)
        return sol
    n = problem.dim
    H = np.zeros((n + k, n + k))
    H[:n, :n] = problem.H
    H[n:, n:] = 2.0 * penalty * np.eye(k)
    A = np.hstack([problem.A, np.eye(k)])
    lo = np.concatenate([problem.lo, np.zeros(k)])
    hi = np.concatenate([problem.hi, np.full(k, np.inf)])
    big = QpProblem(H, np.concatenate([problem.f, np.zeros(k)]), A, problem.b, lo, hi)
    rs = solve_qp(big, max_iter)
    out = QpSolution(rs.u[:n], rs.status, rs.active, rs.multipliers, rs.residuals, rs.iterations)
    out.slack = np.maximum(rs.u[n:], 0.0)
    return out
