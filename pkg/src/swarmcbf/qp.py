"""Handcrafted pairwise barrier for the planar double integrator and
centralized/decentralized QP safety filters, with an embedded dense QP
solver (active set for small problems, operator splitting + polish for
the large joint problem).

Pair barrier between states x1, x2 (layout [px, py, vx, vy]):

    h = 2 dpx dvx + 2 dpy dvy + (dpx^2 + dpy^2 - 4 r^2)

whose time derivative is affine in the two accelerations:

    hdot = 2 |dv|^2 + 2 dp.dv + 2 dp.(a1 - a2)
"""
from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np


def pair_h(x1: np.ndarray, x2: np.ndarray, r: float) -> float:
    x1 = np.asarray(x1, dtype=np.float64)
    x2 = np.asarray(x2, dtype=np.float64)
    dp = x1[:2] - x2[:2]
    dv = x1[2:4] - x2[2:4]
    return float(2.0 * dp @ dv + dp @ dp - 4.0 * r * r)


def pair_hdot_coeffs(x1: np.ndarray, x2: np.ndarray) -> tuple[float, np.ndarray, np.ndarray]:
    """Affine split hdot = const + c1.a1 + c2.a2."""
    x1 = np.asarray(x1, dtype=np.float64)
    x2 = np.asarray(x2, dtype=np.float64)
    dp = x1[:2] - x2[:2]
    dv = x1[2:4] - x2[2:4]
    const = float(2.0 * dv @ dv + 2.0 * dp @ dv)
    return const, 2.0 * dp, -2.0 * dp


@dataclass
class QpProblem:
    """min sum w_i (u_i - center_i)^2  s.t.  A u >= b,  lb <= u <= ub."""
    center: np.ndarray
    A: np.ndarray
    b: np.ndarray
    lb: np.ndarray | None = None
    ub: np.ndarray | None = None
    weights: np.ndarray | None = None

    def full_rows(self) -> tuple[np.ndarray, np.ndarray]:
        """All inequalities in A u >= b form, bounds folded in."""
        n = self.center.shape[0]
        rows = [np.atleast_2d(self.A)] if self.A.size else []
        rhs = [np.atleast_1d(self.b)] if self.b.size else []
        eye = np.eye(n)
        if self.lb is not None:
            rows.append(eye)
            rhs.append(np.asarray(self.lb, dtype=np.float64))
        if self.ub is not None:
            rows.append(-eye)
            rhs.append(-np.asarray(self.ub, dtype=np.float64))
        if not rows:
            return np.zeros((0, n)), np.zeros(0)
        return np.concatenate(rows, axis=0), np.concatenate(rhs)

    def p_diag(self) -> np.ndarray:
        w = np.ones_like(self.center) if self.weights is None else self.weights
        return 2.0 * w


@dataclass
class QpResult:
    u: np.ndarray
    status: str                 # "optimal" | "infeasible"
    iterations: int
    kkt_residual: float
    lam: np.ndarray             # multipliers for the folded rows


def kkt_residual(problem: QpProblem, u: np.ndarray, lam: np.ndarray) -> float:
    """Max of stationarity, primal/dual feasibility, and complementarity."""
    A, b = problem.full_rows()
    p = problem.p_diag()
    c = p * problem.center
    stat = p * u - c - (A.T @ lam if A.size else 0.0)
    res = float(np.max(np.abs(stat))) if np.size(stat) else 0.0
    if A.size:
        slack = A @ u - b
        res = max(res, float(max(0.0, -slack.min())))
        res = max(res, float(max(0.0, -lam.min())))
        res = max(res, float(np.max(np.abs(lam * slack))))
    return res


def _solve_eqp(p: np.ndarray, c: np.ndarray, Aw: np.ndarray, bw: np.ndarray):
    """Equality-constrained subproblem; returns (u, lam, consistent)."""
    n = p.shape[0]
    k = Aw.shape[0]
    if k == 0:
        return c / p, np.zeros(0), True
    KKT = np.zeros((n + k, n + k))
    KKT[:n, :n] = np.diag(p)
    KKT[:n, n:] = -Aw.T
    KKT[n:, :n] = Aw
    rhs = np.concatenate([c, bw])
    try:
        sol = np.linalg.solve(KKT, rhs)
    except np.linalg.LinAlgError:
        sol, *_ = np.linalg.lstsq(KKT, rhs, rcond=None)
    u, lam = sol[:n], sol[n:]
    consistent = bool(np.max(np.abs(Aw @ u - bw)) < 1e-7 * (1.0 + np.max(np.abs(bw), initial=0.0)))
    return u, lam, consistent


def _solve_active_set(problem: QpProblem, tol: float, max_iter: int) -> QpResult:
    """Start at the unconstrained minimum; add the most violated row,
    dropping rows whose multipliers go negative."""
    A, b = problem.full_rows()
    p = problem.p_diag()
    c = p * problem.center
    u = problem.center.copy()
    m = A.shape[0]
    lam_full = np.zeros(m)
    active: list[int] = []
    feas_tol = tol * 10.0

    for it in range(1, max_iter + 1):
        viol = b - A @ u if m else np.zeros(0)
        if m == 0 or viol.max() <= feas_tol:
            lam_full[:] = 0.0
            for idx, j in enumerate(active):
                lam_full[j] = max(0.0, _last_lam[idx]) if active else 0.0
            res = kkt_residual(problem, u, lam_full)
            status = "optimal" if res <= max(tol, 1e-7) else "infeasible"
            return QpResult(u=u, status=status, iterations=it,
                            kkt_residual=res, lam=lam_full)
        j = int(np.argmax(viol))
        if j not in active:
            active.append(j)
        for _ in range(max_iter):
            u_new, lam_w, consistent = _solve_eqp(p, c, A[active], b[active])
            if not consistent:
                return QpResult(u=u, status="infeasible", iterations=it,
                                kkt_residual=np.inf, lam=lam_full)
            if lam_w.size == 0 or lam_w.min() >= -tol:
                u = u_new
                _last_lam = lam_w
                break
            active.pop(int(np.argmin(lam_w)))
        else:
            return QpResult(u=u, status="infeasible", iterations=it,
                            kkt_residual=np.inf, lam=lam_full)
    return QpResult(u=u, status="infeasible", iterations=max_iter,
                    kkt_residual=np.inf, lam=lam_full)


def _try_polish(problem: QpProblem, A, b, p, c, x, y, tol) -> QpResult | None:
    """Re-solve on the rows the splitting iterate marks active; accept only
    if the polished point passes the full KKT check."""
    lam = np.maximum(-y, 0.0)
    act = np.nonzero((lam > 1e-8) | (np.abs(A @ x - b) < 1e-6))[0]
    u_pol, lam_w, consistent = _solve_eqp(p, c, A[act], b[act])
    if not consistent:
        return None
    if lam_w.size and lam_w.min() < -tol:
        return None
    lam_pol = np.zeros(A.shape[0])
    lam_pol[act] = np.maximum(lam_w, 0.0)
    res_pol = kkt_residual(problem, u_pol, lam_pol)
    if res_pol <= max(tol, 1e-7):
        return QpResult(u=u_pol, status="optimal", iterations=0,
                        kkt_residual=res_pol, lam=lam_pol)
    return None


def _solve_admm(problem: QpProblem, tol: float, max_iter: int) -> QpResult:
    """Operator-splitting iterations with periodic active-set polish."""
    A, b = problem.full_rows()
    p = problem.p_diag()
    c = p * problem.center
    m = A.shape[0]
    if m == 0:
        return QpResult(u=problem.center.copy(), status="optimal", iterations=0,
                        kkt_residual=0.0, lam=np.zeros(0))
    rho, sigma = 10.0, 1e-6
    M = np.diag(p + sigma) + rho * (A.T @ A)
    Mf = np.linalg.cholesky(M)
    x = problem.center.copy()
    z = A @ x
    y = np.zeros(m)
    y_prev = y.copy()
    it = 0
    for it in range(1, max_iter + 1):
        rhs = sigma * x + c + A.T @ (rho * z - y)
        x = np.linalg.solve(Mf.T, np.linalg.solve(Mf, rhs))
        Ax = A @ x
        z = np.maximum(Ax + y / rho, b)      # one-sided: A u >= b
        y = y + rho * (Ax - z)
        if it % 25 == 0 or it == max_iter:
            polished = _try_polish(problem, A, b, p, c, x, y, tol)
            if polished is not None:
                polished.iterations = it
                return polished
            # primal infeasibility certificate: v >= 0 with A^T v ~ 0 and
            # b^T v > 0 built from the dual iterate drift
            v = -(y - y_prev)
            vn = np.linalg.norm(v, np.inf)
            if vn > 1e-12:
                if (np.linalg.norm(A.T @ v, np.inf) <= 1e-8 * vn
                        and b @ v > 1e-8 * vn):
                    return QpResult(u=x, status="infeasible", iterations=it,
                                    kkt_residual=np.inf, lam=np.maximum(-y, 0.0))
            y_prev = y.copy()
    lam = np.maximum(-y, 0.0)
    res = kkt_residual(problem, x, lam)
    status = "optimal" if res <= max(tol, 1e-6) else "infeasible"
    return QpResult(u=x, status=status, iterations=it, kkt_residual=res, lam=lam)


def solve_qp(problem: QpProblem, tol: float = 1e-8, max_iter: int = 10_000) -> QpResult:
    """Active-set first (few constraints ever activate in the safety
    filters); operator-splitting fallback for anything it cannot finish,
    which in practice means the large centralized joint problems."""
    m = problem.full_rows()[0].shape[0]
    out = _solve_active_set(problem, tol, min(max_iter, 3 * m + 50))
    if out.status != "optimal":
        out = _solve_admm(problem, tol, max_iter)
    return out


# --- safety filters -------------------------------------------------------

# Discrete-time settings for the handcrafted filters: small alpha reacts
# too slowly to fast pairs first sensed with a negative barrier value,
# large alpha approaches the boundary so closely that the 0.03 s stepping
# overshoots it; the margin keeps the constraint strictly inside the
# boundary to absorb the second-order stepping error.
FILTER_ALPHA_DEFAULT = 5.0
FILTER_MARGIN_DEFAULT = 0.05


@dataclass
class FilterResult:
    controls: np.ndarray          # (N, 2)
    solve_time: float             # seconds, assembly + solve (pair scan excluded)
    fallback: np.ndarray          # (N,) bool, agents served by the clamped nominal
    n_constraints: int
    degenerate_pairs: int = 0


def _check_simplecar(states: np.ndarray, nominals: np.ndarray):
    states = np.atleast_2d(np.asarray(states, dtype=np.float64))
    nominals = np.atleast_2d(np.asarray(nominals, dtype=np.float64))
    if states.shape[1] != 4 or nominals.shape[1] != 2:
        raise ValueError("filters support the planar double integrator only "
                         "(states (N,4), controls (N,2))")
    return states, nominals


def _pairs_within(states: np.ndarray, R: float) -> list[tuple[int, int]]:
    pos = states[:, :2]
    n = pos.shape[0]
    out = []
    for i in range(n):
        d = np.linalg.norm(pos[i + 1:] - pos[i], axis=1)
        for k in np.nonzero(d <= R)[0]:
            out.append((i, i + 1 + int(k)))
    return out


def _speed_cap_row(v: np.ndarray, speed_bound: float, dt: float):
    """Linearized speed limit: the along-velocity acceleration may not push
    the speed past the bound, i.e. vhat . a <= (u_M - |v|) / dt.

    Without this row the simulator's post-step speed clamp silently cancels
    "accelerate away" commands for agents already at the speed cap, and the
    realized pair derivative falls short of the QP's model.
    """
    s = np.linalg.norm(v)
    if s < 1e-9:
        return None
    return -v / s, -(speed_bound - s) / dt   # as a row of A u >= b


def centralized_filter(states: np.ndarray, nominals: np.ndarray, alpha: float,
                       r: float, R: float, control_bound: float = 10.0,
                       tol: float = 1e-8, margin: float = FILTER_MARGIN_DEFAULT,
                       speed_bound: float = 0.8, dt: float = 0.03
                       ) -> FilterResult:
    """One joint QP over all 2N accelerations with a row per pair within R:
    hdot + alpha h >= margin."""
    states, nominals = _check_simplecar(states, nominals)
    n = states.shape[0]
    pairs = _pairs_within(states, R)

    t0 = time.perf_counter()
    rows, rhs = [], []
    degenerate = 0
    involved: set[int] = set()
    for i, j in pairs:
        h = pair_h(states[i], states[j], r)
        const, ci, cj = pair_hdot_coeffs(states[i], states[j])
        if np.allclose(ci, 0.0):
            degenerate += 1     # coincident positions: row is vacuous, drop it
            continue
        row = np.zeros(2 * n)
        row[2 * i:2 * i + 2] = ci
        row[2 * j:2 * j + 2] = cj
        rows.append(row)
        rhs.append(margin - const - alpha * h)
        involved.update((i, j))
    for i in sorted(involved):
        cap = _speed_cap_row(states[i, 2:4], speed_bound, dt)
        if cap is not None:
            row = np.zeros(2 * n)
            row[2 * i:2 * i + 2] = cap[0]
            rows.append(row)
            rhs.append(cap[1])
    A = np.array(rows) if rows else np.zeros((0, 2 * n))
    b = np.array(rhs) if rhs else np.zeros(0)
    problem = QpProblem(center=nominals.ravel(), A=A, b=b,
                        lb=np.full(2 * n, -control_bound),
                        ub=np.full(2 * n, control_bound))
    out = solve_qp(problem, tol=tol)
    solve_time = time.perf_counter() - t0

    fallback = np.zeros(n, dtype=bool)
    if out.status == "optimal":
        controls = out.u.reshape(n, 2)
    else:
        controls = np.clip(nominals, -control_bound, control_bound)
        fallback[:] = True
    return FilterResult(controls=controls, solve_time=solve_time,
                        fallback=fallback, n_constraints=A.shape[0],
                        degenerate_pairs=degenerate)


def decentralized_filter(states: np.ndarray, nominals: np.ndarray, alpha: float,
                         r: float, R: float, control_bound: float = 10.0,
                         tol: float = 1e-8, margin: float = FILTER_MARGIN_DEFAULT,
                         speed_bound: float = 0.8, dt: float = 0.03
                         ) -> FilterResult:
    """Per-agent 2-variable QPs; neighbors assumed to apply their nominal."""
    states, nominals = _check_simplecar(states, nominals)
    n = states.shape[0]
    pos = states[:, :2]
    controls = np.zeros_like(nominals)
    fallback = np.zeros(n, dtype=bool)
    total_rows = 0
    degenerate = 0
    solve_time = 0.0
    for i in range(n):
        d = np.linalg.norm(pos - pos[i], axis=1)
        d[i] = np.inf
        nbrs = np.nonzero(d <= R)[0]
        t0 = time.perf_counter()
        rows, rhs = [], []
        for j in nbrs:
            h = pair_h(states[i], states[j], r)
            const, ci, cj = pair_hdot_coeffs(states[i], states[j])
            if np.allclose(ci, 0.0):
                degenerate += 1
                continue
            rows.append(ci)
            rhs.append(margin - const - alpha * h - cj @ nominals[j])
        cap = _speed_cap_row(states[i, 2:4], speed_bound, dt)
        if cap is not None and rows:
            rows.append(cap[0])
            rhs.append(cap[1])
        A = np.array(rows) if rows else np.zeros((0, 2))
        b = np.array(rhs) if rhs else np.zeros(0)
        problem = QpProblem(center=nominals[i], A=A, b=b,
                            lb=np.full(2, -control_bound),
                            ub=np.full(2, control_bound))
        out = solve_qp(problem, tol=tol)
        if out.status == "optimal":
            controls[i] = out.u
        else:
            controls[i] = np.clip(nominals[i], -control_bound, control_bound)
            fallback[i] = True
        solve_time += time.perf_counter() - t0
        total_rows += A.shape[0]
    return FilterResult(controls=controls, solve_time=solve_time,
                        fallback=fallback, n_constraints=total_rows,
                        degenerate_pairs=degenerate)
