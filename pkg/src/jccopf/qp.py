"""Small convex QP solver (primal-dual interior point, Mehrotra predictor-corrector).

Solves ``min 1/2 x'Qx + c'x  s.t.  Gx <= h,  lb <= x <= ub``. ``G`` may be a
``scipy.sparse`` matrix; the normal equations are then factored sparsely.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

OPTIMAL = "optimal"
INFEASIBLE = "infeasible"
ITERATION_LIMIT = "iteration-limit"

_DENSE_LIMIT = 400


class QpError(ValueError):
    """Malformed QP data."""


@dataclass
class QpProblem:
    Q: np.ndarray
    c: np.ndarray
    G: np.ndarray | sp.spmatrix | None = None
    h: np.ndarray | None = None
    lb: np.ndarray | None = None
    ub: np.ndarray | None = None

    def __post_init__(self) -> None:
        self.c = np.asarray(self.c, dtype=float).reshape(-1)
        n = self.c.size
        self.Q = np.asarray(self.Q, dtype=float) if not sp.issparse(self.Q) else self.Q.tocsr()
        if self.Q.shape != (n, n):
            raise QpError(f"Q has shape {self.Q.shape}, expected {(n, n)}")
        if self.G is None:
            self.G = np.zeros((0, n))
            self.h = np.zeros(0)
        elif not sp.issparse(self.G):
            self.G = np.atleast_2d(np.asarray(self.G, dtype=float))
        self.h = np.asarray(self.h, dtype=float).reshape(-1)
        if self.G.shape != (self.h.size, n):
            raise QpError(f"G has shape {self.G.shape}, expected {(self.h.size, n)}")
        self.lb = np.full(n, -np.inf) if self.lb is None else np.broadcast_to(np.asarray(self.lb, float), (n,)).copy()
        self.ub = np.full(n, np.inf) if self.ub is None else np.broadcast_to(np.asarray(self.ub, float), (n,)).copy()
        if np.any(self.lb > self.ub):
            raise QpError("lb must not exceed ub")
        if not sp.issparse(self.Q):
            if not np.allclose(self.Q, self.Q.T, atol=1e-12 * (1 + np.abs(self.Q).max(initial=0))):
                raise QpError("Q must be symmetric")
            if n and np.linalg.eigvalsh(self.Q).min() < -1e-9 * max(1.0, np.abs(self.Q).max()):
                raise QpError("Q must be positive semidefinite")

    @property
    def n(self) -> int:
        return self.c.size

    def objective(self, x: np.ndarray) -> float:
        return float(0.5 * x @ (self.Q @ x) + self.c @ x)


@dataclass
class QpDuals:
    ineq: np.ndarray
    lower: np.ndarray
    upper: np.ndarray


@dataclass
class QpResult:
    x: np.ndarray
    duals: QpDuals
    status: str
    iterations: int = 0
    objective: float = float("nan")
    residuals: dict[str, float] = field(default_factory=dict)

    def __iter__(self):
        return iter((self.x, self.duals, self.status))


def kkt_residuals(p: QpProblem, x: np.ndarray, duals: QpDuals) -> dict[str, float]:
    """Scaled infinity-norm KKT residuals of a primal-dual pair."""
    G, h = p.G, p.h
    lam, lo, up = duals.ineq, duals.lower, duals.upper
    grad = p.Q @ x + p.c + G.T @ lam + up - lo
    slack_g = h - G @ x
    lo_gap = np.where(np.isfinite(p.lb), x - p.lb, np.inf)
    up_gap = np.where(np.isfinite(p.ub), p.ub - x, np.inf)
    scale_d = 1.0 + max(np.abs(p.c).max(initial=0), _absmax(p.Q))
    scale_p = 1.0 + max(np.abs(h).max(initial=0), _finite_absmax(p.lb), _finite_absmax(p.ub))
    primal = max(
        (-slack_g).max(initial=0.0),
        (-lo_gap).max(initial=0.0),
        (-up_gap).max(initial=0.0),
        0.0,
    )
    dual = max((-lam).max(initial=0.0), (-lo).max(initial=0.0), (-up).max(initial=0.0), 0.0)
    comp = max(
        np.abs(lam * slack_g).max(initial=0.0),
        np.abs(lo * np.where(np.isfinite(lo_gap), lo_gap, 0.0)).max(initial=0.0),
        np.abs(up * np.where(np.isfinite(up_gap), up_gap, 0.0)).max(initial=0.0),
    )
    return {
        "stationarity": float(np.abs(grad).max(initial=0.0) / scale_d),
        "primal": float(primal / scale_p),
        "dual": float(dual / scale_d),
        "complementarity": float(comp / (scale_p * scale_d)),
    }


def _absmax(M) -> float:
    if sp.issparse(M):
        return float(abs(M).max()) if M.nnz else 0.0
    return float(np.abs(M).max(initial=0.0))


def _finite_absmax(v: np.ndarray) -> float:
    f = v[np.isfinite(v)]
    return float(np.abs(f).max(initial=0.0))


def solve_qp(p: QpProblem, tol: float = 1e-10, max_iter: int = 100) -> QpResult:
    """Solve a convex QP; never raises on infeasibility, reports it in ``status``."""
    n = p.n
    iu = np.flatnonzero(np.isfinite(p.ub))
    il = np.flatnonzero(np.isfinite(p.lb))
    m_g = p.h.size
    sparse = sp.issparse(p.G) or sp.issparse(p.Q) or n > _DENSE_LIMIT
    A = _stack(p.G, iu, il, n, sparse)
    b = np.concatenate([p.h, p.ub[iu], -p.lb[il]])
    m = b.size

    def unpack(lam: np.ndarray) -> QpDuals:
        lo = np.zeros(n)
        up = np.zeros(n)
        up[iu] = lam[m_g:m_g + iu.size]
        lo[il] = lam[m_g + iu.size:]
        return QpDuals(ineq=lam[:m_g].copy(), lower=lo, upper=up)

    if m == 0:
        x = _unconstrained(p)
        duals = unpack(np.zeros(0))
        res = kkt_residuals(p, x, duals)
        status = OPTIMAL if res["stationarity"] <= 1e-8 else ITERATION_LIMIT
        return QpResult(x, duals, status, 0, p.objective(x), res)

    x, lam, it, converged = _ipm(p.Q, p.c, A, b, tol, max_iter, sparse, _start(p))
    duals = unpack(lam)
    if converged:
        x, duals = _clean(p, x, duals)
        res = kkt_residuals(p, x, duals)
        polished = _polish(p, A, b, x, lam, unpack, sparse)
        if polished is not None:
            px, pd = polished
            pres = kkt_residuals(p, px, pd)
            if max(pres.values()) < max(res.values()):
                x, duals, res = px, pd, pres
        return QpResult(x, duals, OPTIMAL, it, p.objective(x), res)

    status = INFEASIBLE if _is_infeasible(A, b, n, sparse, tol) else ITERATION_LIMIT
    return QpResult(x, duals, status, it, p.objective(x), kkt_residuals(p, x, duals))


def _start(p: QpProblem) -> np.ndarray:
    lo = np.where(np.isfinite(p.lb), p.lb, np.minimum(0.0, p.ub - 1.0))
    hi = np.where(np.isfinite(p.ub), p.ub, np.maximum(0.0, p.lb + 1.0))
    return 0.5 * (lo + hi)


def _stack(G, iu, il, n, sparse):
    if sparse:
        eye = sp.identity(n, format="csr")
        return sp.vstack([sp.csr_matrix(G), eye[iu], -eye[il]], format="csr")
    eye = np.eye(n)
    return np.vstack([G, eye[iu], -eye[il]])


def _unconstrained(p: QpProblem) -> np.ndarray:
    Q = p.Q.toarray() if sp.issparse(p.Q) else p.Q
    x, *_ = np.linalg.lstsq(Q, -p.c, rcond=None)
    return x


def _ipm(Q, c, A, b, tol, max_iter, sparse, x0):
    m = b.size
    Qs = sp.csr_matrix(Q) if sparse else np.asarray(Q)
    x = x0.copy()
    s = np.maximum(b - A @ x, 1.0)
    lam = np.ones(m)
    qmax = _absmax(Q)
    scale_d = 1.0 + max(np.abs(c).max(initial=0.0), qmax)
    scale_p = 1.0 + np.abs(b).max(initial=0.0)
    reg = 1e-13 * (1.0 + qmax)

    best_rd = np.inf
    stall = 0
    for it in range(1, max_iter + 1):
        r_d = Qs @ x + c + A.T @ lam
        r_p = A @ x + s - b
        mu = s @ lam / m
        rd = np.abs(r_d).max() / scale_d
        primal_ok = np.abs(r_p).max() <= tol * scale_p and mu <= tol * scale_p * scale_d
        if primal_ok and rd <= tol:
            return x, lam, it, True
        # normal equations lose accuracy once lam/s is huge; accept a plateau below 1e-7
        stall = stall + 1 if rd >= 0.5 * best_rd else 0
        best_rd = min(best_rd, rd)
        if primal_ok and rd <= 1e-7 and stall >= 3:
            return x, lam, it, True
        if not np.all(np.isfinite(x)) or np.abs(x).max() > 1e14 or lam.max() > 1e14:
            break

        D = lam / s
        solve = _factor(Qs, A, D, reg, sparse)

        def direction(r_c):
            rhs = -r_d - A.T @ (D * r_p - r_c / s)
            dx = solve(rhs)
            dlam = D * (A @ dx + r_p) - r_c / s
            ds = -r_p - A @ dx
            return dx, ds, dlam

        dx, ds, dlam = direction(s * lam)
        a_aff = min(_max_step(s, ds), _max_step(lam, dlam))
        mu_aff = (s + a_aff * ds) @ (lam + a_aff * dlam) / m
        sigma = (mu_aff / mu) ** 3
        dx, ds, dlam = direction(s * lam + ds * dlam - sigma * mu)
        step = min(1.0, 0.995 * min(_max_step(s, ds), _max_step(lam, dlam)))
        x = x + step * dx
        s = s + step * ds
        lam = lam + step * dlam
        s = np.maximum(s, 1e-300)
        lam = np.maximum(lam, 1e-300)
    return x, lam, it, False


def _factor(Q, A, D, reg, sparse):
    if sparse:
        M = (Q + A.T @ sp.diags(D) @ A + reg * sp.identity(Q.shape[0])).tocsc()
        try:
            lu = spla.splu(M)
        except RuntimeError:
            M = M + 1e-10 * sp.identity(Q.shape[0], format="csc")
            lu = spla.splu(M)
        return lu.solve
    M = Q + (A.T * D) @ A
    M[np.diag_indices_from(M)] += reg
    try:
        L = np.linalg.cholesky(M)
    except np.linalg.LinAlgError:
        return lambda r: np.linalg.lstsq(M, r, rcond=None)[0]
    from scipy.linalg import cho_solve
    return lambda r: cho_solve((L, True), r)


def _max_step(v: np.ndarray, dv: np.ndarray) -> float:
    neg = dv < 0
    if not np.any(neg):
        return 1.0
    return float(min(1.0, np.min(-v[neg] / dv[neg])))


def _polish(p: QpProblem, A, b, x, lam, unpack, sparse):
    """Solve the KKT system on the identified active set."""
    n = p.n
    slack = b - A @ x
    act = np.flatnonzero(lam > np.maximum(slack, 1e-12))
    if act.size > 4 * _DENSE_LIMIT:
        return None
    Aa = A[act].toarray() if sparse else A[act]
    Q = p.Q.toarray() if sp.issparse(p.Q) else p.Q
    if n + act.size > 4 * _DENSE_LIMIT:
        return None
    K = np.block([[Q, Aa.T], [Aa, np.zeros((act.size, act.size))]])
    rhs = np.concatenate([-p.c, b[act]])
    try:
        sol = np.linalg.solve(K, rhs)
    except np.linalg.LinAlgError:
        return None
    if not np.all(np.isfinite(sol)):
        return None
    full = np.zeros(b.size)
    full[act] = sol[n:]
    if np.any(full < 0):
        return None
    px = sol[:n]
    return np.clip(px, p.lb, p.ub), unpack(full)


def _clean(p: QpProblem, x: np.ndarray, duals: QpDuals):
    x = np.clip(x, p.lb, p.ub)
    return x, QpDuals(np.maximum(duals.ineq, 0.0), np.maximum(duals.lower, 0.0), np.maximum(duals.upper, 0.0))


def _is_infeasible(A, b, n, sparse, tol) -> bool:
    """Phase-1 LP: min t s.t. Ax - t <= b, t >= 0."""
    m = b.size
    if sparse:
        A1 = sp.hstack([A, -sp.csr_matrix(np.ones((m, 1)))], format="csr")
        A1 = sp.vstack([A1, sp.csr_matrix(([-1.0], ([0], [n])), shape=(1, n + 1))], format="csr")
        Q1 = sp.csr_matrix((n + 1, n + 1))
    else:
        A1 = np.hstack([A, -np.ones((m, 1))])
        A1 = np.vstack([A1, np.eye(n + 1)[n:] * -1.0])
        Q1 = np.zeros((n + 1, n + 1))
    b1 = np.concatenate([b, [0.0]])
    c1 = np.zeros(n + 1)
    c1[n] = 1.0
    x0 = np.zeros(n + 1)
    x0[n] = max(1.0, float((-b).max(initial=0.0)) + 1.0)
    x, _, _, converged = _ipm(Q1, c1, A1, b1, 1e-9, 200, sparse, x0)
    return bool(x[n] > 1e-7 * (1.0 + np.abs(b).max(initial=0.0)))
