from __future__ import annotations

import numpy as np
import pytest
import scipy.sparse as sp

import oracles
from jccopf.qp import INFEASIBLE, OPTIMAL, QpError, QpProblem, kkt_residuals, solve_qp


def random_qp(rng, singular=False):
    n = int(rng.integers(1, 6))
    m = int(rng.integers(0, 5))
    A = rng.standard_normal((n, n))
    Q = A @ A.T
    if singular and n > 1:
        U = rng.standard_normal((n, n - 1))
        Q = U @ U.T
    else:
        Q += 0.1 * np.eye(n)
    c = rng.standard_normal(n) * 3
    G = rng.standard_normal((m, n))
    lb = -rng.uniform(0.5, 2, n)
    ub = rng.uniform(0.5, 2, n)
    x0 = rng.uniform(lb, ub)
    h = G @ x0 + rng.uniform(0, 1, m)
    return QpProblem(Q=Q, c=c, G=G, h=h, lb=lb, ub=ub)


def check_against_oracle(p, tol=1e-5):
    res = solve_qp(p)
    ref = oracles.qp_enumeration(p.Q, p.c, p.G, p.h, p.lb, p.ub)
    assert ref is not None
    assert res.status == OPTIMAL
    assert abs(res.objective - ref[1]) <= tol
    assert max(kkt_residuals(p, res.x, res.duals).values()) <= 1e-6


def test_scalar_with_lower_constraint():
    # min x^2 s.t. x >= 1 written as -x <= -1
    res = solve_qp(QpProblem(Q=[[2.0]], c=[0.0], G=[[-1.0]], h=[-1.0]))
    x, duals, status = res
    assert status == OPTIMAL
    assert abs(x[0] - 1.0) < 1e-8
    assert abs(duals.ineq[0] - 2.0) < 1e-7


def test_symmetric_box_example():
    p = QpProblem(Q=np.eye(2), c=np.zeros(2), G=[[-1.0, -1.0]], h=[-2.0], lb=0.0, ub=1.0)
    res = solve_qp(p)
    assert res.status == OPTIMAL
    np.testing.assert_allclose(res.x, [1.0, 1.0], atol=1e-8)


def test_unconstrained_minimum():
    res = solve_qp(QpProblem(Q=np.diag([2.0, 4.0]), c=[-2.0, -4.0]))
    np.testing.assert_allclose(res.x, [1.0, 1.0], atol=1e-10)


@pytest.mark.parametrize("seed", range(60))
def test_random_pd_against_enumeration(seed):
    check_against_oracle(random_qp(np.random.default_rng(seed)))


@pytest.mark.parametrize("seed", range(20))
def test_random_singular_against_enumeration(seed):
    check_against_oracle(random_qp(np.random.default_rng(1000 + seed), singular=True))


def test_infeasible_detected():
    p = QpProblem(Q=np.eye(2), c=np.zeros(2), G=[[1.0, 1.0]], h=[-3.0], lb=-1.0, ub=1.0)
    assert solve_qp(p).status == INFEASIBLE


def test_sparse_matches_dense():
    rng = np.random.default_rng(4)
    p = random_qp(rng)
    while p.n < 3 or p.h.size < 2:
        p = random_qp(rng)
    dense = solve_qp(p)
    sparse = solve_qp(QpProblem(Q=sp.csr_matrix(p.Q), c=p.c, G=sp.csr_matrix(p.G), h=p.h, lb=p.lb, ub=p.ub))
    np.testing.assert_allclose(sparse.x, dense.x, atol=1e-7)


@pytest.mark.parametrize("kwargs, match", [
    ({"Q": [[1.0, 2.0], [0.0, 1.0]], "c": [0.0, 0.0]}, "symmetric"),
    ({"Q": [[-1.0]], "c": [0.0]}, "semidefinite"),
    ({"Q": [[1.0]], "c": [0.0], "lb": 1.0, "ub": 0.0}, "lb"),
    ({"Q": [[1.0]], "c": [0.0, 1.0]}, "shape"),
])
def test_malformed(kwargs, match):
    with pytest.raises(QpError, match=match):
        QpProblem(**kwargs)
