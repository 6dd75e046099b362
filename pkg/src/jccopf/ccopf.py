"""Curtailment OPF with Gaussian single chance constraints.

Each kept constraint ``Pr(V_i <= v_max) >= 1 - eps_i`` becomes the linear row
``mu'_i(alpha) + z_i sigma'_i(alpha) <= 0`` with ``z_i`` the standard-normal
quantile at ``1 - eps_i`` and ``sigma'_i = sum_j R_ij (1 - alpha_j) sigma_j``.
That sum of weighted standard deviations bounds the exact one from above,
which keeps the problem a QP. ``exact_sigma=True`` instead enforces
``sqrt(r' Sigma r)`` through cutting planes.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from jccopf.feeder import FeederModel
from jccopf.qp import INFEASIBLE, OPTIMAL, QpProblem, solve_qp
from jccopf.uncertainty import ForecastModel, normal_quantile

DEFAULT_COST = 0.10
MODES = ("deterministic", "boole", "improved")
_MODE_ALIASES = {"det": "deterministic", "deterministic": "deterministic", "boole": "boole", "improved": "improved"}


def canonical_mode(mode: str) -> str:
    try:
        return _MODE_ALIASES[mode]
    except KeyError:
        raise ValueError(f"unknown mode {mode!r}; choose from det, boole, improved") from None


@dataclass
class CurtailmentPolicy:
    alpha: np.ndarray
    mode: str
    objective: float
    status: str
    eps_i: dict[int, float] = field(default_factory=dict)
    active: list[int] = field(default_factory=list)
    violating: list[int] = field(default_factory=list)
    t: int | None = None

    def to_dict(self) -> dict:
        return {
            "t": self.t,
            "mode": self.mode,
            "alpha": [float(a) for a in self.alpha],
            "objective": float(self.objective),
            "eps_i": {str(k): float(v) for k, v in self.eps_i.items()},
            "status": self.status,
            "active": list(self.active),
            "violating": list(self.violating),
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "CurtailmentPolicy":
        return cls(alpha=np.asarray(doc["alpha"], float), mode=doc["mode"], objective=float(doc["objective"]),
                   status=doc["status"], eps_i={int(k): float(v) for k, v in doc.get("eps_i", {}).items()},
                   active=list(doc.get("active", [])), violating=list(doc.get("violating", [])), t=doc.get("t"))


def _offset(model: FeederModel, forecast: ForecastModel, p_load, q_load, v_max: float) -> np.ndarray:
    """Mean voltage margin at zero curtailment, ``E[V] - v_max``."""
    return model.R @ (forecast.mu - np.asarray(p_load, float)) - model.B @ np.asarray(q_load, float) + model.a - v_max


def reformulate_cc(model: FeederModel, forecast: ForecastModel, p_load, q_load, v_max: float,
                   eps_i: float, node: int) -> tuple[np.ndarray, float]:
    """Linear row ``(g, h)`` with ``g @ alpha <= h`` equivalent to the surrogate chance constraint at ``node``."""
    if not 0 < eps_i <= 0.5:
        raise ValueError(f"eps_i must lie in (0, 0.5], got {eps_i}")
    i = int(node) - 1
    z = normal_quantile(1.0 - eps_i) if eps_i < 0.5 else 0.0
    Ri = model.R[i]
    g = -Ri * forecast.mu - z * Ri * forecast.std
    off = _offset(model, forecast, p_load, q_load, v_max)[i]
    h = -off - z * float(Ri @ forecast.std)
    return g, float(h)


def mean_row(model: FeederModel, forecast: ForecastModel, p_load, q_load, v_max: float, node: int):
    """Certainty-equivalent row: mean voltage at ``node`` stays below ``v_max``."""
    i = int(node) - 1
    return -model.R[i] * forecast.mu, float(-_offset(model, forecast, p_load, q_load, v_max)[i])


def exact_margin(model: FeederModel, forecast: ForecastModel, p_load, q_load, v_max: float, eps_i: float,
                 node: int, alpha: np.ndarray) -> tuple[float, np.ndarray]:
    """``mu'_i + z sqrt(r' Sigma r)`` and its gradient in alpha (feasible when <= 0)."""
    i = int(node) - 1
    z = normal_quantile(1.0 - eps_i) if eps_i < 0.5 else 0.0
    Ri = model.R[i]
    keep = 1.0 - alpha
    r = Ri * keep
    mean = float(_offset(model, forecast, p_load, q_load, v_max)[i] - Ri @ (alpha * forecast.mu))
    Sr = forecast.sigma @ r
    sd = float(np.sqrt(max(r @ Sr, 0.0)))
    grad = -Ri * forecast.mu
    if sd > 0:
        grad = grad - z * Ri * Sr / sd
    return mean + z * sd, grad


def solve_p1(model: FeederModel, forecast: ForecastModel, p_load, q_load, v_max: float, mode: str,
             allocation: Mapping[int, float] | None = None, cost: float | np.ndarray = DEFAULT_COST,
             nodes: Sequence[int] | None = None, pv_nodes: Sequence[int] | None = None,
             alpha_ub: np.ndarray | None = None, exact_sigma: bool = False,
             cut_tol: float = 1e-9, max_cuts: int = 200) -> CurtailmentPolicy:
    """Minimize ``sum d_i alpha_i^2`` subject to the mode's voltage constraints and ``0 <= alpha <= 1``.

    ``deterministic`` keeps the mean-voltage row for every node in ``nodes``;
    ``boole``/``improved`` keep one chance-constraint row per node in
    ``allocation``. Nodes without PV have alpha fixed at 0.
    """
    mode = canonical_mode(mode)
    n = model.n_nodes
    d = np.broadcast_to(np.asarray(cost, float), (n,)).copy()
    if pv_nodes is None:
        pv = np.flatnonzero((forecast.mu > 0) | (np.diag(forecast.sigma) > 0))
    else:
        pv = np.asarray(sorted(int(k) - 1 for k in pv_nodes), dtype=int)
    ub = np.ones(n) if alpha_ub is None else np.clip(np.asarray(alpha_ub, float), 0.0, 1.0)

    if mode == "deterministic":
        kept = list(range(1, n + 1)) if nodes is None else [int(k) for k in nodes]
        rows = [mean_row(model, forecast, p_load, q_load, v_max, k) for k in kept]
        eps_i: dict[int, float] = {}
    else:
        if allocation is None:
            raise ValueError(f"mode {mode!r} needs an epsilon allocation")
        eps_i = {int(k): float(v) for k, v in allocation.items()}
        kept = sorted(eps_i)
        if exact_sigma:
            rows = [mean_row(model, forecast, p_load, q_load, v_max, k) for k in kept]
        else:
            rows = [reformulate_cc(model, forecast, p_load, q_load, v_max, eps_i[k], k) for k in kept]

    alpha = np.zeros(n)
    if not kept:
        return CurtailmentPolicy(alpha, mode, 0.0, OPTIMAL, eps_i, kept)

    G = np.array([g for g, _ in rows])
    h = np.array([hh for _, hh in rows])
    sub_ub = ub[pv]
    # rows must hold at the largest admissible curtailment, else no alpha can help
    at_max = np.zeros(n)
    at_max[pv] = sub_ub
    viol = [k for k, g, hh in zip(kept, G, h) if g @ at_max > hh + 1e-12]
    if exact_sigma:
        viol = [k for k in kept
                if exact_margin(model, forecast, p_load, q_load, v_max, eps_i[k], k, at_max)[0] > 1e-12]
    if viol:
        return CurtailmentPolicy(at_max, mode, float(d @ at_max ** 2), INFEASIBLE, eps_i, kept, viol)
    if pv.size == 0:
        return CurtailmentPolicy(alpha, mode, 0.0, OPTIMAL, eps_i, kept)

    Q = np.diag(2.0 * d[pv])
    Gs = G[:, pv]
    res = solve_qp(QpProblem(Q=Q, c=np.zeros(pv.size), G=Gs, h=h, lb=np.zeros(pv.size), ub=sub_ub))
    if exact_sigma and res.status == OPTIMAL:
        res = _cutting_planes(model, forecast, p_load, q_load, v_max, eps_i, kept, pv, Q, Gs, h, sub_ub,
                              res, cut_tol, max_cuts)
    alpha[pv] = res.x
    alpha = np.clip(alpha, 0.0, 1.0)
    return CurtailmentPolicy(alpha, mode, float(d @ alpha ** 2), res.status, eps_i, kept,
                             [] if res.status == OPTIMAL else list(kept))


def _cutting_planes(model, forecast, p_load, q_load, v_max, eps_i, kept, pv, Q, G, h, ub, res, tol, max_cuts):
    n = model.n_nodes
    G = G.copy()
    h = h.copy()
    for _ in range(max_cuts):
        alpha = np.zeros(n)
        alpha[pv] = res.x
        worst = 0.0
        cuts = []
        for k in kept:
            f, grad = exact_margin(model, forecast, p_load, q_load, v_max, eps_i[k], k, alpha)
            if f > tol:
                worst = max(worst, f)
                cuts.append((grad[pv], float(grad[pv] @ res.x - f)))
        if not cuts:
            return res
        G = np.vstack([G] + [c[0][None, :] for c in cuts])
        h = np.concatenate([h, [c[1] for c in cuts]])
        res = solve_qp(QpProblem(Q=Q, c=np.zeros(pv.size), G=G, h=h, lb=np.zeros(pv.size), ub=ub))
        if res.status != OPTIMAL:
            return res
    return res


def save_policies(policies: Sequence[CurtailmentPolicy], path: str | Path) -> None:
    Path(path).write_text(json.dumps([p.to_dict() for p in policies], indent=1))


def load_policies(path: str | Path) -> list[CurtailmentPolicy]:
    doc = json.loads(Path(path).read_text())
    if isinstance(doc, dict):
        doc = [doc]
    return [CurtailmentPolicy.from_dict(d) for d in doc]
