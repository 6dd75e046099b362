"""Learning which voltage constraints can be dropped.

Each constraint gets a weighted soft-margin affine classifier over the
features ``(load, available solar)`` at its node. Labels follow the training
problem: ``-1`` for active (overvoltage observed), ``+1`` for inactive. Slack
on active points is penalized ``weight_a`` times more than on inactive ones, so
the boundary leans toward keeping constraints.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import scipy.sparse as sp
from sklearn.base import BaseEstimator, ClassifierMixin, clone
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from jccopf.feeder import FeederModel, voltages_batch
from jccopf.qp import OPTIMAL, QpProblem, solve_qp

ACTIVE = -1
INACTIVE = 1


@dataclass(frozen=True)
class TrainingSet:
    features: np.ndarray
    labels: np.ndarray
    node: int

    @property
    def m(self) -> int:
        return self.labels.size


@dataclass(frozen=True)
class NodeClassifier:
    w: np.ndarray
    b: float
    weight_a: float
    node: int
    degenerate: bool = False

    def decision(self, phi) -> np.ndarray | float:
        return np.asarray(phi, dtype=float) @ self.w + self.b

    def to_dict(self) -> dict:
        return {"node": self.node, "w": [float(v) for v in self.w], "b": float(self.b),
                "weight_a": float(self.weight_a)}

    @classmethod
    def from_dict(cls, doc: dict) -> "NodeClassifier":
        return cls(w=np.asarray(doc["w"], dtype=float), b=float(doc["b"]),
                   weight_a=float(doc["weight_a"]), node=int(doc["node"]),
                   degenerate=bool(doc.get("degenerate", False)))


def classify(c: NodeClassifier, phi) -> str:
    """``"active"`` when the decision value is <= 0 (the active side of the margin); ties are active."""
    return "active" if c.decision(phi) <= 0 else "inactive"


class WeightedSVC(ClassifierMixin, BaseEstimator):
    """Linear soft-margin classifier with class-asymmetric slack penalties.

    Parameters
    ----------
    weight_a : float
        Slack penalty on active (label ``-1``) samples; inactive samples use 1.
    bias_shift : float
        Subtracted from the fitted bias, enlarging the region flagged active.
    feature_scale : float
        Features are multiplied by this before training. The stored
        coefficients act on unscaled features.
    """

    def __init__(self, weight_a: float = 10.0, bias_shift: float = 0.0, feature_scale: float = 1.0):
        self.weight_a = weight_a
        self.bias_shift = bias_shift
        self.feature_scale = feature_scale

    def fit(self, X, y):
        X, y = check_X_y(X, y)
        if self.weight_a < 1:
            raise ValueError("weight_a must be >= 1")
        labels = np.where(np.asarray(y) < 0, ACTIVE, INACTIVE)
        if set(np.unique(y)) - {-1, 1}:
            raise ValueError("labels must be -1 (active) or +1 (inactive)")
        self.classes_ = np.array([ACTIVE, INACTIVE])
        self.n_features_in_ = X.shape[1]
        present = np.unique(labels)
        if present.size < 2:
            # all-active only if nothing but active labels were seen
            self.coef_ = np.zeros(X.shape[1])
            self.intercept_ = -1.0 if present[0] == ACTIVE else 1.0
            self.slack_ = np.zeros(labels.size)
            self.degenerate_ = True
            self.status_ = OPTIMAL
            self.objective_ = 0.0
            return self
        w, b, z, status, obj = _solve_primal(X * self.feature_scale, labels, self.weight_a)
        self.coef_ = w * self.feature_scale
        self.intercept_ = b - self.bias_shift
        self.slack_ = z
        self.degenerate_ = False
        self.status_ = status
        self.objective_ = obj
        return self

    def decision_function(self, X):
        check_is_fitted(self, "coef_")
        X = check_array(X)
        return X @ self.coef_ + self.intercept_

    def predict(self, X):
        return np.where(self.decision_function(X) <= 0, ACTIVE, INACTIVE)

    def to_node_classifier(self, node: int) -> NodeClassifier:
        check_is_fitted(self, "coef_")
        return NodeClassifier(w=self.coef_.copy(), b=float(self.intercept_), weight_a=float(self.weight_a),
                              node=int(node), degenerate=bool(self.degenerate_))


def _solve_primal(X: np.ndarray, labels: np.ndarray, weight_a: float):
    """min 1/2|w|^2 + c'z  s.t.  l_i (w'x_i + b) >= 1 - z_i,  z >= 0."""
    m, d = X.shape
    Q = sp.diags(np.concatenate([np.ones(d), np.zeros(1 + m)]), format="csr")
    cost = np.where(labels == ACTIVE, weight_a, 1.0)
    c = np.concatenate([np.zeros(d + 1), cost])
    lx = labels[:, None] * X
    G = sp.hstack([sp.csr_matrix(-lx), sp.csr_matrix(-labels[:, None].astype(float)), -sp.identity(m)],
                  format="csr")
    h = -np.ones(m)
    lb = np.concatenate([np.full(d + 1, -np.inf), np.zeros(m)])
    res = solve_qp(QpProblem(Q=Q, c=c, G=G, h=h, lb=lb))
    x = res.x
    return x[:d], float(x[d]), x[d + 1:], res.status, res.objective


def train_wsvc(data: TrainingSet, weight_a: float = 10.0, bias_shift: float = 0.0,
               feature_scale: float = 1.0) -> NodeClassifier:
    est = WeightedSVC(weight_a=weight_a, bias_shift=bias_shift, feature_scale=feature_scale)
    est.fit(data.features, data.labels)
    return est.to_node_classifier(data.node)


def generate_labels(model: FeederModel, p_av: np.ndarray, p_load: np.ndarray, q_load: np.ndarray,
                    v_max: float, nodes: Sequence[int] | None = None) -> dict[int, TrainingSet]:
    """Label each historical instant by its uncurtailed voltage.

    With a pure curtailment cost the unconstrained optimum is zero curtailment,
    so no solve is needed. Rows of the inputs are instants; nodes are 1-based.
    """
    if v_max <= 0:
        raise ValueError("v_max must be positive")
    p_av = np.atleast_2d(np.asarray(p_av, float))
    p_load = np.atleast_2d(np.asarray(p_load, float))
    q_load = np.atleast_2d(np.asarray(q_load, float))
    if not (p_av.shape == p_load.shape == q_load.shape) or p_av.shape[1] != model.n_nodes:
        raise ValueError("history arrays must share shape (instants, n_nodes)")
    if p_av.shape[0] == 0:
        raise ValueError("history is empty")
    v = np.vstack([voltages_batch(model, p_av[t], p_load[t], q_load[t]) for t in range(p_av.shape[0])])
    nodes = range(1, model.n_nodes + 1) if nodes is None else nodes
    out = {}
    for k in nodes:
        feats = np.column_stack([p_load[:, k - 1], p_av[:, k - 1]])
        labels = np.where(v[:, k - 1] >= v_max, ACTIVE, INACTIVE)
        out[int(k)] = TrainingSet(features=feats, labels=labels, node=int(k))
    return out


class ActiveSetLearner(BaseEstimator):
    """One :class:`WeightedSVC` per constraint.

    ``fit`` takes ``X`` of shape ``(m, n_constraints, 2)`` and labels ``Y`` of
    shape ``(m, n_constraints)``; ``predict`` returns labels in the same layout.
    """

    def __init__(self, nodes: Sequence[int] = (), weight_a: float = 10.0, bias_shift: float = 0.0,
                 feature_scale: float = 1.0):
        self.nodes = nodes
        self.weight_a = weight_a
        self.bias_shift = bias_shift
        self.feature_scale = feature_scale

    def fit(self, X, Y):
        X = np.asarray(X, dtype=float)
        Y = np.asarray(Y)
        if X.ndim != 3 or X.shape[:2] != Y.shape or X.shape[1] != len(self.nodes):
            raise ValueError("X must be (m, n_constraints, n_features) with Y (m, n_constraints)")
        base = WeightedSVC(self.weight_a, self.bias_shift, self.feature_scale)
        self.estimators_ = [clone(base).fit(X[:, j], Y[:, j]) for j in range(len(self.nodes))]
        return self

    def predict(self, X):
        check_is_fitted(self, "estimators_")
        X = np.asarray(X, dtype=float)
        if X.ndim == 2:
            return np.array([e.predict(X[j:j + 1])[0] for j, e in enumerate(self.estimators_)])
        return np.column_stack([e.predict(X[:, j]) for j, e in enumerate(self.estimators_)])

    def active_nodes(self, phi: np.ndarray) -> list[int]:
        """Nodes flagged active for one instant; ``phi`` is ``(n_constraints, 2)``."""
        labels = self.predict(np.asarray(phi, dtype=float))
        return [int(k) for k, lab in zip(self.nodes, labels) if lab == ACTIVE]

    def classifiers(self) -> list[NodeClassifier]:
        check_is_fitted(self, "estimators_")
        return [e.to_node_classifier(k) for k, e in zip(self.nodes, self.estimators_)]

    @classmethod
    def from_classifiers(cls, clfs: Sequence[NodeClassifier]) -> "ActiveSetLearner":
        learner = cls(nodes=tuple(c.node for c in clfs), weight_a=clfs[0].weight_a if clfs else 10.0)
        ests = []
        for c in clfs:
            e = WeightedSVC(weight_a=c.weight_a)
            e.coef_ = np.asarray(c.w, float)
            e.intercept_ = float(c.b)
            e.classes_ = np.array([ACTIVE, INACTIVE])
            e.n_features_in_ = e.coef_.size
            e.degenerate_ = c.degenerate
            ests.append(e)
        learner.estimators_ = ests
        return learner


def save_classifiers(clfs: Sequence[NodeClassifier], path: str | Path) -> None:
    Path(path).write_text(json.dumps([c.to_dict() for c in clfs], indent=2))


def load_classifiers(path: str | Path) -> list[NodeClassifier]:
    return [NodeClassifier.from_dict(d) for d in json.loads(Path(path).read_text())]


def write_labels(sets: dict[int, TrainingSet], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["node", "load", "solar", "label"])
        for k, ts in sets.items():
            for (load, solar), lab in zip(ts.features, ts.labels):
                wr.writerow([k, f"{load:.12g}", f"{solar:.12g}", int(lab)])


def read_labels(path: str | Path) -> dict[int, TrainingSet]:
    rows: dict[int, list[tuple[float, float, int]]] = {}
    with open(path, newline="") as fh:
        for r in csv.DictReader(fh):
            rows.setdefault(int(r["node"]), []).append((float(r["load"]), float(r["solar"]), int(r["label"])))
    return {k: TrainingSet(features=np.array([v[:2] for v in vals]), labels=np.array([v[2] for v in vals]), node=k)
            for k, vals in rows.items()}
