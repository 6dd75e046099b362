"""Radial feeder model and the linearized voltage map.

Voltages are evaluated as ``v = R((I - diag(alpha)) p_av - p_load) - B q_load + a``
with every quantity in per-unit.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np


class FeederError(ValueError):
    """Raised for malformed topologies or dimension mismatches."""


@dataclass(frozen=True)
class Edge:
    parent: int
    child: int
    r: float
    x: float


@dataclass(frozen=True)
class FeederModel:
    """Sensitivity matrices of a feeder; node ``k`` maps to row ``k - 1``."""

    R: np.ndarray
    B: np.ndarray
    a: np.ndarray
    v0: float = 1.0
    topology: tuple[Edge, ...] | None = None
    parents: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self) -> None:
        R = np.array(self.R, dtype=float)
        B = np.array(self.B, dtype=float)
        a = np.array(self.a, dtype=float).reshape(-1)
        n = a.shape[0]
        if R.shape != (n, n) or B.shape != (n, n):
            raise FeederError(
                f"R {R.shape} and B {B.shape} must be square with size len(a)={n}"
            )
        for arr in (R, B, a):
            arr.setflags(write=False)
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "B", B)
        object.__setattr__(self, "a", a)

    @property
    def n_nodes(self) -> int:
        return self.a.shape[0]

    def hop_distance(self) -> np.ndarray:
        """Pairwise hop counts between non-slack nodes (requires topology)."""
        if self.parents is None:
            raise FeederError("hop distances need a topology-built model")
        n = self.n_nodes
        paths = [self._path(k) for k in range(n + 1)]
        dist = np.zeros((n, n), dtype=int)
        for i in range(1, n + 1):
            si = set(paths[i])
            for j in range(i + 1, n + 1):
                common = len(si.intersection(paths[j])) - 1
                d = len(paths[i]) + len(paths[j]) - 2 - 2 * common
                dist[i - 1, j - 1] = dist[j - 1, i - 1] = d
        return dist

    def _path(self, k: int) -> list[int]:
        path = [k]
        while k != 0:
            k = int(self.parents[k])
            path.append(k)
        return path


@dataclass(frozen=True)
class GridState:
    """Injections at one instant; alpha is the curtailed fraction of p_av."""

    p_av: np.ndarray
    p_load: np.ndarray
    q_load: np.ndarray
    alpha: np.ndarray | None = None

    def __post_init__(self) -> None:
        p_av = np.asarray(self.p_av, dtype=float)
        alpha = np.zeros_like(p_av) if self.alpha is None else np.asarray(self.alpha, dtype=float)
        if alpha.shape != p_av.shape:
            raise FeederError("alpha and p_av must have the same shape")
        if np.any(alpha < 0) or np.any(alpha > 1):
            raise FeederError("curtailment fractions must lie in [0, 1]")
        if np.any((p_av == 0) & (alpha != 0)):
            raise FeederError("alpha must be 0 at nodes without PV")
        object.__setattr__(self, "p_av", p_av)
        object.__setattr__(self, "alpha", alpha)
        object.__setattr__(self, "p_load", np.asarray(self.p_load, dtype=float))
        object.__setattr__(self, "q_load", np.asarray(self.q_load, dtype=float))


def _parents_from_edges(edges: Sequence[Edge], n: int) -> np.ndarray:
    parent = np.full(n + 1, -1, dtype=int)
    children: dict[int, list[int]] = {}
    for e in edges:
        if e.r <= 0 or e.x <= 0:
            raise FeederError(f"edge {e.parent}->{e.child} needs r, x > 0")
        if not (0 <= e.parent <= n and 1 <= e.child <= n):
            raise FeederError(f"edge {e.parent}->{e.child} references an unknown node")
        if parent[e.child] != -1:
            raise FeederError(f"node {e.child} has two parents; topology has a cycle")
        parent[e.child] = e.parent
        children.setdefault(e.parent, []).append(e.child)
    seen = {0}
    stack = [0]
    while stack:
        u = stack.pop()
        for v in children.get(u, ()):
            if v in seen:
                raise FeederError(f"cycle detected at node {v}")
            seen.add(v)
            stack.append(v)
    missing = sorted(set(range(n + 1)) - seen)
    if missing:
        raise FeederError(f"nodes {missing} are not connected to the slack (cycle or island)")
    parent[0] = 0
    return parent


def build_sensitivities(edges: Iterable[Edge | dict | tuple], v0: float = 1.0) -> FeederModel:
    """Build R, B and a for a radial tree rooted at the slack node 0.

    ``R[i, j]`` is twice the resistance shared by the slack-to-i and slack-to-j
    paths; ``B`` uses reactances the same way.
    """
    edges = tuple(_as_edge(e) for e in edges)
    if not edges:
        raise FeederError("topology has no edges")
    n = max(max(e.parent, e.child) for e in edges)
    if len(edges) != n:
        raise FeederError(f"a tree on {n} non-slack nodes needs {n} edges, got {len(edges)}")
    parent = _parents_from_edges(edges, n)
    r_up = np.zeros(n + 1)
    x_up = np.zeros(n + 1)
    for e in edges:
        r_up[e.child] = e.r
        x_up[e.child] = e.x

    # ancestor incidence: E[k, i] = 1 when edge into k lies on the path to i
    E = np.zeros((n + 1, n + 1))
    for i in range(1, n + 1):
        k = i
        while k != 0:
            E[k, i] = 1.0
            k = parent[k]
    E = E[1:, 1:]
    R = 2.0 * E.T @ (r_up[1:, None] * E)
    B = 2.0 * E.T @ (x_up[1:, None] * E)
    return FeederModel(R=R, B=B, a=np.full(n, float(v0)), v0=float(v0), topology=edges, parents=parent)


def _as_edge(e: Edge | dict | tuple) -> Edge:
    if isinstance(e, Edge):
        return e
    if isinstance(e, dict):
        return Edge(int(e["from"]), int(e["to"]), float(e["r"]), float(e["x"]))
    parent, child, r, x = e
    return Edge(int(parent), int(child), float(r), float(x))


def compute_voltages(model: FeederModel, state: GridState) -> np.ndarray:
    """Linearized voltage magnitudes for one grid state."""
    n = model.n_nodes
    for name in ("p_av", "p_load", "q_load"):
        if getattr(state, name).shape[-1] != n:
            raise FeederError(f"{name} has length {getattr(state, name).shape[-1]}, feeder has {n} nodes")
    p_net = (1.0 - state.alpha) * state.p_av - state.p_load
    return model.R @ p_net - model.B @ state.q_load + model.a


def voltages_batch(model: FeederModel, p_av: np.ndarray, p_load: np.ndarray, q_load: np.ndarray,
                   alpha: np.ndarray | None = None) -> np.ndarray:
    """Voltages for a stack of solar draws (rows of ``p_av``) at fixed loads and alpha."""
    p_av = np.atleast_2d(p_av)
    if p_av.shape[1] != model.n_nodes:
        raise FeederError(f"p_av rows have length {p_av.shape[1]}, feeder has {model.n_nodes} nodes")
    keep = 1.0 if alpha is None else 1.0 - np.asarray(alpha, dtype=float)
    base = model.a - model.R @ np.asarray(p_load, float) - model.B @ np.asarray(q_load, float)
    return (p_av * keep) @ model.R.T + base


def load_feeder(path: str | Path) -> FeederModel:
    """Read either an edge list or explicit matrices from JSON."""
    doc = json.loads(Path(path).read_text())
    return feeder_from_dict(doc)


def feeder_from_dict(doc: dict) -> FeederModel:
    if "edges" in doc:
        return build_sensitivities(doc["edges"], v0=float(doc.get("v0", 1.0)))
    if {"R", "B", "a"} <= doc.keys():
        return FeederModel(R=np.array(doc["R"]), B=np.array(doc["B"]), a=np.array(doc["a"]),
                           v0=float(doc.get("v0", 1.0)))
    raise FeederError("feeder JSON needs either 'edges' or all of 'R', 'B', 'a'")


def feeder_to_dict(model: FeederModel) -> dict:
    if model.topology is not None:
        return {
            "v0": model.v0,
            "edges": [{"from": e.parent, "to": e.child, "r": e.r, "x": e.x} for e in model.topology],
        }
    return {"R": model.R.tolist(), "B": model.B.tolist(), "a": model.a.tolist(), "v0": model.v0}


def save_feeder(model: FeederModel, path: str | Path) -> None:
    Path(path).write_text(json.dumps(feeder_to_dict(model), indent=2))
