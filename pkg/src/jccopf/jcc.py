"""Truncated inclusion-exclusion bounds on a joint violation probability.

All probabilities behind one :class:`BoundReport` come from a single shared
:class:`ViolationTable`, so the Bonferroni inequalities hold exactly on its
empirical measure. Counts stay integral until the final division.
"""

from __future__ import annotations

import itertools
import json
import math
import time
import warnings
from dataclasses import dataclass, field
from math import comb
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from jccopf._validation import check_positive_int, check_probability
from jccopf.feeder import FeederModel, voltages_batch
from jccopf.uncertainty import ForecastModel, sample

EPS_CAP = 0.5
_BATCH_WORDS = 1 << 21


def count_intersections(active_count: int) -> int:
    """Number of intersections of two or more events among ``active_count``."""
    if active_count < 0:
        raise ValueError("active_count must be >= 0")
    return 2 ** active_count - 1 - active_count


@dataclass(frozen=True)
class ViolationTable:
    """Boolean ``(n_samples, n_constraints)`` violation matrix with bit-packed columns."""

    hits: np.ndarray
    ids: tuple[int, ...]
    bits: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self) -> None:
        hits = np.asarray(self.hits, dtype=bool)
        if hits.ndim != 2 or hits.shape[1] != len(self.ids):
            raise ValueError("hits must be (n_samples, len(ids))")
        hits.setflags(write=False)
        object.__setattr__(self, "hits", hits)
        object.__setattr__(self, "ids", tuple(int(i) for i in self.ids))
        object.__setattr__(self, "bits", _pack(hits))

    @property
    def n_samples(self) -> int:
        return self.hits.shape[0]

    def column(self, node: int) -> int:
        try:
            return self.ids.index(int(node))
        except ValueError:
            raise IndexError(f"constraint {node} is not in the table") from None

    def count(self, subset: Iterable[int]) -> int:
        cols = [self.column(i) for i in subset]
        if not cols:
            return self.n_samples
        acc = np.bitwise_and.reduce(self.bits[cols], axis=0)
        return int(np.bitwise_count(acc).sum())

    def union_count(self, subset: Iterable[int] | None = None) -> int:
        cols = list(range(len(self.ids))) if subset is None else [self.column(i) for i in subset]
        if not cols:
            return 0
        return int(self.hits[:, cols].any(axis=1).sum())


def _pack(hits: np.ndarray) -> np.ndarray:
    n_s, n = hits.shape
    pad = (-n_s) % 64
    cols = np.concatenate([hits.T, np.zeros((n, pad), dtype=bool)], axis=1)
    return np.packbits(cols, axis=1, bitorder="little").view(np.uint64)


def build_violation_table(model: FeederModel, forecast: ForecastModel, p_load: np.ndarray, q_load: np.ndarray,
                          v_max: float, n_samples: int = 10_000, nodes: Sequence[int] | None = None,
                          alpha: np.ndarray | None = None, stream: Sequence[int] = (0,)) -> ViolationTable:
    """Sample available solar and flag ``V_i > v_max`` per draw (uncurtailed unless ``alpha`` given)."""
    check_positive_int(n_samples, "n_samples")
    scen = sample(forecast, n_samples, stream=stream)
    return table_from_samples(model, scen.samples, p_load, q_load, v_max, nodes, alpha)


def table_from_samples(model: FeederModel, samples: np.ndarray, p_load, q_load, v_max: float,
                       nodes: Sequence[int] | None = None, alpha: np.ndarray | None = None) -> ViolationTable:
    nodes = tuple(range(1, model.n_nodes + 1)) if nodes is None else tuple(int(k) for k in nodes)
    v = voltages_batch(model, samples, p_load, q_load, alpha)
    cols = np.asarray(nodes, dtype=int) - 1
    return ViolationTable(hits=v[:, cols] > v_max, ids=nodes)


def estimate_intersection(table: ViolationTable, subset: Iterable[int]) -> float:
    """Relative frequency of draws violating every constraint in ``subset`` (1 for the empty set)."""
    return table.count(subset) / table.n_samples


@dataclass
class BoundReport:
    active: list[int]
    marginals: list[float]
    bounds: list[float]
    k_reached: int
    p_c: float
    union: float
    n_samples: int
    subsets_evaluated: int = 0
    wall_ms: float | None = None
    stage_ms: list[float] = field(default_factory=list)
    stage_subsets: list[int] = field(default_factory=list)
    raw_stage_sums: list[float] = field(default_factory=list)
    pc_stderr: float = 0.0
    full_depth: int = 0
    epsilon_i: dict[int, float] = field(default_factory=dict)

    @property
    def complete(self) -> bool:
        return self.k_reached >= self.full_depth

    def to_dict(self, timing: bool = True) -> dict:
        return {
            "active": self.active,
            "marginals": self.marginals,
            "B": self.bounds,
            "K": self.k_reached,
            "Pc": self.p_c,
            "eps_i": {str(k): v for k, v in self.epsilon_i.items()},
            "wall_ms": (round(self.wall_ms) if self.wall_ms is not None else None) if timing else None,
            "subsets_evaluated": self.subsets_evaluated,
            "union": self.union,
            "Pc_stderr": self.pc_stderr,
            "n_samples": self.n_samples,
            "full_depth": self.full_depth,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "BoundReport":
        return cls(active=list(doc["active"]), marginals=list(doc["marginals"]), bounds=list(doc["B"]),
                   k_reached=int(doc["K"]), p_c=float(doc["Pc"]), union=float(doc.get("union", float("nan"))),
                   n_samples=int(doc.get("n_samples", 0)), subsets_evaluated=int(doc.get("subsets_evaluated", 0)),
                   wall_ms=doc.get("wall_ms"), pc_stderr=float(doc.get("Pc_stderr", 0.0)),
                   full_depth=int(doc.get("full_depth", 0)),
                   epsilon_i={int(k): float(v) for k, v in doc.get("eps_i", {}).items()})


def _subset_counts(table: ViolationTable, cols: Sequence[int], size: int, deadline: float | None):
    """Sum of intersection counts over all ``size``-subsets of ``cols`` in lexicographic order.

    Returns ``(total, n_subsets)`` or ``None`` when the deadline passes first.
    """
    if size > len(cols):
        return 0, 0
    bits = table.bits[np.asarray(cols, dtype=int)]
    words = bits.shape[1]
    batch = max(1, _BATCH_WORDS // max(1, words * size))
    total = 0
    n_sub = 0
    it = itertools.combinations(range(len(cols)), size)
    while True:
        chunk = list(itertools.islice(it, batch))
        if not chunk:
            return total, n_sub
        idx = np.asarray(chunk, dtype=np.intp)
        acc = bits[idx[:, 0]]
        for j in range(1, size):
            acc = acc & bits[idx[:, j]]
        total += int(np.bitwise_count(acc).sum())
        n_sub += len(chunk)
        if deadline is not None and time.perf_counter() > deadline:
            return None


def compute_bound(table: ViolationTable, active: Sequence[int], k_max: int | None = None,
                  time_budget: float | None = None, max_subsets: int | None = None) -> BoundReport:
    """Stage-committed truncated inclusion-exclusion upper bound.

    Stage ``k`` adds the ``2k``- and ``2k+1``-fold intersections and is kept
    only once both sums are complete. The committed bound is the running
    minimum of the odd-order partial sums, each of which is an upper bound;
    the minimum therefore stays an upper bound, is non-increasing, and equals
    the union frequency at full depth. ``time_budget`` is in seconds
    (``None`` for no limit, ``<= 0`` for marginals only). ``max_subsets`` is a
    machine-independent work budget: a stage is skipped, and estimation ends,
    once its subsets would push the running total past it.
    """
    t0 = time.perf_counter()
    active = [int(i) for i in active]
    cols = [table.column(i) for i in active]
    n_s = table.n_samples
    full = (len(active) + 1) // 2
    k_max = full if k_max is None else min(int(k_max), full)
    marg_counts = [int(np.bitwise_count(table.bits[c]).sum()) for c in cols]
    union_count = table.union_count(active)
    b0 = sum(marg_counts)

    bound_counts = [b0]
    raw = b0
    raw_sums: list[float] = []
    stage_ms: list[float] = []
    stage_subsets: list[int] = []
    evaluated = 0
    if time_budget is None:
        deadline = None
    elif time_budget <= 0:
        deadline = -math.inf
    else:
        deadline = t0 + time_budget

    for k in range(1, k_max + 1):
        if deadline is not None and time.perf_counter() > deadline:
            break
        stage_size = comb(len(cols), 2 * k) + comb(len(cols), 2 * k + 1)
        if max_subsets is not None and evaluated + stage_size > max_subsets:
            break
        ts = time.perf_counter()
        even = _subset_counts(table, cols, 2 * k, deadline)
        odd = None if even is None else _subset_counts(table, cols, 2 * k + 1, deadline)
        if odd is None:
            break
        raw = raw - even[0] + odd[0]
        raw_sums.append(raw / n_s)
        bound_counts.append(min(bound_counts[-1], raw))
        evaluated += even[1] + odd[1]
        stage_subsets.append(even[1] + odd[1])
        stage_ms.append((time.perf_counter() - ts) * 1e3)

    k_reached = len(bound_counts) - 1
    pc_count = b0 - bound_counts[-1]
    return BoundReport(
        active=active,
        marginals=[c / n_s for c in marg_counts],
        bounds=[c / n_s for c in bound_counts],
        k_reached=k_reached,
        p_c=pc_count / n_s,
        union=union_count / n_s,
        n_samples=n_s,
        subsets_evaluated=evaluated,
        wall_ms=(time.perf_counter() - t0) * 1e3,
        stage_ms=stage_ms,
        stage_subsets=stage_subsets,
        raw_stage_sums=raw_sums,
        pc_stderr=_pc_stderr(table, cols, k_reached),
        full_depth=full,
    )


def _pc_stderr(table: ViolationTable, cols: Sequence[int], k: int) -> float:
    """Binomial-style standard error of the per-draw correction ``j - g_k(j)``."""
    if not cols or k == 0:
        return 0.0
    j = table.hits[:, list(cols)].sum(axis=1)
    kept = np.zeros(j.shape, dtype=float)
    for i in range(1, 2 * k + 2):
        kept += (-1) ** (i + 1) * np.array([comb(int(v), i) for v in range(j.max() + 1)])[j]
    y = j - kept
    return float(y.std(ddof=1) / math.sqrt(j.size)) if j.size > 1 else 0.0


def expansion_partial_sums(table: ViolationTable, active: Sequence[int]) -> list[float]:
    """Running inclusion-exclusion value after each individual term, in expansion order."""
    active = list(active)
    out = []
    acc = 0
    for size in range(1, len(active) + 1):
        sign = 1 if size % 2 else -1
        for sub in itertools.combinations(active, size):
            acc += sign * table.count(sub)
            out.append(acc / table.n_samples)
    return out


def truncated_expansion(table: ViolationTable, active: Sequence[int], order: int) -> float:
    """Inclusion-exclusion truncated after all terms of ``order`` (no stage pairing)."""
    acc = 0
    for size in range(1, min(order, len(active)) + 1):
        sign = 1 if size % 2 else -1
        acc += sign * sum(table.count(s) for s in itertools.combinations(active, size))
    return acc / table.n_samples


def allocate_epsilon(report: BoundReport, epsilon: float, mode: str = "improved",
                     p_c: float | None = None) -> dict[int, float]:
    """Split the joint budget evenly over the active set.

    ``boole`` gives ``epsilon/|M|``; ``improved`` adds ``p_c/|M|`` (the
    report's correction unless ``p_c`` is passed). Values are capped at 0.5.
    """
    check_probability(epsilon, "epsilon", upper=0.5, closed_upper=True)
    if mode not in ("boole", "improved"):
        raise ValueError(f"unknown allocation mode {mode!r}")
    m = len(report.active)
    if m == 0:
        return {}
    corr = report.p_c if p_c is None else float(p_c)
    if corr < 0:
        raise ValueError("correction must be nonnegative")
    share = epsilon / m + (corr / m if mode == "improved" else 0.0)
    if share > EPS_CAP:
        warnings.warn(f"per-constraint budget {share:.4g} capped at {EPS_CAP}", RuntimeWarning, stacklevel=2)
        share = EPS_CAP
    return {int(k): share for k in report.active}


def sensitivity_curve(table: ViolationTable, active: Sequence[int], sizes: Sequence[int],
                      max_order: int = 2) -> list[dict]:
    """Intersection estimates on nested prefixes of the sample pool, one row per (N_s, subset)."""
    rows = []
    for n in sizes:
        sub = ViolationTable(hits=table.hits[:n], ids=table.ids)
        for order in range(2, max_order + 1):
            for s in itertools.combinations(active, order):
                rows.append({"ns": int(n), "subset": "&".join(map(str, s)), "prob": estimate_intersection(sub, s)})
    return rows


def save_report(report: BoundReport, path: str | Path, timing: bool = True) -> None:
    Path(path).write_text(json.dumps(report.to_dict(timing=timing), indent=2))


def load_report(path: str | Path) -> BoundReport:
    return BoundReport.from_dict(json.loads(Path(path).read_text()))
