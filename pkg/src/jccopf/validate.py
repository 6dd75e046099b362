"""Out-of-sample Monte Carlo check of fixed curtailment policies."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from jccopf._validation import check_positive_int
from jccopf.feeder import FeederModel, voltages_batch
from jccopf.uncertainty import ForecastModel, sample


@dataclass
class StepValidation:
    t: int
    mode: str
    joint: float
    per_node: list[float]
    n_m: int
    max_node: int | None
    objective: float = 0.0

    @property
    def stderr(self) -> float:
        return math.sqrt(self.joint * (1 - self.joint) / self.n_m)


@dataclass
class ValidationReport:
    steps: list[StepValidation] = field(default_factory=list)

    def modes(self) -> list[str]:
        return list(dict.fromkeys(s.mode for s in self.steps))

    def totals(self) -> dict[str, float]:
        out: dict[str, float] = {}
        for s in self.steps:
            out[s.mode] = out.get(s.mode, 0.0) + s.objective
        return out

    def max_violation(self) -> dict[str, float]:
        out: dict[str, float] = {}
        for s in self.steps:
            out[s.mode] = max(out.get(s.mode, 0.0), s.joint)
        return out

    def summary(self) -> dict:
        totals = self.totals()
        worst = self.max_violation()
        return {m: {"Total Objective Function Value": totals[m], "Maximum Violation Probability": worst[m]}
                for m in self.modes()}


def violation_frequencies(model: FeederModel, samples: np.ndarray, p_load, q_load, alpha, v_max: float,
                          nodes: Sequence[int]) -> tuple[float, np.ndarray]:
    """Joint and per-node frequency of ``V_i > v_max`` over the rows of ``samples``."""
    v = voltages_batch(model, samples, p_load, q_load, alpha)
    hits = v[:, np.asarray(nodes, dtype=int) - 1] > v_max
    return float(hits.any(axis=1).mean()), hits.mean(axis=0)


def validate_policy(model: FeederModel, forecast: ForecastModel, p_load, q_load, alpha, v_max: float,
                    n_m: int = 10_000, nodes: Sequence[int] | None = None, stream: Sequence[int] = (1,),
                    t: int = 0, mode: str = "", objective: float = 0.0) -> StepValidation:
    """Apply ``alpha`` to ``n_m`` fresh draws and count violations at every monitored node."""
    check_positive_int(n_m, "n_m")
    nodes = list(range(1, model.n_nodes + 1)) if nodes is None else list(nodes)
    scen = sample(forecast, n_m, stream=stream)
    joint, per = violation_frequencies(model, scen.samples, p_load, q_load, alpha, v_max, nodes)
    max_node = int(nodes[int(np.argmax(per))]) if per.max(initial=0) > 0 else None
    return StepValidation(t=t, mode=mode, joint=joint, per_node=[float(p) for p in per], n_m=n_m,
                          max_node=max_node, objective=objective)


def write_report_csv(report: ValidationReport, path: str | Path) -> None:
    """Columns: ``t, mode, joint_violation, max_node, objective``."""
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["t", "mode", "joint_violation", "max_node", "objective"])
        for s in report.steps:
            wr.writerow([s.t, s.mode, f"{s.joint:.6g}", "" if s.max_node is None else s.max_node,
                         f"{s.objective:.12g}"])


def write_summary(report: ValidationReport, path: str | Path) -> None:
    Path(path).write_text(json.dumps(report.summary(), indent=2))
