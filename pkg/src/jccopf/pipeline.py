"""End-to-end run: scenario, labels, classifiers, bounds, allocation, OPF, validation."""

from __future__ import annotations

import csv
import json
import logging
import os
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from jccopf.activeset import ACTIVE, ActiveSetLearner, generate_labels, save_classifiers
from jccopf.ccopf import INFEASIBLE, OPTIMAL, CurtailmentPolicy, canonical_mode, solve_p1
from jccopf.feeder import FeederModel, load_feeder, voltages_batch
from jccopf.jcc import BoundReport, allocate_epsilon, compute_bound, sensitivity_curve, table_from_samples
from jccopf.scenario import DayProfile, DaySeries, bundled_feeder, generate_days
from jccopf.uncertainty import sample
from jccopf.validate import StepValidation, ValidationReport, violation_frequencies

log = logging.getLogger(__name__)

# stream ids under the root seed (history and held-out truth use scenario.realize)
STAGE_ESTIMATE = 3
STAGE_VALIDATE = 4
STAGE_TEST_TRUTH = 5

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_INFEASIBLE = 3
EXIT_NUMERICAL = 4


class ConfigError(ValueError):
    """Invalid run configuration or unreadable input file."""


@dataclass
class RunConfig:
    epsilon: float = 0.02
    v_max: float = 1.05
    ns: int = 10_000
    nm: int = 10_000
    kmax: int | None = None
    time_budget_ms: float | None = None
    max_subsets: int | None = None
    weight_a: float = 10.0
    bias_shift: float = 3.0
    feature_scale: float = 1000.0
    cost: float = 0.10
    seed: int = 2012
    modes: tuple[str, ...] = ("deterministic", "boole", "improved")
    train_days: int = 4
    test_days: int = 3
    pc_anchor: str = "boole"
    exact_sigma: bool = False
    threads: int = 1
    record_timing: bool = False
    feeder: str | None = None
    forecast_sd: float | None = None
    out_dir: str | None = None

    def __post_init__(self) -> None:
        self.modes = tuple(canonical_mode(m) for m in self.modes)
        if not 0 < self.epsilon <= 0.5:
            raise ConfigError(f"epsilon must lie in (0, 0.5], got {self.epsilon}")
        if self.v_max <= 0:
            raise ConfigError("v_max must be positive")
        if self.ns < 1 or self.nm < 1:
            raise ConfigError("ns and nm must be >= 1")
        if self.weight_a < 1:
            raise ConfigError("weight_a must be >= 1")
        if self.pc_anchor not in ("boole", "zero"):
            raise ConfigError("pc_anchor must be 'boole' or 'zero'")
        if self.train_days < 1 or self.test_days < 1:
            raise ConfigError("train_days and test_days must be >= 1")
        if self.threads < 1:
            raise ConfigError("threads must be >= 1")

    @classmethod
    def from_file(cls, path: str | Path, **overrides) -> "RunConfig":
        try:
            doc = json.loads(Path(path).read_text())
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from None
        return cls.from_dict(doc, source=str(path), **overrides)

    @classmethod
    def from_dict(cls, doc: dict, source: str = "<config>", **overrides) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(doc) - known
        if unknown:
            raise ConfigError(f"{source}: unknown keys {sorted(unknown)}")
        merged = {**doc, **{k: v for k, v in overrides.items() if v is not None}}
        if "modes" in merged:
            merged["modes"] = tuple(merged["modes"])
        try:
            return cls(**merged)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"{source}: {exc}") from None

    def to_dict(self) -> dict:
        d = asdict(self)
        d["modes"] = list(self.modes)
        return d


@dataclass
class StepResult:
    t: int
    active: list[int]
    report_zero: BoundReport
    report_alloc: BoundReport | None
    policies: dict[str, CurtailmentPolicy]
    validations: dict[str, StepValidation]
    max_voltage: dict[str, float]
    truth_active: list[int]


@dataclass
class PipelineResult:
    config: RunConfig
    steps: list[StepResult]
    classification: dict
    stage_seeds: dict[str, list[int]]
    exit_code: int = EXIT_OK
    infeasible: list[tuple[int, str, list[int]]] = field(default_factory=list)
    learner: ActiveSetLearner | None = None
    model: FeederModel | None = None
    test: DaySeries | None = None
    nodes: list[int] = field(default_factory=list)
    pv_nodes: list[int] = field(default_factory=list)
    offset: int = 0

    @property
    def validation(self) -> ValidationReport:
        return ValidationReport([s.validations[m] for s in self.steps for m in self.config.modes])

    def totals(self) -> dict[str, float]:
        return {m: float(sum(s.policies[m].objective for s in self.steps)) for m in self.config.modes}

    def max_violation(self) -> dict[str, float]:
        return {m: max(s.validations[m].joint for s in self.steps) for m in self.config.modes}

    def summary(self) -> dict:
        totals = self.totals()
        worst = self.max_violation()
        table = {m: {"Total Objective Function Value": totals[m], "Maximum Violation Probability": worst[m]}
                 for m in self.config.modes}
        pcs = [s.report_alloc.p_c for s in self.steps if s.report_alloc is not None]
        return {
            "table": table,
            "classification": self.classification,
            "max_pc": max(pcs, default=0.0),
            "steps": len(self.steps),
            "infeasible": [{"t": t, "mode": m, "nodes": v} for t, m, v in self.infeasible],
            "stage_seeds": self.stage_seeds,
            "config": {k: v for k, v in self.config.to_dict().items() if k not in ("out_dir", "threads")},
            "exit_code": self.exit_code,
        }


def _thread_count(cfg: RunConfig) -> int:
    env = os.environ.get("JCCOPF_THREADS")
    if cfg.threads == 1 and env:
        try:
            return max(1, int(env))
        except ValueError:
            raise ConfigError(f"JCCOPF_THREADS must be an integer, got {env!r}") from None
    return cfg.threads


def prepare(cfg: RunConfig) -> tuple[FeederModel, DayProfile, DaySeries]:
    if cfg.feeder:
        try:
            model = load_feeder(cfg.feeder)
        except FileNotFoundError:
            raise ConfigError(f"feeder file not found: {cfg.feeder}") from None
    else:
        model = bundled_feeder()
    profile = DayProfile(n_nodes=model.n_nodes) if cfg.forecast_sd is None else \
        DayProfile(n_nodes=model.n_nodes, forecast_sd=cfg.forecast_sd)
    series = generate_days(profile, cfg.train_days + cfg.test_days, cfg.seed, model)
    return model, profile, series


def train_classifiers(cfg: RunConfig, model: FeederModel, nodes: Sequence[int], history: DaySeries,
                      realized: np.ndarray) -> ActiveSetLearner:
    sets = generate_labels(model, realized, history.p_load, history.q_load, cfg.v_max, nodes)
    X = np.stack([sets[k].features for k in nodes], axis=1)
    Y = np.stack([sets[k].labels for k in nodes], axis=1)
    learner = ActiveSetLearner(nodes=tuple(nodes), weight_a=cfg.weight_a, bias_shift=cfg.bias_shift,
                               feature_scale=cfg.feature_scale)
    return learner.fit(X, Y)


def run_step(cfg: RunConfig, model: FeederModel, series: DaySeries, learner: ActiveSetLearner,
             nodes: Sequence[int], t: int, t_global: int) -> StepResult:
    forecast = series.forecast(t, seed=cfg.seed)
    p_load, q_load = series.p_load[t], series.q_load[t]
    idx = np.asarray(nodes) - 1
    phi = np.column_stack([p_load[idx], forecast.mu[idx]])
    active = learner.active_nodes(phi)
    budget = None if cfg.time_budget_ms is None else cfg.time_budget_ms / 1e3

    draws = sample(forecast, cfg.ns, stream=(STAGE_ESTIMATE, t_global)).samples
    table0 = table_from_samples(model, draws, p_load, q_load, cfg.v_max, nodes)
    # the deeper stages only feed the chance-constrained modes
    depth = cfg.kmax if set(cfg.modes) & {"boole", "improved"} else 0
    report0 = compute_bound(table0, active, depth, budget, cfg.max_subsets)
    truth_active = [k for k, f in zip(nodes, table0.hits.any(axis=0)) if f]

    policies: dict[str, CurtailmentPolicy] = {}
    report_alloc = report0
    common = dict(cost=cfg.cost, pv_nodes=None, exact_sigma=False)
    modes = set(cfg.modes)
    if "deterministic" in modes:
        policies["deterministic"] = solve_p1(model, forecast, p_load, q_load, cfg.v_max, "deterministic",
                                             nodes=nodes, **common)
    if modes & {"boole", "improved"}:
        boole = solve_p1(model, forecast, p_load, q_load, cfg.v_max, "boole",
                         allocate_epsilon(report0, cfg.epsilon, "boole"), exact_sigma=cfg.exact_sigma,
                         cost=cfg.cost)
        policies["boole"] = boole
        if "improved" in modes:
            ub = None
            if cfg.pc_anchor == "boole" and boole.status == OPTIMAL:
                table_b = table_from_samples(model, draws, p_load, q_load, cfg.v_max, nodes, boole.alpha)
                report_alloc = compute_bound(table_b, active, cfg.kmax, budget, cfg.max_subsets)
                ub = boole.alpha
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", RuntimeWarning)
                alloc = allocate_epsilon(report0, cfg.epsilon, "improved", p_c=report_alloc.p_c)
            report_alloc.epsilon_i = alloc
            policies["improved"] = solve_p1(model, forecast, p_load, q_load, cfg.v_max, "improved", alloc,
                                            alpha_ub=ub, exact_sigma=cfg.exact_sigma, cost=cfg.cost)
    for p in policies.values():
        p.t = t_global

    fresh = sample(forecast, cfg.nm, stream=(STAGE_VALIDATE, t_global)).samples
    validations = {}
    vmax_mean = {}
    for mode in cfg.modes:
        pol = policies[mode]
        joint, per = violation_frequencies(model, fresh, p_load, q_load, pol.alpha, cfg.v_max, nodes)
        max_node = int(nodes[int(np.argmax(per))]) if per.max(initial=0) > 0 else None
        validations[mode] = StepValidation(t=t_global, mode=mode, joint=joint, per_node=[float(x) for x in per],
                                           n_m=cfg.nm, max_node=max_node, objective=pol.objective)
        vmax_mean[mode] = float(voltages_batch(model, forecast.mu, p_load, q_load, pol.alpha)[0][idx].max())
    return StepResult(t_global, active, report0, report_alloc if "improved" in modes else None, policies,
                      validations, vmax_mean, truth_active)


def classification_errors(learner: ActiveSetLearner, model: FeederModel, series: DaySeries, realized: np.ndarray,
                          nodes: Sequence[int], v_max: float) -> dict:
    """Error rates on held-out days, labels from the realized (uncurtailed) voltages."""
    sets = generate_labels(model, realized, series.p_load, series.q_load, v_max, nodes)
    X = np.stack([sets[k].features for k in nodes], axis=1)
    Y = np.stack([sets[k].labels for k in nodes], axis=1)
    pred = learner.predict(X)
    act = Y == ACTIVE
    ina = ~act
    return {
        "samples_per_node": int(Y.shape[0]),
        "false_inactive_rate": float((pred[act] != ACTIVE).mean()) if act.any() else 0.0,
        "false_active_rate": float((pred[ina] == ACTIVE).mean()) if ina.any() else 0.0,
        "active_labels": int(act.sum()),
    }


def run_pipeline(cfg: RunConfig, nodes: Sequence[int] | None = None) -> PipelineResult:
    model, profile, series = prepare(cfg)
    # every node is a constraint; only PV nodes carry curtailment
    nodes = list(range(1, model.n_nodes + 1) if nodes is None else nodes)
    train = series.days(0, cfg.train_days)
    test = series.days(cfg.train_days, cfg.train_days + cfg.test_days)
    history = train.realize(seed=cfg.seed)
    learner = train_classifiers(cfg, model, nodes, train, history)
    offset = train.n_steps

    def one(t: int) -> StepResult:
        return run_step(cfg, model, test, learner, nodes, t, offset + t)

    threads = _thread_count(cfg)
    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            steps = list(pool.map(one, range(test.n_steps)))
    else:
        steps = [one(t) for t in range(test.n_steps)]

    truth = test.realize(seed=cfg.seed + STAGE_TEST_TRUTH)
    classification = classification_errors(learner, model, test, truth, nodes, cfg.v_max)
    seeds = {"scenario": [cfg.seed, 101], "history": [cfg.seed, 102], "estimate": [cfg.seed, STAGE_ESTIMATE],
             "validate": [cfg.seed, STAGE_VALIDATE], "test_truth": [cfg.seed + STAGE_TEST_TRUTH, 102]}
    result = PipelineResult(cfg, steps, classification, seeds, learner=learner, model=model, test=test,
                            nodes=nodes, pv_nodes=list(profile.pv_nodes), offset=offset)
    for s in steps:
        for m, p in s.policies.items():
            if p.status == INFEASIBLE:
                result.infeasible.append((s.t, m, p.violating))
            elif p.status != OPTIMAL and result.exit_code == EXIT_OK:
                result.exit_code = EXIT_NUMERICAL
    if result.infeasible:
        result.exit_code = EXIT_INFEASIBLE
    if cfg.out_dir:
        write_artifacts(result, Path(cfg.out_dir))
    return result


def _write_csv(path: Path, header: Sequence[str], rows) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(header)
        wr.writerows(rows)


FIGURE_COLUMNS = {
    "fig4_sensitivity.csv": ["t", "ns", "subset", "prob"],
    "fig5_max_voltage.csv": ["t", "mode", "max_voltage"],
    "fig6_violation.csv": ["t", "mode", "joint_violation", "stderr"],
    "fig7_active_time.csv": ["t", "n_active", "subsets_evaluated", "wall_ms"],
    "fig8_stage_time.csv": ["K", "subsets", "wall_ms"],
    "fig9_curtailment.csv": ["t", "node", "mode", "alpha"],
}


def write_artifacts(result: PipelineResult, out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    cfg = result.config
    timing = cfg.record_timing
    modes = cfg.modes

    bounds = []
    for s in result.steps:
        entry = {"t": s.t, "zero": s.report_zero.to_dict(timing)}
        if s.report_alloc is not None:
            entry["allocation"] = s.report_alloc.to_dict(timing)
            entry["anchor"] = cfg.pc_anchor
        bounds.append(entry)
    (out / "bounds.json").write_text(json.dumps(bounds, indent=1))
    (out / "policies.json").write_text(json.dumps(
        [s.policies[m].to_dict() for s in result.steps for m in modes], indent=1))
    _write_csv(out / "validation.csv", ["t", "mode", "joint_violation", "max_node", "objective"],
               ([v.t, v.mode, f"{v.joint:.6g}", "" if v.max_node is None else v.max_node, f"{v.objective:.12g}"]
                for s in result.steps for v in (s.validations[m] for m in modes)))
    (out / "summary.json").write_text(json.dumps(result.summary(), indent=2))
    save_classifiers(result.learner.classifiers(), out / "classifiers.json")

    _write_csv(out / "fig5_max_voltage.csv", FIGURE_COLUMNS["fig5_max_voltage.csv"],
               ([s.t, m, f"{s.max_voltage[m]:.9f}"] for s in result.steps for m in modes))
    _write_csv(out / "fig6_violation.csv", FIGURE_COLUMNS["fig6_violation.csv"],
               ([s.t, m, f"{s.validations[m].joint:.6g}", f"{s.validations[m].stderr:.6g}"]
                for s in result.steps for m in modes))
    _write_csv(out / "fig7_active_time.csv", FIGURE_COLUMNS["fig7_active_time.csv"],
               ([s.t, len(s.active), s.report_zero.subsets_evaluated,
                 f"{s.report_zero.wall_ms:.3f}" if timing else ""] for s in result.steps))
    stage_sub: dict[int, int] = {}
    stage_ms: dict[int, float] = {}
    for s in result.steps:
        for k, (n_sub, ms) in enumerate(zip(s.report_zero.stage_subsets, s.report_zero.stage_ms), start=1):
            stage_sub[k] = stage_sub.get(k, 0) + n_sub
            stage_ms[k] = stage_ms.get(k, 0.0) + ms
    _write_csv(out / "fig8_stage_time.csv", FIGURE_COLUMNS["fig8_stage_time.csv"],
               ([k, stage_sub[k], f"{stage_ms[k]:.3f}" if timing else ""] for k in sorted(stage_sub)))
    _write_csv(out / "fig9_curtailment.csv", FIGURE_COLUMNS["fig9_curtailment.csv"],
               ([s.t, k, m, f"{s.policies[m].alpha[k - 1]:.9f}"] for s in result.steps for m in modes
                for k in result.pv_nodes))

    busiest = max(result.steps, key=lambda s: (len(s.active), -s.t))
    if len(busiest.active) >= 2:
        local = busiest.t - result.offset
        forecast = result.test.forecast(local, seed=cfg.seed)
        draws = sample(forecast, cfg.ns, stream=(STAGE_ESTIMATE, busiest.t)).samples
        table = table_from_samples(result.model, draws, result.test.p_load[local], result.test.q_load[local],
                                   cfg.v_max, result.nodes)
        sizes = sorted({max(1, cfg.ns * f // 100) for f in (1, 2, 5, 10, 20, 50, 100)})
        rows = sensitivity_curve(table, busiest.active, sizes)
        _write_csv(out / "fig4_sensitivity.csv", FIGURE_COLUMNS["fig4_sensitivity.csv"],
                   ([busiest.t, r["ns"], r["subset"], f"{r['prob']:.6g}"] for r in rows))
