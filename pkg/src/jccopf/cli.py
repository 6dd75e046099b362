"""Command-line front end.

Step commands work on one time step of a scenario written by ``scenario gen``
(or regenerated from ``--seed`` when no files are given); ``run`` drives the
whole chain from a config file.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from importlib import resources
from pathlib import Path

import numpy as np

from jccopf import pipeline
from jccopf.activeset import (ActiveSetLearner, generate_labels, load_classifiers, read_labels, save_classifiers,
                              train_wsvc, write_labels)
from jccopf.ccopf import INFEASIBLE, OPTIMAL, MODES, canonical_mode, load_policies, save_policies, solve_p1
from jccopf.feeder import FeederError, build_sensitivities, load_feeder, save_feeder
from jccopf.jcc import allocate_epsilon, build_violation_table, compute_bound, load_report, save_report
from jccopf.pipeline import FIGURE_COLUMNS, ConfigError, RunConfig
from jccopf.scenario import DayProfile, bundled_feeder, generate_days, read_series, write_covariance, write_series
from jccopf.validate import ValidationReport, validate_policy, write_report_csv
from jccopf.uncertainty import ModelError

log = logging.getLogger("jccopf")

FIGURE_HELP = "figure CSVs written by `run` (columns):\n" + "\n".join(
    f"  {name}: {', '.join(cols)}" for name, cols in FIGURE_COLUMNS.items()) + """

  fig5: mean-forecast max PV-node voltage per step and mode
  fig6: out-of-sample joint violation frequency and its standard error
  fig7: active-set size and subsets evaluated per step (wall_ms only with record_timing)
  fig8: subsets and time per Bonferroni stage summed over steps
  fig9: curtailment fraction per inverter, step and mode
  fig4: pairwise intersection estimates on nested sample prefixes

exit codes: 0 ok, 2 config or input error, 3 infeasible solve, 4 numerical failure
environment: JCCOPF_THREADS sets the worker count when --threads is not given"""


def _feeder(path):
    return bundled_feeder() if path is None else load_feeder(path)


def _series(args):
    model = _feeder(getattr(args, "feeder", None))
    if args.series:
        if not args.cov:
            raise ConfigError("--series needs --cov")
        return model, read_series(args.series, args.cov)
    return model, generate_days(DayProfile(n_nodes=model.n_nodes), args.days, args.seed, model)


def _step_inputs(args):
    model, series = _series(args)
    if not 0 <= args.t < series.n_steps:
        raise ConfigError(f"--t must lie in [0, {series.n_steps}), got {args.t}")
    forecast = series.forecast(args.t, seed=args.seed)
    return model, forecast, series.p_load[args.t], series.q_load[args.t]


def _nodes(args, default):
    return [int(k) for k in args.nodes.split(",")] if getattr(args, "nodes", None) else list(default)


def cmd_feeder_build(args) -> int:
    if args.edges is None:
        model = bundled_feeder()
    else:
        text = Path(args.edges).read_text()
        if args.edges.endswith(".csv"):
            rows = list(csv.DictReader(text.splitlines()))
            edges = [{"from": int(r["from"]), "to": int(r["to"]), "r": float(r["r"]), "x": float(r["x"])}
                     for r in rows]
        else:
            doc = json.loads(text)
            edges = doc["edges"] if isinstance(doc, dict) else doc
        model = build_sensitivities(edges, v0=args.v0)
    save_feeder(model, args.out)
    print(f"feeder with {model.n_nodes} nodes written to {args.out}")
    return 0


def cmd_scenario_gen(args) -> int:
    model = _feeder(args.feeder)
    profile = DayProfile(n_nodes=model.n_nodes) if args.forecast_sd is None else \
        DayProfile(n_nodes=model.n_nodes, forecast_sd=args.forecast_sd)
    series = generate_days(profile, args.days, args.seed, model)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_series(series, out / "series.csv")
    write_covariance(series, out / "covariance.json")
    print(f"{series.n_steps} steps written to {out}")
    return 0


def cmd_labels_gen(args) -> int:
    model, series = _series(args)
    history = series.realize(seed=args.seed)
    nodes = _nodes(args, DayProfile().pv_nodes)
    sets = generate_labels(model, history, series.p_load, series.q_load, args.v_max, nodes)
    write_labels(sets, args.out)
    n_active = sum(int((s.labels == -1).sum()) for s in sets.values())
    print(f"{len(sets)} nodes, {n_active} active labels written to {args.out}")
    return 0


def cmd_svc_train(args) -> int:
    sets = read_labels(args.labels)
    clfs = [train_wsvc(sets[k], args.weight_a, args.bias_shift, args.feature_scale)
            for k in sorted(sets)]
    save_classifiers(clfs, args.out)
    print(f"{len(clfs)} classifiers written to {args.out}")
    return 0


def _active(args, forecast, p_load) -> list[int]:
    if args.active:
        return [int(k) for k in args.active.split(",")]
    if args.classifiers:
        learner = ActiveSetLearner.from_classifiers(load_classifiers(args.classifiers))
        idx = np.asarray(learner.nodes) - 1
        return learner.active_nodes(np.column_stack([p_load[idx], forecast.mu[idx]]))
    raise ConfigError("give --active or --classifiers")


def cmd_jcc_estimate(args) -> int:
    model, forecast, p_load, q_load = _step_inputs(args)
    nodes = _nodes(args, DayProfile().pv_nodes)
    active = _active(args, forecast, p_load)
    table = build_violation_table(model, forecast, p_load, q_load, args.v_max, args.ns, nodes,
                                  stream=(pipeline.STAGE_ESTIMATE, args.t))
    budget = None if args.time_budget_ms is None else args.time_budget_ms / 1e3
    report = compute_bound(table, active, args.kmax, budget, args.max_subsets)
    save_report(report, args.out, timing=args.record_timing)
    print(f"|M|={len(active)} K={report.k_reached} B_K={report.bounds[-1] if report.bounds else 0:.6g} "
          f"Pc={report.p_c:.6g}")
    return 0


def cmd_opf_solve(args) -> int:
    model, forecast, p_load, q_load = _step_inputs(args)
    mode = canonical_mode(args.mode)
    nodes = _nodes(args, DayProfile().pv_nodes)
    alloc = None
    if mode != "deterministic":
        if not args.report:
            raise ConfigError(f"--mode {args.mode} needs --report")
        alloc = allocate_epsilon(load_report(args.report), args.epsilon, mode)
    policy = solve_p1(model, forecast, p_load, q_load, args.v_max, mode, alloc, cost=args.cost, nodes=nodes,
                      exact_sigma=args.exact_sigma)
    policy.t = args.t
    save_policies([policy], args.out)
    print(f"{mode}: status={policy.status} objective={policy.objective:.6g}")
    if policy.status == INFEASIBLE:
        print(f"infeasible at nodes {policy.violating}", file=sys.stderr)
        return pipeline.EXIT_INFEASIBLE
    return 0 if policy.status == OPTIMAL else pipeline.EXIT_NUMERICAL


def cmd_validate(args) -> int:
    model, forecast, p_load, q_load = _step_inputs(args)
    nodes = _nodes(args, DayProfile().pv_nodes)
    steps = [validate_policy(model, forecast, p_load, q_load, p.alpha, args.v_max, args.nm, nodes,
                             stream=(pipeline.STAGE_VALIDATE, args.t), t=args.t, mode=p.mode, objective=p.objective)
             for p in load_policies(args.policy)]
    write_report_csv(ValidationReport(steps), args.out)
    for s in steps:
        print(f"{s.mode}: joint violation {s.joint:.4g} (se {s.stderr:.2g})")
    return 0


def cmd_run(args) -> int:
    overrides = {"seed": args.seed, "out_dir": args.out, "threads": args.threads,
                 "time_budget_ms": args.time_budget_ms, "kmax": args.kmax, "ns": args.ns, "nm": args.nm,
                 "epsilon": args.epsilon}
    if args.mode:
        overrides["modes"] = tuple(args.mode)
    if args.config:
        cfg = RunConfig.from_file(args.config, **overrides)
    else:
        default = resources.files("jccopf").joinpath("data/default_config.json").read_text()
        cfg = RunConfig.from_dict(json.loads(default), source="default_config.json", **overrides)
    if cfg.out_dir is None:
        cfg.out_dir = "jccopf-out"
    result = pipeline.run_pipeline(cfg)
    for stage, seed in result.stage_seeds.items():
        log.info("stage %s seed %s", stage, seed)
    print(json.dumps(result.summary()["table"], indent=2))
    print(f"artifacts in {cfg.out_dir}")
    for t, mode, nodes in result.infeasible[:10]:
        print(f"infeasible: t={t} mode={mode} nodes={nodes}", file=sys.stderr)
    return result.exit_code


def cmd_report(args) -> int:
    out = Path(args.dir)
    summary = json.loads((out / "summary.json").read_text())
    for mode, row in summary["table"].items():
        print(f"{mode:>14}  objective {row['Total Objective Function Value']:.4f}  "
              f"max violation {row['Maximum Violation Probability']:.4f}")
    c = summary.get("classification", {})
    if c:
        print(f"classification: false inactive {c['false_inactive_rate']:.4f}, "
              f"false active {c['false_active_rate']:.4f}")
    if args.svg:
        _write_svgs(out)
    return 0


def _read_csv(path: Path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def _write_svgs(out: Path) -> None:
    try:
        import matplotlib
        matplotlib.use("Agg")
        import matplotlib.pyplot as plt
    except ImportError:
        raise ConfigError("--svg needs matplotlib (pip install 'artifact[plot]')") from None
    for name, col, ylabel in (("fig5_max_voltage", "max_voltage", "max voltage (pu)"),
                              ("fig6_violation", "joint_violation", "violation probability")):
        rows = _read_csv(out / f"{name}.csv")
        fig, ax = plt.subplots(figsize=(8, 3))
        for mode in dict.fromkeys(r["mode"] for r in rows):
            pts = [(int(r["t"]), float(r[col])) for r in rows if r["mode"] == mode]
            ax.plot(*zip(*pts), label=mode, lw=0.8)
        ax.set_xlabel("step")
        ax.set_ylabel(ylabel)
        ax.legend()
        fig.tight_layout()
        fig.savefig(out / f"{name}.svg")
        plt.close(fig)
    rows = _read_csv(out / "fig8_stage_time.csv")
    fig, ax = plt.subplots(figsize=(4, 3))
    ax.bar([int(r["K"]) for r in rows], [int(r["subsets"]) for r in rows])
    ax.set_xlabel("stage K")
    ax.set_ylabel("subsets evaluated")
    fig.tight_layout()
    fig.savefig(out / "fig8_stage_time.svg")
    plt.close(fig)


def _add_step_args(p, with_t: bool = True) -> None:
    p.add_argument("--feeder", help="feeder JSON (default: bundled 37-node feeder)")
    p.add_argument("--series", help="series CSV from `scenario gen`")
    p.add_argument("--cov", help="covariance JSON from `scenario gen`")
    p.add_argument("--days", type=int, default=7, help="days to synthesize when no series is given")
    p.add_argument("--seed", type=int, default=2012, help="root seed")
    p.add_argument("--v-max", type=float, default=1.05)
    p.add_argument("--nodes", help="comma-separated monitored nodes (default: PV nodes)")
    if with_t:
        p.add_argument("--t", type=int, required=True, help="time step index")


def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.RawDescriptionHelpFormatter
    ap = argparse.ArgumentParser(prog="jccopf", description="Joint chance-constrained curtailment OPF",
                                 epilog=FIGURE_HELP, formatter_class=fmt)
    ap.add_argument("-v", "--verbose", action="store_true")
    ap.add_argument("--threads", type=int, default=None, help="worker threads (fallback: JCCOPF_THREADS)")
    sub = ap.add_subparsers(dest="command", required=True)

    feeder = sub.add_parser("feeder", help="feeder model tools").add_subparsers(dest="action", required=True)
    p = feeder.add_parser("build", help="sensitivity matrices from an edge list")
    p.add_argument("--edges", help="edge list JSON or CSV (from,to,r,x); default: bundled feeder")
    p.add_argument("--v0", type=float, default=1.0)
    p.add_argument("-o", "--out", required=True)
    p.set_defaults(func=cmd_feeder_build)

    scen = sub.add_parser("scenario", help="scenario tools").add_subparsers(dest="action", required=True)
    p = scen.add_parser("gen", help="synthetic days of forecasts and loads")
    p.add_argument("--feeder")
    p.add_argument("--days", type=int, default=7)
    p.add_argument("--seed", type=int, default=2012)
    p.add_argument("--forecast-sd", type=float, default=None, help="error sd as a fraction of the solar level")
    p.add_argument("-o", "--out", required=True, help="output directory")
    p.set_defaults(func=cmd_scenario_gen)

    labels = sub.add_parser("labels", help="training labels").add_subparsers(dest="action", required=True)
    p = labels.add_parser("gen", help="active/inactive labels from a realized history")
    _add_step_args(p, with_t=False)
    p.add_argument("-o", "--out", required=True)
    p.set_defaults(func=cmd_labels_gen)

    svc = sub.add_parser("svc", help="node classifiers").add_subparsers(dest="action", required=True)
    p = svc.add_parser("train", help="one weighted classifier per node")
    p.add_argument("--labels", required=True)
    p.add_argument("--weight-a", type=float, default=10.0)
    p.add_argument("--bias-shift", type=float, default=0.0)
    p.add_argument("--feature-scale", type=float, default=1000.0)
    p.add_argument("-o", "--out", required=True)
    p.set_defaults(func=cmd_svc_train)

    jcc = sub.add_parser("jcc", help="joint chance-constraint bounds").add_subparsers(dest="action", required=True)
    p = jcc.add_parser("estimate", help="stage-committed Bonferroni bounds for one step")
    _add_step_args(p)
    p.add_argument("--active", help="comma-separated active nodes")
    p.add_argument("--classifiers", help="classifier JSON used to pick the active set")
    p.add_argument("--ns", type=int, default=10_000)
    p.add_argument("--kmax", type=int, default=None)
    p.add_argument("--time-budget-ms", type=float, default=None)
    p.add_argument("--max-subsets", type=int, default=None, help="work budget in subset evaluations")
    p.add_argument("--record-timing", action="store_true")
    p.add_argument("-o", "--out", required=True)
    p.set_defaults(func=cmd_jcc_estimate)

    opf = sub.add_parser("opf", help="curtailment OPF").add_subparsers(dest="action", required=True)
    p = opf.add_parser("solve", help="curtailment OPF for one step")
    _add_step_args(p)
    p.add_argument("--mode", choices=["det", *MODES], default="improved")
    p.add_argument("--epsilon", type=float, default=0.02)
    p.add_argument("--report", help="BoundReport JSON (boole/improved)")
    p.add_argument("--cost", type=float, default=0.10)
    p.add_argument("--exact-sigma", action="store_true")
    p.add_argument("-o", "--out", required=True)
    p.set_defaults(func=cmd_opf_solve)

    p = sub.add_parser("validate", help="Monte Carlo violation frequency of saved policies")
    _add_step_args(p)
    p.add_argument("--policy", required=True)
    p.add_argument("--nm", type=int, default=10_000)
    p.add_argument("-o", "--out", required=True)
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("run", help="full pipeline", epilog=FIGURE_HELP, formatter_class=fmt)
    p.add_argument("--config", help="RunConfig JSON (default: bundled default_config.json)")
    p.add_argument("--out", help="artifact directory")
    p.add_argument("--seed", type=int)
    p.add_argument("--mode", action="append", choices=["det", *MODES])
    p.add_argument("--epsilon", type=float)
    p.add_argument("--ns", type=int)
    p.add_argument("--nm", type=int)
    p.add_argument("--kmax", type=int)
    p.add_argument("--time-budget-ms", type=float)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("report", help="print the summary table, optionally render SVGs")
    p.add_argument("dir")
    p.add_argument("--svg", action="store_true")
    p.set_defaults(func=cmd_report)
    return ap


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        return int(args.func(args))
    except (ConfigError, FeederError, ModelError, FileNotFoundError, json.JSONDecodeError, KeyError,
            ValueError) as exc:
        detail = f"{exc.filename}: {exc.strerror}" if isinstance(exc, FileNotFoundError) else str(exc)
        print(f"jccopf: error: {detail}", file=sys.stderr)
        return pipeline.EXIT_CONFIG
    except np.linalg.LinAlgError as exc:
        print(f"jccopf: numerical failure: {exc}", file=sys.stderr)
        return pipeline.EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
