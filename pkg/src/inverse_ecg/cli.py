"""Command-line front end.  Exit codes: 0 success, 2 config error, 3 a cell failed."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .config import ConfigError, ExperimentConfig, load_config
from .evalkit import MetricReport, TrialSummary, evaluate_metrics
from .experiment import (build_domain, build_transfer, build_truth, calibrate, measurements,
                         pdl_train_config, resolve_workers, run_experiment, solve_cell,
                         summary_csv, tune_physics_weight)
from .forward_sim import FieldSeries
from .gp_tuner import write_trace
from .pdl_solver import Problem
from .transfer import save_transfer

EXIT_OK, EXIT_CONFIG, EXIT_CELL = 0, 2, 3


def _apply_overrides(cfg: ExperimentConfig, args) -> ExperimentConfig:
    if getattr(args, "trials", None) is not None:
        cfg.trials = args.trials
    if getattr(args, "seed_base", None) is not None:
        cfg.seed_base = args.seed_base
    if getattr(args, "noise", None):
        cfg.noise_levels = [float(s) for s in args.noise]
    if getattr(args, "methods", None):
        keep = set(args.methods)
        cfg.methods = [m for m in cfg.methods if m.name in keep]
        if not cfg.methods:
            raise ConfigError(f"none of the requested methods {sorted(keep)} is configured")
    if getattr(args, "out", None):
        cfg.output_dir = args.out
    cfg.validate()
    return cfg


def _method(cfg: ExperimentConfig, name: str):
    for m in cfg.methods:
        if m.name == name:
            return m
    raise ConfigError(f"method {name!r} is not in the config")


def cmd_simulate(cfg, args) -> int:
    truth = build_truth(cfg)
    out = Path(cfg.output_dir) / "truth"
    truth.save(out)
    print(f"wrote {truth.shape[0]} nodes x {truth.shape[1]} frames to {out}")
    return EXIT_OK


def cmd_make_data(cfg, args) -> int:
    out = Path(cfg.output_dir) / "data"
    out.mkdir(parents=True, exist_ok=True)
    build_truth(cfg).save(out / "truth")
    tm = build_transfer(cfg)
    save_transfer(tm, out / "transfer.csv.gz")
    for s in cfg.noise_levels:
        for t in range(cfg.trials):
            y = measurements(cfg, s, cfg.trial_seed(t))
            np.savetxt(out / f"bspm_sigma{s:g}_trial{t}.csv", y, delimiter=",", fmt="%.17g")
    print(f"transfer {tm.shape[0]}x{tm.shape[1]}, condition number {tm.condition_number:.3g}; "
          f"data in {out}")
    return EXIT_OK


def cmd_solve(cfg, args) -> int:
    m = _method(cfg, args.method)
    out = Path(cfg.output_dir) / "solve" / f"{m.name}_sigma{args.sigma:g}_trial{args.trial}"
    out.mkdir(parents=True, exist_ok=True)
    calib = calibrate(ExperimentConfig.from_dict({**cfg.to_dict(), "methods": [m.__dict__],
                                                  "noise_levels": [args.sigma]}))
    res = solve_cell(cfg, m, args.sigma, args.trial, calib, out, keep_estimate=True)
    if res.status != "ok":
        print(res.status, file=sys.stderr)
        return EXIT_CELL
    res.estimate.save(out / "estimate")
    TrialSummary(m.name, args.sigma, [res.report]).save(out / "report.json")
    print(json.dumps({"method": m.name, "RE": res.report.RE, "CC": res.report.CC,
                      "MSE": res.report.MSE, **{k: v for k, v in res.info.items()
                                                if k != "traceback"}}))
    return EXIT_OK


def cmd_tune(cfg, args) -> int:
    m = _method(cfg, args.method)
    if m.kind != "pdl":
        raise ConfigError("tune applies to the physics-constrained network method only")
    dom, truth = build_domain(cfg), build_truth(cfg)
    seed = cfg.trial_seed(args.trial)
    problem = Problem(dom, build_transfer(cfg).matrix, measurements(cfg, args.sigma, seed),
                      truth.times, cfg.model_params)
    tc = pdl_train_config(m.options, dom.dim + 1, seed)
    w_opt, trace, converged = tune_physics_weight(tc, problem, m.options)
    path = Path(cfg.output_dir) / f"{m.name}_tune_trace.csv"
    write_trace(trace, path)
    print(json.dumps({"w_opt": w_opt, "converged": converged, "iterations": len(trace),
                      "trace": str(path)}))
    return EXIT_OK


def cmd_evaluate(args) -> int:
    est = FieldSeries.load(args.estimate)
    truth = FieldSeries.load(args.truth)
    rep = evaluate_metrics(est.u, truth.u)
    doc = {"RE": rep.RE, "CC": rep.CC, "MSE": rep.MSE, "cc_rows_excluded": rep.cc_rows_excluded}
    if args.out:
        Path(args.out).write_text(json.dumps(doc, indent=2))
    print(json.dumps(doc))
    return EXIT_OK


def cmd_report(args) -> int:
    rdir = Path(args.dir) / "reports"
    if not rdir.is_dir():
        raise ConfigError(f"{rdir} does not exist; run an experiment first")
    rows = [json.loads(p.read_text()) for p in sorted(rdir.glob("*.json"))]
    summaries = []
    for r in rows:
        s = TrialSummary(r["method"], r["noise_sigma"])
        s.reports = [MetricReport(a, b, c) for a, b, c in
                     zip(r["RE"]["per_trial"], r["CC"]["per_trial"], r["MSE"]["per_trial"])]
        summaries.append(s)
    text = summary_csv(summaries)
    (Path(args.dir) / "summary.csv").write_text(text)
    print(f"{'method':<12}{'sigma':>8}{'RE':>18}{'CC':>18}")
    for r in rows:
        print(f"{r['method']:<12}{r['noise_sigma']:>8g}"
              f"{r['RE']['mean']:>10.4f} ± {r['RE']['sd']:<6.4f}"
              f"{r['CC']['mean']:>10.4f} ± {r['CC']['sd']:<6.4f}")
    return EXIT_OK


def cmd_run(cfg, args) -> int:
    result = run_experiment(cfg, resolve_workers(args.workers, cfg))
    for s in result.summaries:
        d = s.to_dict()
        print(f"{s.method:<12} sigma={s.noise_sigma:<6g} RE={d['RE']['mean']:.4f}±{d['RE']['sd']:.4f} "
              f"CC={d['CC']['mean']:.4f}")
    for c in result.failed:
        print(f"FAILED {c.method} sigma={c.noise_sigma:g} trial={c.trial}: {c.status}",
              file=sys.stderr)
    return result.exit_code


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="inverse-ecg", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    def with_config(sp):
        sp.add_argument("--config", required=True, help="experiment JSON config")
        sp.add_argument("--out", help="output directory (overrides output_dir)")
        sp.add_argument("--trials", type=int)
        sp.add_argument("--seed-base", type=int)
        sp.add_argument("--noise", nargs="+", type=float, help="noise levels")
        sp.add_argument("--methods", nargs="+", help="subset of method labels")
        sp.add_argument("--workers", type=int, help="parallel cells (overrides the environment)")
        return sp

    with_config(sub.add_parser("simulate", help="simulate ground-truth heart potentials"))
    with_config(sub.add_parser("make-data", help="write truth, transfer matrix and measurements"))
    for name, helptext in (("solve", "run one method on one cell"),
                           ("tune", "GP-UCB search for the physics weight")):
        sp = with_config(sub.add_parser(name, help=helptext))
        sp.add_argument("--method", required=True)
        sp.add_argument("--sigma", type=float, required=True)
        sp.add_argument("--trial", type=int, default=0)
    ev = sub.add_parser("evaluate", help="score an estimate directory against a truth directory")
    ev.add_argument("--estimate", required=True)
    ev.add_argument("--truth", required=True)
    ev.add_argument("--out")
    rp = sub.add_parser("report", help="rebuild summary.csv from report JSON files")
    rp.add_argument("--dir", required=True)
    with_config(sub.add_parser("run", help="full pipeline over methods x noise x trials"))
    return p


COMMANDS = {"simulate": cmd_simulate, "make-data": cmd_make_data, "solve": cmd_solve,
            "tune": cmd_tune, "run": cmd_run}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "evaluate":
            return cmd_evaluate(args)
        if args.command == "report":
            return cmd_report(args)
        cfg = _apply_overrides(load_config(args.config), args)
        return COMMANDS[args.command](cfg, args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
