"""Experiment pipeline: ground truth, measurements, per-cell solves and reports.

A cell is one ``(method, noise level, trial)`` triple.  Every random draw in a
cell is seeded from ``seed_base + trial``, so cells are independent and can be
run in any order or in parallel.
"""

from __future__ import annotations

import csv
import io
import json
import os
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, fields, replace
from functools import lru_cache
from pathlib import Path

import numpy as np

from .baselines import (PkfConfig, StreConfig, pkf_solve, stre_solve, tikhonov_gamma,
                        tikhonov_solve)
from .config import ConfigError, ExperimentConfig, MethodConfig
from .evalkit import MetricReport, TrialSummary, evaluate_metrics
from .forward_sim import FieldSeries, StimulusSpec, make_bspm, simulate
from .geometry import SpatialDomain, build_grid, load_mesh
from .gp_tuner import TunerConfig, tune, write_trace
from .neuralnet import AdamConfig, NetworkSpec
from .pdl_solver import Problem, TrainConfig, predict_hsp, total_loss, train
from .transfer import TransferModel, load_transfer, synth_transfer

WORKERS_ENV = "INVERSE_ECG_WORKERS"
DEFAULT_LAM_GRID = [float(x) for x in np.logspace(-3, 0, 13)]
DEFAULT_STRE_LAM_S = [0.01, 0.03, 0.1]
DEFAULT_STRE_LAM_T = [0.01, 0.03, 0.1]


# ------------------------------------------------------------ shared inputs

def _key(obj) -> str:
    return json.dumps(obj, sort_keys=True)


@lru_cache(maxsize=8)
def _domain_cached(key: str) -> SpatialDomain:
    d = json.loads(key)
    if d["kind"] == "grid2d":
        return build_grid(d["nx"], d["ny"], d["h"])
    return load_mesh(d["mesh_path"])


def build_domain(cfg: ExperimentConfig) -> SpatialDomain:
    return _domain_cached(_key(cfg.domain.__dict__))


def build_stimulus(cfg: ExperimentConfig, domain: SpatialDomain) -> StimulusSpec:
    st = cfg.stimulus
    if st.nodes is not None:
        return StimulusSpec(tuple(st.nodes), st.onset)
    if domain.kind != "grid2d":
        raise ValueError("corner-patch stimulus needs a grid domain; list stimulus nodes instead")
    return StimulusSpec(StimulusSpec.corner_patch(domain, st.corner_size).nodes, st.onset)


@lru_cache(maxsize=8)
def _truth_cached(key: str) -> FieldSeries:
    cfg = ExperimentConfig.from_dict(json.loads(key))
    dom = build_domain(cfg)
    return simulate(dom, cfg.ap_params, build_stimulus(cfg, dom), cfg.sim.steps, cfg.sim.dt,
                    seed=cfg.seed_base, record_every=cfg.sim.record_every)


def _truth_key(cfg: ExperimentConfig) -> str:
    d = cfg.to_dict()
    return _key({k: d[k] for k in ("domain", "ap", "stimulus", "sim", "seed_base")})


def build_truth(cfg: ExperimentConfig) -> FieldSeries:
    return _truth_cached(_truth_key(cfg))


@lru_cache(maxsize=8)
def _transfer_cached(key: str) -> TransferModel:
    d = json.loads(key)
    t = d["transfer"]
    if t["path"]:
        return load_transfer(t["path"])
    dom = _domain_cached(_key(d["domain"]))
    return synth_transfer(dom, t["sensors"], t["standoff"], t["seed"], t["jitter"])


def build_transfer(cfg: ExperimentConfig) -> TransferModel:
    d = cfg.to_dict()
    tm = _transfer_cached(_key({"transfer": d["transfer"], "domain": d["domain"]}))
    if tm.matrix.shape[1] != build_domain(cfg).node_count:
        raise ValueError("transfer matrix columns do not match the domain's node count")
    return tm


def measurements(cfg: ExperimentConfig, sigma: float, seed: int) -> np.ndarray:
    return make_bspm(build_truth(cfg), build_transfer(cfg), sigma, seed)


# --------------------------------------------------------- method plumbing

TRAIN_KEYS = {f.name for f in fields(TrainConfig)} - {"network", "adam"}


def pdl_train_config(options: dict, input_width: int, seed: int) -> TrainConfig:
    opts = {k: v for k, v in options.items() if k in TRAIN_KEYS}
    w = options.get("w", 0.1)
    opts["w"] = 0.0 if w == "tune" else float(w)
    net = NetworkSpec(input_width, options.get("hidden_layers", 5), options.get("neurons", 10))
    adam = AdamConfig(lr=options.get("lr", 1e-3))
    return TrainConfig(**{**opts, "seed": seed, "colloc_seed": seed + 7919}, network=net, adam=adam)


def _calibrate_method(cfg: ExperimentConfig, m: MethodConfig, sigma: float) -> dict:
    """Oracle hyperparameters chosen against truth on a held-out noise draw."""
    opts = m.options
    if m.kind in ("tikh0", "tikh1") and opts.get("lam", "calibrate") == "calibrate":
        truth = build_truth(cfg).u
        R = build_transfer(cfg).matrix
        y = measurements(cfg, sigma, cfg.calibration_seed)
        G = tikhonov_gamma(build_domain(cfg), 0 if m.kind == "tikh0" else 1)
        grid = opts.get("lam_grid", DEFAULT_LAM_GRID)
        scores = [evaluate_metrics(tikhonov_solve(y, R, G, lam), truth).RE for lam in grid]
        return {"lam": float(grid[int(np.argmin(scores))])}
    if m.kind == "stre" and "lam_s" not in opts:
        truth = build_truth(cfg).u
        R = build_transfer(cfg).matrix
        y = measurements(cfg, sigma, cfg.calibration_seed)
        G = tikhonov_gamma(build_domain(cfg), 1)
        best = None
        for ls in opts.get("lam_s_grid", DEFAULT_STRE_LAM_S):
            for lt in opts.get("lam_t_grid", DEFAULT_STRE_LAM_T):
                sc = StreConfig(ls, lt, opts.get("window", 10))
                re = evaluate_metrics(stre_solve(y, R, G, sc), truth).RE
                if best is None or re < best[0]:
                    best = (re, ls, lt)
        return {"lam_s": best[1], "lam_t": best[2]}
    return {}


def calibrate(cfg: ExperimentConfig) -> dict:
    """``{method name: {sigma (as str): hyperparameters}}`` for every calibrated method."""
    out = {}
    for m in cfg.methods:
        per = {repr(float(s)): _calibrate_method(cfg, m, s) for s in cfg.noise_levels}
        if any(per.values()):
            out[m.name] = per
    return out


@dataclass
class CellResult:
    method: str
    noise_sigma: float
    trial: int
    seed: int
    status: str = "ok"
    report: MetricReport | None = None
    info: dict = field(default_factory=dict)
    estimate: FieldSeries | None = None


def solve_cell(cfg: ExperimentConfig, m: MethodConfig, sigma: float, trial: int,
               calib: dict | None = None, workdir: Path | None = None,
               keep_estimate: bool = False) -> CellResult:
    """Generate this cell's data, run the method, score against ground truth."""
    seed = cfg.trial_seed(trial)
    res = CellResult(m.name, float(sigma), trial, seed)
    try:
        dom = build_domain(cfg)
        truth = build_truth(cfg)
        R = build_transfer(cfg).matrix
        y = measurements(cfg, sigma, seed)
        opts = {**m.options, **((calib or {}).get(m.name, {}).get(repr(float(sigma)), {}))}
        if m.kind in ("tikh0", "tikh1"):
            G = tikhonov_gamma(dom, 0 if m.kind == "tikh0" else 1)
            U = tikhonov_solve(y, R, G, float(opts.get("lam", 1e-2)))
            est = FieldSeries(U, None, truth.dt, truth.times)
            res.info["lam"] = opts.get("lam", 1e-2)
        elif m.kind == "stre":
            sc = StreConfig(float(opts.get("lam_s", 0.03)), float(opts.get("lam_t", 0.03)),
                            int(opts.get("window", 10)), float(opts.get("tol", 1e-8)),
                            int(opts.get("max_iter", 5000)))
            U = stre_solve(y, R, tikhonov_gamma(dom, 1), sc)
            est = FieldSeries(U, None, truth.dt, truth.times)
            res.info.update(lam_s=sc.lam_s, lam_t=sc.lam_t)
        elif m.kind == "pkf":
            pk = {k: v for k, v in opts.items() if k in {f.name for f in fields(PkfConfig)}}
            pc = PkfConfig(**{"seed": seed, **pk})
            est = pkf_solve(y, R, dom, cfg.model_params, pc, truth.dt, cfg.sim.dt,
                            truth0=truth.u[:, 0], noise_sigma=sigma)
            res.info.update({k: est.meta[k] for k in ("resymmetrized", "jittered")})
        elif m.kind == "pdl":
            est, info = _solve_pdl(cfg, m, opts, dom, truth, R, y, seed, workdir)
            res.info.update(info)
        else:  # pragma: no cover - guarded by config validation
            raise ValueError(m.kind)
        res.report = evaluate_metrics(est.u, truth.u)
        if keep_estimate:
            res.estimate = est
    except Exception as exc:  # a failed cell must not stop the sweep
        res.status = f"failed: {type(exc).__name__}: {exc}"
        res.info["traceback"] = traceback.format_exc()
    return res


def tune_physics_weight(tc: TrainConfig, problem: Problem, opts: dict):
    """GP-UCB search for ``w`` using shortened training runs (``tune_fraction`` of the epochs)."""
    tcfg = TunerConfig(**opts.get("tune", {}))
    short = max(1, int(round(tc.epochs * float(opts.get("tune_fraction", 0.25)))))

    def objective(w):
        _, hist = train(replace(tc, w=w, epochs=short), problem)
        return _last_breakdown(hist)

    return tune(objective, tcfg)


def _solve_pdl(cfg, m, opts, dom, truth, R, y, seed, workdir):
    tc = pdl_train_config(opts, dom.dim + 1, seed)
    problem = Problem(dom, R, y, truth.times, cfg.model_params)
    info = {}
    if opts.get("w") == "tune":
        w_opt, trace, converged = tune_physics_weight(tc, problem, opts)
        info.update(w_opt=w_opt, tune_converged=converged, tune_iterations=len(trace))
        if workdir:
            write_trace(trace, Path(workdir) / f"{m.name}_tune_trace_seed{seed}.csv")
        tc = replace(tc, w=w_opt)
    log = Path(workdir) / f"{m.name}_train_seed{seed}.jsonl" if workdir else None
    if log and log.exists():
        log.unlink()
    state, hist = train(tc, problem, log_path=log)
    info.update(w=tc.w, epochs=tc.epochs, final_L_total=hist[-1]["L_total"])
    return predict_hsp(state, dom, truth.times), info


def _last_breakdown(history):
    r = history[-1]
    return total_loss(r["L_hb"], r["L_bc"], r["L_f"], r["w"])


# ------------------------------------------------------------------ runner

def resolve_workers(flag: int | None, cfg: ExperimentConfig | None = None) -> int:
    """``--workers`` flag, else the environment variable, else the config value."""
    if flag is not None:
        return max(1, int(flag))
    env = os.environ.get(WORKERS_ENV)
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise ConfigError(f"{WORKERS_ENV} must be an integer, got {env!r}") from None
    return cfg.workers if cfg is not None else 1


def _cell_job(args):
    cfg, m, sigma, trial, calib, workdir = args
    return solve_cell(cfg, m, sigma, trial, calib, workdir)


@dataclass
class ExperimentResult:
    cells: list[CellResult]
    summaries: list[TrialSummary]
    calibration: dict

    @property
    def failed(self) -> list[CellResult]:
        return [c for c in self.cells if c.status != "ok"]

    @property
    def exit_code(self) -> int:
        return 3 if self.failed else 0

    def summary(self, method: str, sigma: float) -> TrialSummary:
        for s in self.summaries:
            if s.method == method and s.noise_sigma == float(sigma):
                return s
        raise KeyError((method, sigma))


def summary_csv(summaries: list[TrialSummary]) -> str:
    buf = io.StringIO()
    wr = csv.writer(buf, lineterminator="\n")
    wr.writerow(["method", "noise_sigma", "trials", "RE_mean", "RE_sd", "CC_mean", "CC_sd",
                 "MSE_mean", "MSE_sd"])
    for s in summaries:
        d = s.to_dict()
        wr.writerow([s.method, repr(s.noise_sigma), d["trials"],
                     *(repr(d[k][stat]) for k in ("RE", "CC", "MSE") for stat in ("mean", "sd"))])
    return buf.getvalue()


def cells_csv(cells: list[CellResult]) -> str:
    buf = io.StringIO()
    wr = csv.writer(buf, lineterminator="\n")
    wr.writerow(["method", "noise_sigma", "trial", "seed", "status", "RE", "CC", "MSE"])
    for c in cells:
        r = c.report
        wr.writerow([c.method, repr(c.noise_sigma), c.trial, c.seed, c.status,
                     *((repr(r.RE), repr(r.CC), repr(r.MSE)) if r else ("", "", ""))])
    return buf.getvalue()


def run_experiment(cfg: ExperimentConfig, workers: int | None = None,
                   write: bool = True) -> ExperimentResult:
    out = Path(cfg.output_dir)
    workdir = out / "logs" if write else None
    if write:
        workdir.mkdir(parents=True, exist_ok=True)
        cfg.save(out / "config.json")
    calib = calibrate(cfg)
    jobs = [(cfg, m, float(s), t, calib, workdir)
            for m in cfg.methods for s in cfg.noise_levels for t in range(cfg.trials)]
    n = resolve_workers(workers, cfg)
    if n > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=n) as pool:
            cells = list(pool.map(_cell_job, jobs))
    else:
        cells = [_cell_job(j) for j in jobs]
    summaries = []
    for m in cfg.methods:
        for s in cfg.noise_levels:
            ok = [c for c in cells if c.method == m.name and c.noise_sigma == float(s)
                  and c.report is not None]
            if ok:
                summaries.append(TrialSummary(m.name, float(s), [c.report for c in ok]))
    result = ExperimentResult(cells, summaries, calib)
    if write:
        for s in summaries:
            s.save(out / "reports" / f"{s.method}_sigma{s.noise_sigma:g}.json")
        (out / "summary.csv").write_text(summary_csv(summaries))
        (out / "cells.csv").write_text(cells_csv(cells))
        (out / "calibration.json").write_text(json.dumps(calib, indent=2, sort_keys=True))
        failures = {f"{c.method}/{c.noise_sigma:g}/{c.trial}": c.info.get("traceback", c.status)
                    for c in result.failed}
        if failures:
            (out / "failures.json").write_text(json.dumps(failures, indent=2))
    return result
