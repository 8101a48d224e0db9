"""Command-line driver: ``maxlab run <config.json>`` and ``maxlab emit-plots <run-dir>``.

Exit status: 0 every report passed, 2 a bound was violated, 3 a premise
could not be certified, 1 error.
"""
from __future__ import annotations

import argparse
import csv
import datetime as _dt
import json
import math
import os
import sys
import time

import numpy as np

from . import aronson as ar
from ._parallel import default_workers
from .bounds import HoelderControl, TailBoundConfig, TailDecay, tail_bound_terms
from .config import ExperimentConfig, RunRecord, defaults
from .increments import (analytic_control, fit_holder_control, ladder_design, nested_table,
                         unconditional_table)
from .process import ProcessModel, bridge_sup, make_time_grid, path_sup, sample_paths
from .rng import RandomStream
from .verify import VerificationReport, empirical_survival, fit_tail_exponent, verify_doob, verify_tail

EXIT = {"pass": 0, "bound_violation": 2, "unverified_premise": 3}


# -- helpers ---------------------------------------------------------------------------

def _fmt(x):
    if x is None:
        return ""
    if isinstance(x, (bool, np.bool_)):
        return str(bool(x)).lower()
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        return repr(float(x)) if math.isfinite(x) else ""
    return str(x)


def write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([_fmt(v) for v in r])


def _drift(spec, dim=None):
    from .flow.drift import build_drift
    if not spec:
        return None
    params = dict(spec.get("params", {}))
    if spec["name"] == "ou" and dim is not None:
        params.setdefault("dim", dim)
    return build_drift(spec["name"], **params)


def _model(cfg: ExperimentConfig) -> ProcessModel:
    m = cfg.model
    drift = _drift(m.drift, m.dim) if m.kind == "diffusion" else None
    return ProcessModel(m.kind, m.dim, m.x0, m.hurst, drift, m.noise_scale)


def _grid(cfg):
    g = cfg.grid
    return make_time_grid(g.t_start, g.t_end, g.n_steps)


def _control(cfg, model, grid, stream, workers):
    c = cfg.control
    if c.mode == "analytic":
        return analytic_control(model, c.p, grid.duration), None
    if c.mode == "given":
        return HoelderControl(c.p, c.h, c.A, "analytic", {"reason": "asserted in config"}), None
    pairs = [(grid.t_start + s, grid.t_start + t) for s, t in ladder_design(grid.duration, c.k_min, c.k_max)]
    if c.route == "nested":
        nm = model
        if c.x0_nested is not None:
            nm = ProcessModel(model.kind, model.dim, c.x0_nested, model.hurst, model.drift, model.noise_scale)
        table = nested_table(nm, pairs, c.p, c.n_outer, c.n_inner, stream.child("control"),
                             dt=grid.step, workers=workers)
    else:
        table = unconditional_table(model, grid, c.n_paths, stream.child("control"), pairs, [c.p],
                                    workers=workers)
    return fit_holder_control(table, c.p), table


def _stamp(reports, cfg):
    for r in reports.values():
        r.config_digest = cfg.digest
        r.runtime_ms = None
    return reports


# -- pipelines ---------------------------------------------------------------------------
# Each returns (reports: name -> VerificationReport, tables: name -> (header, rows)).

def run_certify_control(cfg, stream, workers):
    model, grid = _model(cfg), _grid(cfg)
    control, table = _control(cfg, model, grid, stream, workers)
    if table is None:
        raise ValueError("certify-control needs control.mode = 'fit'")
    c = cfg.control
    # validate on an independent table at the same design
    pairs = sorted({(r.s, r.t) for r in table.rows})
    if c.route == "nested":
        val = nested_table(model if c.x0_nested is None else
                           ProcessModel(model.kind, model.dim, c.x0_nested, model.hurst, model.drift,
                                        model.noise_scale),
                           pairs, c.p, c.n_outer, c.n_inner, stream.child("validate"), dt=grid.step,
                           workers=workers)
    else:
        val = unconditional_table(model, grid, c.n_paths, stream.child("validate"), pairs, [c.p],
                                  workers=workers)
    n_se = control.diagnostics["n_se"]
    rows = val.at_p(control.p)
    dts = [r.t - r.s for r in rows]
    tested = [max(r.estimate - n_se * r.se, 0.0) for r in rows]
    bound = [control.A * dt ** (control.p * control.h) for dt in dts]
    status = "pass" if all(b >= x for b, x in zip(bound, tested)) else "bound_violation"
    if not control.usable:
        status = "unverified_premise"
    rep = VerificationReport(
        "increment_control", {"model": model.describe(), "p": c.p, "route": c.route,
                              "tested_quantity": "estimate - n_se * se on a validation table",
                              "n_se": n_se},
        dts, [r.estimate for r in rows], tested, bound, status, cfg.master_seed, checked=[True] * len(rows),
        diagnostics={"control": control.as_dict(), **control.diagnostics})
    head = ["s", "t", "dt", "estimate", "se", "bound", "split"]
    trows = [(r.s, r.t, r.t - r.s, r.estimate, r.se, control.A * (r.t - r.s) ** (control.p * control.h), "fit")
             for r in table.at_p(c.p)]
    trows += [(r.s, r.t, r.t - r.s, r.estimate, r.se, b, "validate") for r, b in zip(rows, bound)]
    return {"increment_control": rep}, {"increments": (head, trows)}


def run_verify_doob(cfg, stream, workers):
    model, grid = _model(cfg), _grid(cfg)
    control, table = _control(cfg, model, grid, stream, workers)
    ens = sample_paths(model, grid, cfg.n_paths, stream.child("paths"), workers=workers)
    d = cfg.doob
    reports, rows = {}, []
    for q in d.q:
        rep = verify_doob(ens, control, q, d.window, table=table, theta=d.theta, stream=stream.child("boot", repr(q)),
                          n_boot=d.n_boot, confidence=d.confidence, workers=workers)
        reports[f"doob_q{q:g}"] = rep
        rows.append((q, rep.empirical[0], rep.upper_ci[0], rep.bound[0], rep.status))
    return reports, {"doob": (["q", "empirical", "upper_ci", "bound", "status"], rows)}


def _default_decay(model, grid):
    if model.kind == "brownian" and model.dim == 1 and float(np.abs(model.start()).max()) == 0:
        # P(|B_t| >= lam) <= 2 exp(-lam^2 / (2 T)) for t <= T
        return TailDecay(2.0, 1.0 / (2 * grid.duration), 2.0, "analytic"), True
    raise ValueError("give tail.decay for models other than 1-d Brownian motion from 0")


def run_verify_tail(cfg, stream, workers):
    model, grid = _model(cfg), _grid(cfg)
    control, table = _control(cfg, model, grid, stream, workers)
    ens = sample_paths(model, grid, cfg.n_paths, stream.child("paths"), workers=workers)
    tcfg = cfg.tail
    if tcfg.statistic == "bridge":
        if model.kind == "fbm" or model.dim != 1:
            raise ValueError("the bridge statistic needs a 1-d unit-diffusion model")
        stats = bridge_sup(ens, stream.child("bridge"))
    else:
        stats = path_sup(ens)
    if tcfg.decay:
        decay = TailDecay(tcfg.decay["alpha"], tcfg.decay["c1"], tcfg.decay["c2"], "fitted")
        certified = None
        marginals = np.linalg.norm(ens.values, axis=-1)
    else:
        decay, certified = _default_decay(model, grid)
        marginals = None
    bcfg = TailBoundConfig(tcfg.beta, tcfg.theta, tcfg.n_max)
    rep = verify_tail(ens, control, decay, bcfg, lambda_grid=tcfg.lambda_grid, statistics=stats,
                      decay_certified=certified, marginals=marginals, table=table,
                      confidence=tcfg.confidence, stream=stream)
    fine = np.linspace(0.05, float(np.max(stats)), 400)
    fit = fit_tail_exponent(empirical_survival(stats, fine, tcfg.confidence),
                            tuple(tcfg.fit_window) if tcfg.fit_window else None)
    rep.diagnostics["alpha_hat"] = fit.alpha
    rep.diagnostics["alpha_ci"] = list(fit.alpha_ci)
    rep.diagnostics["loglog_slope"] = fit.diagnostics.get("loglog_slope")
    rep.diagnostics["statistic"] = tcfg.statistic
    rep.diagnostics["survival_at_1"] = float(np.mean(stats >= 1.0))
    rows = list(zip(rep.lambda_grid, rep.empirical, rep.upper_ci, rep.bound))
    curve = empirical_survival(stats, fine, tcfg.confidence)
    fit_rows = [(x, p, lo, hi) for x, p, lo, hi in zip(curve.lambdas, curve.probs, curve.lower, curve.upper)]
    return {"sup_tail": rep}, {"tail": (["lambda", "empirical", "upper_ci", "bound"], rows),
                               "survival": (["lambda", "probability", "lower", "upper"], fit_rows)}


def run_aronson(cfg, stream, workers):
    a = cfg.aronson
    q = math.inf if a.q in ("inf", "infinity") else a.q
    regime = ar.aronson_regime(a.l, q, a.d, a.Lambda)
    m = cfg.model
    if m.kind == "brownian":
        model = ProcessModel("brownian", a.d, 0.0, noise_scale=m.noise_scale)
    else:
        model = _model(cfg)
        if model.dim != a.d:
            raise ValueError("model dimension differs from aronson.d")
    grid = _grid(cfg)
    t = grid.node(grid.index_of(a.t))
    train = sample_paths(model, grid, a.n_train, stream.child("train"), workers=workers)
    r_train = np.linalg.norm(ar._displacements(train, t), axis=1)
    edges = np.linspace(0.0, float(r_train.max()) * 1.05, a.n_bins + 1)
    fitted = ar.fit_aronson_constants(train, t, regime, edges=edges, min_count=a.min_count, slack=a.slack,
                                      confidence=a.confidence)
    test = sample_paths(model, grid, cfg.n_paths, stream.child("test"), workers=workers)
    rep = ar.density_envelope_check(test, t, fitted, edges, min_count=a.min_count, confidence=a.confidence)
    shells = ar.radial_shells(ar._displacements(test, t), edges, a.confidence)
    env = rep.bound
    rows = [(shells.edges[i], shells.edges[i + 1], shells.counts[i], shells.density[i], shells.lower[i],
             shells.upper[i], env[i]) for i in range(len(shells.counts))]
    rep.diagnostics["marginal_alpha"] = ar.marginal_alpha(regime)
    return {"aronson_density": rep}, {"shells": (["r_lo", "r_hi", "count", "density", "lower", "upper",
                                                  "envelope"], rows)}


def run_flow_converge(cfg, stream, workers):
    from .flow.drift import GridDrift, MollifierSchedule, make_drift_sequence
    from .flow.flows import (ball_lattice, cauchy_report, log_estimate_check, log_functional,
                             solve_flow_ensemble)
    f = cfg.flow
    base = _drift(f.drift)
    sched = MollifierSchedule(tuple(f.levels), f.schedule_mode, f.r0, tuple(f.eps) if f.eps else None)
    levels = make_drift_sequence(base, sched)
    grid = _grid(cfg)
    src = ball_lattice(f.r, f.n_points, base.dim)
    residual = (base, len(levels) - 1) if f.residual and not isinstance(base, GridDrift) else None
    ens = solve_flow_ensemble(levels, grid, src, f.n_noise, stream.child("noise"), labels=tuple(f.levels),
                              cap=f.cap, pairs="all", residual=residual, workers=workers)
    pairs = [(f.levels[i], f.levels[j]) for i in range(len(f.levels)) for j in range(i + 1, len(f.levels))]
    log_check, theta_rows = None, []
    if hasattr(levels[0], "difference_lp_norm"):
        idx = {n: i for i, n in enumerate(f.levels)}
        grads = [levels[idx[n]].grad_lp_norm(f.norm_p) for n, _ in pairs]
        diffs = [levels[idx[n]].difference_lp_norm(levels[idx[m]], f.norm_p) for n, m in pairs]
        log_check = log_estimate_check(ens, pairs, grads, diffs, f.r, tolerance=f.log_tolerance)
        for (n, m), th in zip(pairs, diffs):
            for fac in (0.1, 1.0, 10.0):
                v, (lo, hi) = log_functional(ens, n, m, th * fac, f.r, confidence=f.confidence)
                theta_rows.append((f"{n}-{m}", fac, th * fac, v, lo, hi))
    rep = cauchy_report(ens, f.k, f.r, max_ratio=f.max_ratio, confidence=f.confidence, log_check=log_check,
                        seed=cfg.master_seed)
    d = rep.diagnostics
    rows = [(lab, dist, lo, hi) for lab, dist, (lo, hi) in zip(d["level_pairs"], d["distances"], d["distance_ci"])]
    tables = {"cauchy": (["level_pair", "Lk_distance", "lower", "upper"], rows)}
    if theta_rows:
        tables["log_functional"] = (["level_pair", "theta_factor", "theta", "value", "lower", "upper"], theta_rows)
    return {"cauchy": rep}, tables


def run_density(cfg, stream, workers):
    from .flow.flows import ball_lattice, box_lattice, density_report, pushforward_density, solve_flow_ensemble
    s = cfg.density
    drift = _drift(s.drift)
    if s.source == "ball":
        src = ball_lattice(s.r, s.n_points, drift.dim)
    else:
        n = max(2, round(s.n_points ** (1 / drift.dim)))
        src = box_lattice([-s.r] * drift.dim, [s.r] * drift.dim, n)
    grid = _grid(cfg)
    t = grid.node(grid.index_of(s.t))
    ens = solve_flow_ensemble([drift], grid, src, s.n_noise, stream.child("noise"), noise_scale=s.noise_scale,
                              snapshot_times=(t,), workers=workers)
    pfd = pushforward_density(ens, 0, s.noise_index, src, t, bin_cells=s.bin_cells)
    rep = density_report(pfd, tol=s.tol, coverage=s.coverage, seed=cfg.master_seed,
                         params={"drift": s.drift, "source": s.source, "noise_scale": s.noise_scale})
    centres = np.stack(np.meshgrid(*[(e[1:] + e[:-1]) / 2 for e in pfd.edges], indexing="ij"), -1)
    occ = pfd.counts > 0
    rows = [tuple(centres[i]) + (pfd.density[i], pfd.lower[i], pfd.upper[i], pfd.counts[i], pfd.interior[i])
            for i in zip(*np.nonzero(occ))]
    head = [f"x{j + 1}" for j in range(drift.dim)] + ["density", "lower", "upper", "count", "interior"]
    return {"pushforward_density": rep}, {"density": (head, rows)}


PIPELINES = {"certify-control": run_certify_control, "verify-doob": run_verify_doob,
             "verify-tail": run_verify_tail, "aronson": run_aronson,
             "flow-converge": run_flow_converge, "density": run_density}


# -- run / emit ------------------------------------------------------------------------

def _now():
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")


def run(cfg: ExperimentConfig, out_dir=None, workers=None) -> RunRecord:
    """Execute the configured pipeline and write reports, tables and the run record."""
    workers = default_workers() if workers is None else workers
    out = out_dir or cfg.output_dir or os.path.join("runs", f"{cfg.kind}-{cfg.digest[:12]}")
    os.makedirs(out, exist_ok=True)
    started, t0 = _now(), time.perf_counter()
    stream = RandomStream(cfg.master_seed, (cfg.kind,))
    reports, tables = PIPELINES[cfg.kind](cfg, stream, workers)
    _stamp(reports, cfg)
    record = RunRecord(cfg.digest, cfg.kind, "pass", 0, started, "", workers=workers)
    with open(os.path.join(out, "config.json"), "w") as fh:
        fh.write(cfg.to_json())
    record.add(out, "config.json")
    for name, rep in sorted(reports.items()):
        rep.to_json(os.path.join(out, f"{name}.json"))
        record.add(out, f"{name}.json")
    for name, (head, rows) in sorted(tables.items()):
        write_csv(os.path.join(out, f"{name}.csv"), head, rows)
        record.add(out, f"{name}.csv")
    worst = max((EXIT[r.status] for r in reports.values()), default=0)
    record.exit_code = worst
    record.status = {v: k for k, v in EXIT.items()}[worst]
    record.finished = _now()
    record.timing_s = round(time.perf_counter() - t0, 3)
    record.save(out)
    return record


PLOT_SPECS = {
    # table -> list of (x column, y column, lo column, hi column, series)
    "tail": [("lambda", "empirical", None, "upper_ci", "empirical"), ("lambda", "bound", None, None, "bound")],
    "survival": [("lambda", "probability", "lower", "upper", "survival")],
    "doob": [("q", "empirical", None, "upper_ci", "empirical"), ("q", "bound", None, None, "bound")],
    "cauchy": [("level_pair", "Lk_distance", "lower", "upper", "Lk_distance")],
    "log_functional": [("theta", "value", "lower", "upper", "log_functional")],
    "shells": [("r_mid", "density", "lower", "upper", "density"), ("r_mid", "envelope", None, None, "envelope")],
    "increments": [("dt", "estimate", None, None, "estimate"), ("dt", "bound", None, None, "bound")],
}


def emit_plot_tables(run_dir) -> list[str]:
    """Long-format (x, y, lo, hi, series) CSVs for every plottable table of a run."""
    record = RunRecord.load(run_dir)
    if not record.verify(run_dir):
        raise ValueError("run directory does not match its manifest hashes")
    written = []
    for name in sorted(record.files):
        stem, ext = os.path.splitext(name)
        if ext != ".csv" or stem not in PLOT_SPECS:
            continue
        with open(os.path.join(run_dir, name), newline="") as fh:
            data = list(csv.DictReader(fh))
        if stem == "shells":
            for r in data:
                r["r_mid"] = repr((float(r["r_lo"]) + float(r["r_hi"])) / 2)
        rows = []
        for xc, yc, lc, hc, series in PLOT_SPECS[stem]:
            for r in data:
                if stem == "log_functional":
                    series_name = f"{series}:{r['level_pair']}"
                else:
                    series_name = series
                rows.append((r[xc], r[yc], r[lc] if lc else "", r[hc] if hc else "", series_name))
        path = os.path.join(run_dir, f"plot_{stem}.csv")
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["x", "y", "lo", "hi", "series"])
            w.writerows(rows)
        written.append(path)
    if not written:
        raise ValueError("nothing to plot")
    return written


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(prog="maxlab", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="cmd", required=True)
    r = sub.add_parser("run", help="run an experiment config")
    r.add_argument("config")
    r.add_argument("--seed", type=int, default=None)
    r.add_argument("--out", default=None)
    r.add_argument("--workers", type=int, default=None,
                   help="parallel workers (default: $MAXLAB_WORKERS or 1)")
    e = sub.add_parser("emit-plots", help="write long-format plot tables for a run directory")
    e.add_argument("run_dir")
    dd = sub.add_parser("defaults", help="print a fully populated config for a kind")
    dd.add_argument("kind")
    args = ap.parse_args(argv)
    try:
        if args.cmd == "run":
            with open(args.config) as fh:
                raw = json.load(fh)
            if args.seed is not None:
                raw["master_seed"] = args.seed
            cfg = ExperimentConfig.from_dict(raw)
            record = run(cfg, args.out, args.workers)
            print(f"{record.kind}: {record.status} (exit {record.exit_code})")
            return record.exit_code
        if args.cmd == "emit-plots":
            for p in emit_plot_tables(args.run_dir):
                print(p)
            return 0
        if args.cmd == "defaults":
            ExperimentConfig.from_dict({"kind": args.kind})
            print(json.dumps(defaults(args.kind), sort_keys=True, indent=2))
            return 0
    except (ValueError, KeyError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 1


if __name__ == "__main__":
    sys.exit(main())
