"""``homsim`` command-line entry point.

Exit codes: 0 success, 1 usage or configuration error, 2 runtime or
numerical error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import math
import os
import sys
import time
import warnings

import numpy as np

from ..exceptions import ConfigError, FitError, HOMError
from ..fitting import Dataset, FitProblem, fit_coincidence_curve, fit_dip_shape
from ..histogram import (CoincidenceHistogram, PeakContaminationWarning, build_histogram,
                         integrate_peaks, normalized_opposite_probability,
                         start_stop_differences)
from ..model import BeamSplitter
from ..montecarlo import generate_event_stream, simulate_dip_events
from ..shaping import DetectorIRF, effective_lifetime
from . import io as hio
from .config import ExperimentConfig, set_path

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2
OUT_ENV = "HOMSIM_OUT"
DEFAULT_OUT = "homsim_out"
TAU_PARAMETER = "optics.delay_offset_ps"
GATE_PARAMETERS = ("shaping.gate.fwhm_ps", "shaping.gate.delay_ps")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------

def _load_config(args):
    if not args.config:
        raise UsageError("--config is required")
    cfg = ExperimentConfig.from_file(args.config)
    if getattr(args, "seed", None) is not None:
        cfg = cfg.with_seed(args.seed)
    return cfg


def _out_dir(args, cfg=None):
    out = args.out or os.environ.get(OUT_ENV)
    if not out and cfg is not None:
        out = cfg.data["output"]["dir"]
    out = out or DEFAULT_OUT
    os.makedirs(out, exist_ok=True)
    if not os.access(out, os.W_OK):
        raise PermissionError(13, "output directory is not writable", out)
    return out


def _event_format(args, cfg):
    return args.format or cfg.data["output"]["events_format"]


def _derived_seed(seed, k):
    return int(np.random.SeedSequence([seed, k]).generate_state(1, np.uint64)[0])


_WARNED = set()


def _analyze(events, cfg):
    r = cfg.data["run"]
    h = build_histogram(events, r["bin_width_ps"], r["hist_range_ns"])
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", PeakContaminationWarning)
        areas = integrate_peaks(h, cfg.geometry)
    for w in caught:
        msg = str(w.message)
        if msg not in _WARNED:
            _WARNED.add(msg)
            print(f"warning: {msg}", file=sys.stderr)
    p, sigma = normalized_opposite_probability(areas, return_error=True)
    return h, areas, p, sigma


def _areas_dict(areas):
    return {"A": areas.A, "B1": areas.B1, "B2": areas.B2, "C_minus": areas.C_minus,
            "C_plus": areas.C_plus, "side": areas.side_total,
            "out_of_window": areas.out_of_window, "contaminated": list(areas.contaminated)}


def _geometry_dict(cfg):
    g = cfg.geometry
    return {"pump_delay_ps": g.pump_delay, "hom_delay_ps": g.hom_delay,
            "rep_period_ps": g.rep_period, "integration_halfwidth_ps": g.integration_halfwidth}


def _record(cfg, command, **kw):
    e = cfg.data["emitter"]
    return hio.ResultRecord(fingerprint=cfg.fingerprint(), command=command, seed=cfg.seed,
                            label=f"{e['scheme'] or 'custom'}/{e['line']}", scheme=e["scheme"],
                            line=e["line"], geometry=_geometry_dict(cfg),
                            qualitative=cfg.built.qualitative, **kw)


def _qualitative_note(cfg):
    if cfg.built.qualitative:
        print("note: detuning / pulse-length mapping is qualitative")


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_simulate(args):
    cfg = _load_config(args)
    out = _out_dir(args, cfg)
    fmt = _event_format(args, cfg)
    fp = cfg.fingerprint()
    t0 = time.perf_counter()
    events = generate_event_stream(cfg.simulation_config(), jobs=args.jobs)
    h, areas, p, sigma = _analyze(events, cfg)
    pairs = start_stop_differences(events, max_diff=h.range + 0.5 * h.bin_width)
    runtime = time.perf_counter() - t0
    ev_path = os.path.join(out, hio.EXTENSIONS[fmt])
    hio.write_events(ev_path, events, fmt, fp)
    hio.write_histogram(os.path.join(out, "histogram.txt"), h, fp)
    extra = {}
    if args.dip:
        extra = _write_dip(args, cfg, out, fp)
    rec = _record(cfg, "simulate", peak_areas=_areas_dict(areas), p=p, sigma_p=sigma,
                  n_events=len(events), wall_clock_s=runtime,
                  fit={"mean_overlap": events.diagnostics.get("mean_overlap"), **extra})
    rec.save(os.path.join(out, "result.json"))
    print(f"events: {len(events)}  start-stop pairs in range: {len(pairs)}  "
          f"histogram total: {h.total}")
    print(f"peaks: A={areas.A} B1={areas.B1} B2={areas.B2} C-={areas.C_minus} "
          f"C+={areas.C_plus}")
    print(f"P = A/(B1+B2) = {p:.5f} +/- {sigma:.5f}")
    print(f"runtime: {runtime:.2f} s  seed: {cfg.seed}  fingerprint: {fp}")
    _qualitative_note(cfg)
    return EXIT_OK


def _write_dip(args, cfg, out, fp):
    e = cfg.emitter
    sample = simulate_dip_events(e, cfg.data["run"]["n_pulse_pairs"],
                                 tau=cfg.geometry.delay_mismatch, polarization=args.dip,
                                 irf=cfg.built.irf, seed=cfg.seed)
    half = 8.0 * e.t1
    width = args.dip_bin_width
    h = CoincidenceHistogram.from_differences(sample.delta, width,
                                              width * math.ceil(half / width) / 1e3)
    hio.write_histogram(os.path.join(out, f"dip_{args.dip}.txt"), h, fp)
    return {"dip_polarization": args.dip, "dip_coincidences": sample.n_coincidences}


def cmd_analyze(args):
    cfg = _load_config(args)
    out = _out_dir(args, cfg)
    t0 = time.perf_counter()
    events = hio.read_events(args.events)
    if not events.is_sorted():
        events = events.sorted()
    h, areas, p, sigma = _analyze(events, cfg)
    fp = hio.read_fingerprint(args.events) or cfg.fingerprint()
    hio.write_histogram(os.path.join(out, "histogram.txt"), h, fp)
    rec = _record(cfg, "analyze", peak_areas=_areas_dict(areas), p=p, sigma_p=sigma,
                  n_events=len(events), wall_clock_s=time.perf_counter() - t0)
    rec.fingerprint = fp
    rec.save(os.path.join(out, "result.json"))
    print(f"events: {len(events)}  histogram total: {h.total}")
    print(f"P = A/(B1+B2) = {p:.5f} +/- {sigma:.5f}")
    return EXIT_OK


def _file_fingerprint(path, options):
    sha = hashlib.sha256(hio.data_payload(path))
    sha.update(json.dumps(options, sort_keys=True).encode())
    return sha.hexdigest()


def _write_fit_outputs(out, res, fp, curve_header, curve_rows, lines, prefix="fit"):
    report = "\n".join([f"# fingerprint: {fp}", f"# created: {hio.now_iso()}"] + lines) + "\n"
    with open(os.path.join(out, f"{prefix}_report.txt"), "w", encoding="utf-8") as fh:
        fh.write(report)
    hio.write_table(os.path.join(out, f"{prefix}_curve.csv"), curve_header, curve_rows, fp)
    with open(os.path.join(out, f"{prefix}_result.json"), "w", encoding="utf-8") as fh:
        fh.write(json.dumps(hio._jsonable(res), indent=2, sort_keys=True) + "\n")
    print("\n".join(lines))


def _table_fit(tau, p, sigma, groups, model, shared, reflectance, irf_fwhm, bootstrap=0,
               seed=0):
    ids = np.unique(groups)
    datasets = tuple(Dataset(tau[groups == g], p[groups == g], sigma[groups == g])
                     for g in ids)
    irf = DetectorIRF(irf_fwhm) if irf_fwhm else None
    problem = FitProblem(datasets, model, frozenset(shared),
                         BeamSplitter.from_reflectance(reflectance), irf)
    return problem, fit_coincidence_curve(problem, bootstrap=bootstrap, seed=seed), ids


def _p0_with_error(problem, res, h=1e-7):
    """P(0) of the first dataset and its delta-method error."""
    def p0(theta):
        t1, r = problem.unpack(theta)
        return problem.predict(np.array([0.0]), t1[0], r[0])[0]

    theta = res.params
    grad = np.empty(len(theta))
    for j in range(len(theta)):
        step = np.zeros(len(theta))
        step[j] = h
        grad[j] = (p0(theta + step) - p0(theta - step)) / (2 * h)
    return float(p0(theta)), float(math.sqrt(max(grad @ res.covariance @ grad, 0.0)))


def _fit_lines(res, ids):
    lines = [f"model: {res.model}", f"converged: {res.converged}  iterations: {res.n_iterations}",
             f"chi2: {res.chi2:.4f}  dof: {res.dof}  chi2_reduced: {res.chi2_reduced:.4f}"]
    for k, g in enumerate(ids):
        lines.append(f"dataset {int(g)}: T1 = {res.t1[k]:.2f} +/- {res.t1_err[k]:.2f} ps  "
                     f"T2 = {res.t2[k]:.2f} +/- {res.t2_err[k]:.2f} ps  "
                     f"T2/(2T1) = {res.indistinguishability[k]:.4f}")
    return lines


def cmd_fit(args):
    out = _out_dir(args)
    if args.mode == "table":
        cols = hio.read_table(args.data)
        for name in ("tau_ps", "P", "sigma_P"):
            if name not in cols:
                raise ConfigError(f"table lacks column {name!r}", "data")
            if not isinstance(cols[name], np.ndarray):
                raise ConfigError(f"column {name!r} is not numeric", "data")
        tau, p, sigma = cols["tau_ps"], cols["P"], cols["sigma_P"]
        groups = cols.get("dataset", np.zeros(len(tau))).astype(int)
        shared = tuple(args.shared or ())
        opts = {"mode": "table", "model": args.model, "shared": sorted(shared),
                "reflectance": args.reflectance, "irf_fwhm": args.irf_fwhm}
        fp = _file_fingerprint(args.data, opts)
        problem, res, ids = _table_fit(tau, p, sigma, groups, args.model, shared,
                                       args.reflectance, args.irf_fwhm, args.bootstrap,
                                       args.seed or 0)
        grid = np.linspace(min(tau.min(), 0.0), tau.max(), 201)
        rows = []
        t1, r = problem.unpack(res.params)
        for k, g in enumerate(ids):
            curve = problem.predict(grid, t1[k], r[k])
            rows += [(int(g), float(x), float(y)) for x, y in zip(grid, curve)]
        lines = _fit_lines(res, ids)
        p0, p0_err = _p0_with_error(problem, res)
        lines.append(f"P(0) = {p0:.6f} +/- {p0_err:.6f}")
        _write_fit_outputs(out, res.as_dict() | {"p0": p0, "p0_err": p0_err}, fp,
                           ["dataset", "tau_ps", "P_model"], rows, lines)
        return EXIT_OK
    centers, counts = hio.read_histogram(args.data)
    width = float(np.median(np.diff(centers)))
    irf = DetectorIRF(args.irf_fwhm) if args.irf_fwhm else None
    bounds = tuple(args.t2_bounds) if args.t2_bounds else None
    opts = {"mode": "dip", "polarization": args.polarization, "irf_fwhm": args.irf_fwhm,
            "t2_bounds": bounds}
    fp = _file_fingerprint(args.data, opts)
    res = fit_dip_shape(centers, counts, width, irf, args.polarization, t2_bounds=bounds)
    from ..fitting import dip_profile
    model = width * dip_profile(centers, res.t1[0], res.t2[0], res.extra["weight"], irf,
                                res.extra["amplitude"])
    w, we = res.extra["weight"], res.extra["weight_err"]
    lines = [f"mode: dip ({args.polarization} model)",
             f"T1 = {res.t1[0]:.2f} +/- {res.t1_err[0]:.2f} ps",
             f"T2 = {res.t2[0]:.2f} +/- {res.t2_err[0]:.2f} ps",
             f"interference weight = {w:.4f} +/- {we:.4f}",
             f"chi2_reduced: {res.chi2_reduced:.4f}"]
    _write_fit_outputs(out, res.as_dict(), fp, ["delta_ps", "counts", "model"],
                       list(zip(centers.tolist(), counts.tolist(), model.tolist())), lines)
    return EXIT_OK


def _run_point(cfg, jobs):
    events = generate_event_stream(cfg.simulation_config(), jobs=jobs)
    h, areas, p, sigma = _analyze(events, cfg)
    return events, areas, p, sigma


def cmd_sweep(args):
    cfg = _load_config(args)
    sweep = cfg.sweep
    if args.param:
        if not args.values:
            raise UsageError("--param needs --values")
        raw = dict(cfg.to_dict(), sweep={"parameter": args.param, "values": args.values,
                                         "fit": not args.no_fit,
                                         "model": args.model or "wavepacket"})
        cfg = ExperimentConfig(raw)
        sweep = cfg.sweep
    if sweep is None:
        raise ConfigError("no sweep block in the config and no --param given", "sweep")
    out = _out_dir(args, cfg)
    fp = cfg.fingerprint()
    param, values = sweep["parameter"], sweep["values"]
    gate_sweep = param in GATE_PARAMETERS
    base = cfg.to_dict()
    del base["sweep"]
    rows, taus, ps, sigmas = [], [], [], []
    t0 = time.perf_counter()
    for k, v in enumerate(values):
        try:
            point = ExperimentConfig(set_path(base, param, v))
            point = point.with_seed(_derived_seed(cfg.seed, k))
            events, areas, p, sigma = _run_point(point, args.jobs)
            tau = point.geometry.delay_mismatch
            row = [v, tau, p, sigma, areas.A, areas.B, len(events),
                   events.diagnostics.get("mean_overlap")]
            if gate_sweep:
                e = point.emitter
                if point.built.gate is None:
                    t1_eff = e.t1
                else:
                    t1_eff = effective_lifetime(e, point.built.gate,
                                                seed=_derived_seed(point.seed, 1)).lifetime
                row += [t1_eff, min(e.t2 / (2.0 * t1_eff), 1.0)]
        except (HOMError, ValueError) as exc:
            kind = ConfigError if isinstance(exc, ConfigError) else HOMError
            raise kind(f"sweep point {k} ({param}={v}): {exc}") from None
        rows.append(row)
        taus.append(tau)
        ps.append(p)
        sigmas.append(sigma)
        print(f"[{k + 1}/{len(values)}] {param}={v}: P = {p:.5f} +/- {sigma:.5f}")
    header = ["value", "tau_ps", "P", "sigma_P", "A", "B", "n_events", "mean_overlap"]
    if gate_sweep:
        header += ["t1_eff_ps", "ratio_eff"]
    notes = [f"parameter: {param}"]
    if cfg.built.qualitative:
        notes.append("qualitative: detuning / pulse-length mapping")
    hio.write_table(os.path.join(out, "sweep.csv"), header, rows, fp, notes)
    fit, res = {}, None
    if param == TAU_PARAMETER and sweep["fit"]:
        irf = cfg.data["shaping"]["irf"]
        try:
            problem, res, ids = _table_fit(
                np.array(taus), np.array(ps), np.array(sigmas), np.zeros(len(taus), int),
                sweep["model"], (), cfg.data["optics"]["reflectance"],
                irf["fwhm_ps"] if irf and sweep["model"] == "eq2_irf" else None)
        except FitError as exc:
            # the table is still valid; report the fit failure and keep going
            print(f"warning: sweep fit skipped: {exc}", file=sys.stderr)
    if res is not None:
        fit = res.as_dict()
        grid = np.linspace(min(taus), max(taus), 201)
        t1, r = problem.unpack(res.params)
        curve = problem.predict(grid, t1[0], r[0])
        _write_fit_outputs(out, fit, fp, ["dataset", "tau_ps", "P_model"],
                           [(0, float(x), float(y)) for x, y in zip(grid, curve)],
                           _fit_lines(res, ids), prefix="sweep_fit")
    rec = _record(cfg, "sweep", fit=fit | {"parameter": param, "values": values},
                  wall_clock_s=time.perf_counter() - t0)
    rec.save(os.path.join(out, "result.json"))
    _qualitative_note(cfg)
    return EXIT_OK


def _indistinguishability(rec):
    fit = rec.fit or {}
    ind = fit.get("indistinguishability")
    if isinstance(ind, list) and ind:
        return float(ind[0]), "fit"
    if rec.p is not None:
        return 1.0 - 2.0 * float(rec.p), "1-2P"
    return None, ""


def cmd_report(args):
    out = _out_dir(args)
    records = [hio.ResultRecord.load(p) for p in args.records]
    geoms = {json.dumps(r.geometry, sort_keys=True) for r in records}
    notes = []
    if len(geoms) > 1:
        notes.append("WARNING: records have mismatched geometry")
    if any(r.qualitative for r in records):
        notes.append("some records use the qualitative detuning / pulse-length mapping")
    header = ["label", "scheme", "line", "command", "t1_ps", "t2_ps", "indistinguishability",
              "source", "P", "sigma_P", "fingerprint"]
    rows = []
    for r in records:
        fit = r.fit or {}
        t1 = (fit.get("t1_ps") or [None])[0]
        t2 = (fit.get("t2_ps") or [None])[0]
        ind, src = _indistinguishability(r)
        rows.append([r.label, r.scheme, r.line, r.command, t1, t2, ind, src, r.p, r.sigma_p,
                     r.fingerprint[:12]])
    fp = hashlib.sha256("".join(r.fingerprint for r in records).encode()).hexdigest()
    hio.write_table(os.path.join(out, "report.csv"), header, rows, fp, notes)
    for n in notes:
        print(f"# {n}")
    widths = [max(len(_cell(x)) for x in [h] + [row[j] for row in rows])
              for j, h in enumerate(header)]
    print("  ".join(h.ljust(w) for h, w in zip(header, widths)))
    for row in rows:
        print("  ".join(_cell(x).ljust(w) for x, w in zip(row, widths)))
    return EXIT_OK


def _cell(x):
    if x is None:
        return "-"
    if isinstance(x, float):
        return f"{x:.4g}"
    return str(x)


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def _positive_int(text):
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}") from None
    if v < 1:
        raise argparse.ArgumentTypeError("must be >= 1")
    return v


def _seed(text):
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}") from None
    if not 0 <= v < 2 ** 64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return v


def _sweep_value(text):
    return None if text.lower() == "none" else float(text)


def build_parser():
    common = _Parser(add_help=False)
    common.add_argument("--config", help="experiment YAML file")
    common.add_argument("--seed", type=_seed, help="override run.seed")
    common.add_argument("--out", help=f"output directory (default: ${OUT_ENV}, "
                                      f"output.dir or ./{DEFAULT_OUT})")
    common.add_argument("--format", choices=tuple(hio.EXTENSIONS), help="event file format")
    common.add_argument("--jobs", type=_positive_int, default=1, help="worker processes")

    parser = _Parser(prog="homsim", description="Two-photon interference simulator.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("simulate", parents=[common], help="generate events and a histogram")
    p.add_argument("--dip", choices=("parallel", "orthogonal"),
                   help="also write a time-resolved peak-A histogram")
    p.add_argument("--dip-bin-width", type=float, default=10.0, help="ps")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("analyze", parents=[common], help="histogram an event file")
    p.add_argument("events")
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("fit", parents=[common], help="fit a P(tau) table or a dip histogram")
    p.add_argument("data")
    p.add_argument("--mode", choices=("table", "dip"), default="table")
    p.add_argument("--model", choices=("eq2", "eq2_irf", "wavepacket"), default="eq2")
    p.add_argument("--shared", nargs="*", choices=("t1", "t2"))
    p.add_argument("--reflectance", type=float, default=0.5)
    p.add_argument("--irf-fwhm", type=float, help="ps")
    p.add_argument("--bootstrap", type=int, default=0)
    p.add_argument("--polarization", choices=("parallel", "orthogonal"), default="parallel",
                   help="dip model")
    p.add_argument("--t2-bounds", type=float, nargs=2, metavar=("LO", "HI"))
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("sweep", parents=[common], help="run one simulation per parameter value")
    p.add_argument("--param", help="dotted parameter path (overrides the sweep block)")
    p.add_argument("--values", type=_sweep_value, nargs="+")
    p.add_argument("--model", choices=("eq2", "eq2_irf", "wavepacket"))
    p.add_argument("--no-fit", action="store_true")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("report", parents=[common], help="tabulate result records")
    p.add_argument("records", nargs="+")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None):
    try:
        args = build_parser().parse_args(argv)
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (HOMError, ArithmeticError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
