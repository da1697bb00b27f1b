"""Command-line entry point ``fluorsim``."""
from __future__ import annotations

import argparse
import hashlib
import math
import sys
import warnings

import numpy as np

from . import __version__, analysis, config, detectors, experiments
from .artifacts import RunDirectory, dump_json, write_curve
from .errors import ConfigError, DomainError, InputError, NumericalError
from .physics import TWO_PI
from .rng import generator

EXIT_OK, EXIT_CONFIG, EXIT_NUMERICAL = 0, 2, 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def _floats(text):
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _linspace(text):
    v = _floats(text)
    if len(v) != 3 or v[2] < 2 or v[2] != int(v[2]):
        raise argparse.ArgumentTypeError("expected start,stop,count with count >= 2")
    return np.linspace(v[0], v[1], int(v[2]))


def _common(p, default_preset):
    p.add_argument("--preset", default=None,
                   help=f"shipped preset name (default {default_preset}); see --list-presets")
    p.add_argument("--config", default=None, help="path to a JSON config file (overrides --preset)")
    p.add_argument("--seed", type=int, default=None, help="master seed (overrides the config)")
    p.add_argument("--reps", type=int, default=None, help="repetitions (overrides the config)")
    p.add_argument("--out-dir", default="fluorsim-out", help="directory receiving all outputs")
    p.set_defaults(default_preset=default_preset)


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="fluorsim", description="Spin detection by microwave photon counting: simulator.")
    ap.add_argument("--version", action="version", version=f"fluorsim {__version__}")
    ap.add_argument("--list-presets", action="store_true", help="print shipped presets and exit")
    sub = ap.add_subparsers(dest="command", parser_class=_Parser)

    sim = sub.add_parser("simulate", help="run a simulated measurement")
    ssub = sim.add_subparsers(dest="experiment", required=True, parser_class=_Parser)
    p = ssub.add_parser("fluorescence", help="pi pulse then continuous photon counting")
    _common(p, "paper_fig2")
    p = ssub.add_parser("echo", help="Hahn echo, gated counting or homodyne")
    _common(p, "paper_fig3")
    p.add_argument("--tau", type=float, default=None, help="pulse spacing (s)")
    p = ssub.add_parser("rabi", help="Rabi oscillations versus pulse duration")
    _common(p, "paper_fig4")
    p.add_argument("--mode", choices=("fluorescence", "echo"), default="fluorescence")
    p.add_argument("--durations", type=_linspace, default=None,
                   help="start,stop,count of pulse durations (s)")
    p.add_argument("--amplitudes", type=_floats, default=[0.5, 1.0, 1.5, 2.0],
                   help="drive amplitudes in units of the pi-pulse amplitude")
    p = ssub.add_parser("t2", help="echo decay versus pulse spacing")
    _common(p, "paper_fig4")
    p.add_argument("--taus", type=_linspace, default=None, help="start,stop,count of tau (s)")
    p = ssub.add_parser("fieldsweep", help="lineshape versus static field, three detection methods")
    _common(p, "paper_fig4")
    p.add_argument("--b-res", type=float, default=0.1, help="resonant field (T)")
    p.add_argument("--fields", type=_linspace, default=None, help="start,stop,count of fields (T)")

    ch = sub.add_parser("characterize", help="detector characterization")
    csub = ch.add_subparsers(dest="target", required=True, parser_class=_Parser)
    p = csub.add_parser("smpd", help="bandwidth, efficiency, dark-count and readout budgets")
    _common(p, "paper_fig2")
    p.add_argument("--bandwidth-hz", type=float, default=2.1e6, help="synthetic detector bandwidth")
    p.add_argument("--delta-pe", type=float, default=0.8e-2, help="excess excited-state probability")

    es = sub.add_parser("estimate", help="spin-number estimation")
    esub = es.add_subparsers(dest="target", required=True, parser_class=_Parser)
    p = esub.add_parser("spins", help="ratio and amplitude methods")
    _common(p, "ratio_method")
    p.add_argument("--method", choices=("ratio", "amplitude", "both"), default="both")
    p.add_argument("--amplitude-preset", default="amplitude_method",
                   help="preset for the homodyne amplitude method")
    p.add_argument("--c-spin", type=float, default=None, help="measured spin counts (skip simulation)")
    p.add_argument("--c-e", type=float, default=None, help="measured linearized echo counts")
    p.add_argument("--echo-reps", type=int, default=20000, help="echo sequences for synthetic data")

    p = sub.add_parser("fit", help="fit a curve stored in a CSV file")
    p.add_argument("csv", help="CSV with a header row; columns x, y and optional sigma")
    p.add_argument("--model", choices=("exponential", "oscillation"), default="exponential")
    p.add_argument("--x-min", type=float, default=None, help="ignore points with x below this")
    p.add_argument("--seed", type=int, default=None, help=argparse.SUPPRESS)
    p.add_argument("--reps", type=int, default=None, help=argparse.SUPPRESS)
    p.add_argument("--preset", default=None, help=argparse.SUPPRESS)
    p.add_argument("--out-dir", default="fluorsim-out", help="directory receiving all outputs")
    return ap


# --------------------------------------------------------------------------
# helpers


def _load(args):
    if args.config:
        doc = config.load_document(args.config)
    else:
        doc = config.preset_document(args.preset or args.default_preset)
    doc = config.normalize(doc)
    if args.seed is not None:
        doc["experiment"]["seed"] = args.seed
    if args.reps is not None:
        if args.reps < 1:
            raise ConfigError("must be >= 1", "--reps")
        doc["experiment"]["repetitions"] = args.reps
    cfg = config.build_config(doc)
    return cfg, doc, config.config_hash(doc)


def _fits(**named):
    return {k: v.to_dict() for k, v in named.items() if v is not None}


def _check_fit(fit, what):
    if not fit.converged:
        raise NumericalError(f"{what} fit failed: {fit.message}")


# --------------------------------------------------------------------------
# commands


def cmd_fluorescence(args, run, cfg):
    with run.timed("simulate"):
        res = experiments.fluorescence_experiment(cfg)
    with run.timed("write"):
        detectors.write_clicks_binary(res.signal, run.path("records_signal.fsclk", "records_signal"))
        res.signal[0].to_csv(run.path("record_signal_0000.csv", "record_signal_csv"))
        if res.control is not None:
            detectors.write_clicks_binary(res.control, run.path("records_control.fsclk", "records_control"))
        res.trajectory.to_csv(run.path("trajectory.csv", "trajectory"))
        res.trace.to_csv(run.path("rate_trace.csv", "rate_trace"))
        if res.control_trace is not None:
            res.control_trace.to_csv(run.path("rate_trace_control.csv", "rate_trace_control"))
        for name, h in (("pi", res.histogram), ("control", res.control_histogram)):
            if h is not None:
                write_curve(run.path(f"histogram_{name}.csv", f"histogram_{name}"),
                            {"counts": h.values, "probability": h.probabilities,
                             "poisson_probability": h.poisson_pmf})
    _check_fit(res.fit, "fluorescence decay")
    s = res.summary()
    fits = {"decay": s.pop("fit")}
    s["snr_counts"] = (s["c_spin"] / s["count_std_pi"]) if s["c_spin"] and s["count_std_pi"] else None
    # overall efficiency: expected spin counts per excited spin
    eta = res.expected_c_spin / res.n_excited if res.n_excited > 0 else 0.0
    w0, w1 = cfg.protocol.count_window
    s["eta_overall"] = eta
    s["snr_fluorescence_formula"] = analysis.snr_fluorescence(
        min(max(eta, 0.0), 1.0), res.n_excited, cfg.smpd.dark_rate, w1 - w0)
    return fits, s, res.warnings


def cmd_echo(args, run, cfg):
    with run.timed("simulate"):
        res = experiments.echo_experiment(cfg, tau=args.tau)
    with run.timed("write"):
        res.trajectory.to_csv(run.path("trajectory.csv", "trajectory"))
        if cfg.detection_mode == "smpd":
            detectors.write_clicks_binary(res.records, run.path("records.fsclk", "records"))
            res.records[0].to_csv(run.path("record_0000.csv", "record_csv"))
            total, _ = res.records.aggregate()
            write_curve(run.path("click_probability.csv", "click_probability"),
                        {"cycle_time_s": res.records.centers,
                         "click_probability": total / len(res.records),
                         "expected_probability": res.records.probabilities})
        else:
            r0 = res.records[0]
            write_curve(run.path("homodyne_0000.csv", "homodyne"),
                        {"time_s": r0.times, "x_sqrt_photons": r0.x, "y_sqrt_photons": r0.y})
        t = res.trajectory.times
        sel = np.abs(t - res.echo_time) <= 30e-6
        write_curve(run.path("echo_trace.csv", "echo_trace"),
                    {"time_s": t[sel], "spin_flux_per_s": np.abs(res.trajectory.spin_field[sel]) ** 2})
    s = res.summary()
    if cfg.detection_mode == "smpd":
        s["snr_per_sequence"] = (s["c_echo"] / s["dc_echo"]) if s["dc_echo"] else None
    return {}, s, res.warnings


def cmd_rabi(args, run, cfg):
    durations = args.durations if args.durations is not None else np.linspace(0.5e-6, 60e-6, 40)
    a_pi = experiments.drive_amplitude(cfg, 1.0, cfg.protocol.pi_duration)
    cols = {"duration_s": durations}
    fits = {}
    freqs = []
    with run.timed("simulate"):
        for m in args.amplitudes:
            r = experiments.rabi_sweep(cfg, args.mode, durations, amplitude=m * a_pi)
            key = f"amp_{m:g}"
            cols[f"signal_{key}_counts"] = r.y
            fits[key] = r.fit.to_dict()
            freqs.append(r.derived["rabi_frequency_hz"])
    write_curve(run.path("rabi.csv", "rabi"), cols)
    amps = np.asarray(args.amplitudes) * a_pi
    slope, icept, r2 = analysis.linear_fit(amps, np.asarray(freqs)) if len(freqs) >= 2 else (None,) * 3
    write_curve(run.path("rabi_frequency.csv", "rabi_frequency"),
                {"amplitude_sqrt_photons_per_s": amps, "rabi_frequency_hz": freqs})
    return fits, {"mode": args.mode, "amplitudes_sqrt_photons_per_s": amps, "rabi_frequencies_hz": freqs,
                  "linear_slope_hz_per_amplitude": slope, "linear_intercept_hz": icept,
                  "linear_r2": r2}, []


def cmd_t2(args, run, cfg):
    taus = args.taus if args.taus is not None else np.linspace(0.25e-3, 1.5e-3, 8)
    with run.timed("simulate"):
        r = experiments.coherence_sweep(cfg, taus)
    _check_fit(r.fit, "coherence decay")
    cols = {"two_tau_s": r.x, "signal": r.y}
    if r.sigma is not None:
        cols["sigma"] = r.sigma
    write_curve(run.path("t2.csv", "t2"), cols)
    return {"decay": r.fit.to_dict()}, {"T2_s": r.derived["T2_s"],
                                        "T2_sigma_s": (2.0 if cfg.detection_mode == "smpd" else 1.0)
                                        * r.fit.sigmas.get("tau", math.nan)}, []


def cmd_fieldsweep(args, run, cfg):
    fields = args.fields if args.fields is not None else args.b_res + np.linspace(-150e-6, 150e-6, 13)
    with run.timed("simulate"):
        r = experiments.field_sweep(cfg, fields, b_res=args.b_res)
    cols = {"field_T": r.fields}
    units = {"homodyne_echo": "sqrt_photons", "smpd_echo": "clicks", "fluorescence": "counts"}
    for k, v in r.signals.items():
        cols[f"{k}_{units[k]}"] = v
    write_curve(run.path("fieldsweep.csv", "fieldsweep"), cols)
    return {}, {"peak_fields_T": r.peaks, "b_res_T": args.b_res}, []


def cmd_characterize(args, run, cfg):
    sm = cfg.smpd
    model = sm.bandwidth_model
    rng = generator(cfg.seed, 0)
    with run.timed("bandwidth"):
        xi_true = detectors.pump_for_bandwidth(model, TWO_PI * args.bandwidth_hz)
        true = detectors.BandwidthModel(model.kappa_b, model.kappa_w, model.chi_qb, model.chi_qw, xi_true)
        d = np.linspace(-TWO_PI * 3 * args.bandwidth_hz, TWO_PI * 3 * args.bandwidth_hz, 121)
        clean = detectors.smpd_efficiency_spectrum(d, d, true)
        clean = sm.eta_d * clean / clean.max()
        meas = clean + rng.normal(0.0, 0.01, d.size)
        fit, fwhm = detectors.fit_efficiency_spectrum(d, meas, model, sigma=np.full(d.size, 0.01))
        _check_fit(fit, "efficiency spectrum")
        write_curve(run.path("efficiency_spectrum.csv", "efficiency_spectrum"),
                    {"detuning_hz": d / TWO_PI, "efficiency": meas, "efficiency_model": clean})
    with run.timed("readout"):
        samples_g, samples_e = detectors.synthetic_readout(200000, rng)
        thr = detectors.readout_threshold(samples_g, samples_e)
        edges = np.linspace(min(samples_g.min(), samples_e.min()), max(samples_g.max(), samples_e.max()), 201)
        hg, _ = np.histogram(samples_g, edges)
        he, _ = np.histogram(samples_e, edges)
        write_curve(run.path("readout_histograms.csv", "readout_histograms"),
                    {"signal_bin_center": 0.5 * (edges[1:] + edges[:-1]), "count_ground": hg,
                     "count_excited": he})
    eff = detectors.efficiency_budget(sm.fidelity_e, sm.qubit_T1, sm.detect_window)
    delta_det = TWO_PI * fit.params["fwhm_hz"]
    n_th = detectors.thermal_occupancy_from_budget(args.delta_pe, sm.eta_d, delta_det, sm.qubit_T1)
    matched = detectors.smpd_efficiency_spectrum(0.0, 0.0, detectors.BandwidthModel(
        model.kappa_b, model.kappa_w, model.chi_qb, model.chi_qw, model.matched_xi()))
    results = {
        "bandwidth_fwhm_hz": fit.params["fwhm_hz"], "bandwidth_true_hz": args.bandwidth_hz,
        "xi_p_fit": fit.params["xi_p"], "xi_p_true": xi_true, "xi_p_matched": model.matched_xi(),
        "efficiency_at_matching": matched,
        "efficiency_budget": eff, "eta_d": sm.eta_d,
        "n_th_from_budget": n_th, "delta_pe": args.delta_pe,
        "readout_threshold": thr.threshold, "readout_fidelity_g": thr.fidelity_g,
        "readout_fidelity_e": thr.fidelity_e, "readout_degenerate": thr.degenerate,
        "duty_cycle": sm.duty, "p_dark_per_cycle": sm.p_dark,
    }
    return {"efficiency_spectrum": fit.to_dict()}, results, []


def cmd_estimate(args, run, cfg):
    results = {}
    notes = []
    estimates = []
    if args.method in ("ratio", "both"):
        if (args.c_spin is None) != (args.c_e is None):
            raise ConfigError("give both --c-spin and --c-e, or neither", "--c-spin")
        with run.timed("synthetic_ratio_data"):
            if args.c_spin is None:
                fl = experiments.fluorescence_experiment(cfg)
                ec = experiments.echo_experiment(cfg.with_(repetitions=args.echo_reps))
                c_spin, c_e = fl.c_spin, ec.c_e_linear
                notes += fl.warnings + ec.warnings
                results["synthetic_data"] = {"c_spin": c_spin, "c_e": c_e, "c_echo": ec.c_echo,
                                             "echo_repetitions": args.echo_reps}
            else:
                c_spin, c_e = args.c_spin, args.c_e
        with run.timed("ratio_method"):
            est = experiments.estimate_spins_ratio_method(c_spin, c_e, cfg.smpd.duty, cfg)
        results["ratio_method"] = est
        estimates.append(est["N"])
    if args.method in ("amplitude", "both"):
        doc = config.normalize(config.preset_document(args.amplitude_preset))
        doc["experiment"]["seed"] = cfg.seed
        acfg = config.build_config(doc)
        with run.timed("amplitude_method"):
            trace = experiments.homodyne_echo_trace(acfg)
            write_curve(run.path("homodyne_trace.csv", "homodyne_trace"),
                        {"time_s": trace.times, "x_sqrt_photons": trace.x, "y_sqrt_photons": trace.y})
            est = experiments.estimate_spins_amplitude_method(trace, acfg)
        results["amplitude_method"] = est
        results["amplitude_config_hash"] = config.config_hash(doc)
        estimates.append(est["N"])
    if len(estimates) == 2:
        mean, half = experiments.combine_estimates(*estimates)
        results["combined"] = {"N": mean, "N_uncertainty": half}
    return {}, results, notes


def cmd_fit(args, run):
    try:
        data = np.genfromtxt(args.csv, delimiter=",", names=True)
    except OSError as exc:
        raise InputError(f"cannot read {args.csv}: {exc}") from None
    except ValueError as exc:
        raise InputError(f"malformed CSV {args.csv}: {exc}") from None
    names = data.dtype.names
    if not names or len(names) < 2:
        raise InputError("CSV needs a header row and at least two columns")
    x = np.atleast_1d(data[names[0]]).astype(float)
    y = np.atleast_1d(data[names[1]]).astype(float)
    sig = np.atleast_1d(data[names[2]]).astype(float) if len(names) > 2 else None
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
        raise InputError("non-numeric or missing values in the CSV")
    if args.x_min is not None:
        keep = x >= args.x_min
        x, y, sig = x[keep], y[keep], (sig[keep] if sig is not None else None)
    with run.timed("fit"):
        if args.model == "exponential":
            fit = analysis.fit_exponential_curve(x, y, sig)
            model = analysis.exponential_model(x, fit.params["amplitude"], fit.params["tau"],
                                               fit.params["offset"])
        else:
            fit = analysis.fit_damped_oscillation(x, y, sig)
            pr = fit.params
            model = analysis.damped_oscillation_model(x, pr["frequency"], pr["decay_rate"],
                                                      pr["amplitude"], pr["phase"], pr["offset"])
    _check_fit(fit, args.model)
    write_curve(run.path("fit_curve.csv", "fit_curve"), {names[0]: x, names[1]: y, "model": model})
    return {args.model: fit.to_dict()}, {"n_points": int(x.size), "columns": list(names)}, []


_SIM = {"fluorescence": cmd_fluorescence, "echo": cmd_echo, "rabi": cmd_rabi, "t2": cmd_t2,
        "fieldsweep": cmd_fieldsweep}


def _dispatch(args, argv):
    if args.command == "fit":
        run = RunDirectory(args.out_dir, "fit")
        fits, results, notes = cmd_fit(args, run)
        with open(args.csv, "rb") as fh:
            h = hashlib.sha256(fh.read()).hexdigest()
        run.write_summary(h, None, None, fits, results, notes)
        run.write_manifest(h, None, argv)
        return EXIT_OK
    cfg, doc, h = _load(args)
    if args.command == "simulate":
        name, func = f"simulate {args.experiment}", _SIM[args.experiment]
    elif args.command == "characterize":
        name, func = "characterize smpd", cmd_characterize
    else:
        name, func = "estimate spins", cmd_estimate
    run = RunDirectory(args.out_dir, name)
    dump_json(doc, run.path("config.json", "config"))
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        fits, results, notes = func(args, run, cfg)
    notes = list(dict.fromkeys(list(notes) + [str(w.message) for w in caught]))
    for n in notes:
        print(f"warning: {n}", file=sys.stderr)
    run.write_summary(h, cfg.seed, cfg.repetitions, fits, results, notes)
    run.write_manifest(h, cfg.seed, argv)
    print(f"{name}: outputs in {run.root}")
    return EXIT_OK


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if args.list_presets:
        print("\n".join(config.preset_names()))
        return EXIT_OK
    if args.command is None:
        parser.print_usage(sys.stderr)
        return EXIT_CONFIG
    try:
        return _dispatch(args, argv)
    except (ConfigError, InputError, DomainError) as exc:
        print(f"fluorsim: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalError as exc:
        print(f"fluorsim: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (FloatingPointError, np.linalg.LinAlgError) as exc:
        print(f"fluorsim: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
