"""JSON configuration documents: schema, unit handling, hashing and presets."""
from __future__ import annotations

import hashlib
import json
import math
from importlib import resources
from pathlib import Path

from .detectors import BandwidthModel, SmpdParams
from .errors import ConfigError, FluorsimError
from .experiments import ExperimentConfig, HomodyneParams, ProtocolParams
from .physics import TWO_PI, EnsembleConfig, ResonatorParams

SECTIONS = ("resonator", "ensemble", "smpd", "experiment")

# unit suffix -> (label, factor from file value to internal value)
_UNITS = {
    "_hz": ("Hz", TWO_PI),
    "_hz_per_t": ("Hz/T", TWO_PI),
    "_s": ("s", 1.0),
    "_per_s": ("1/s", 1.0),
    "_per_krad_s": ("spins per krad/s", 1e-3),
}
# suffixes that signal a unit other than the declared one
_FOREIGN = ("_rad_s", "_rad_per_s", "_khz", "_mhz", "_ghz", "_ms", "_us", "_ns", "_per_ms",
            "_per_us", "_per_khz", "_hz", "_s", "_per_s", "_t", "_mt", "_hz_per_t", "_per_krad_s")

_NUM, _INT, _BOOL, _STR, _PAIR = "number", "integer", "boolean", "string", "pair"

REQUIRED = object()

# key -> (kind, default, nullable); REQUIRED marks keys without a default
SCHEMA = {
    "resonator": {
        "frequency_hz": (_NUM, REQUIRED, False),
        "kappa_i_hz": (_NUM, REQUIRED, False),
        "kappa_c_hz": (_NUM, REQUIRED, False),
    },
    "ensemble": {
        "rho_spin_per_krad_s": (_NUM, REQUIRED, False),
        "g0_mean_hz": (_NUM, REQUIRED, False),
        "g0_sigma_hz": (_NUM, 25.0, False),
        "T1_nonradiative_s": (_NUM, 4.3, True),
        "T2_s": (_NUM, 2.7e-3, True),
        "detuning_span_hz": (_NUM, None, True),
        "n_freq_bins": (_INT, None, True),
        "n_g_bins": (_INT, 21, False),
        "line_center_hz": (_NUM, 0.0, False),
        "line_fwhm_hz": (_NUM, None, True),
    },
    "smpd": {
        "eta_d": (_NUM, 0.53, False),
        "cycle_period_s": (_NUM, 11.7e-6, False),
        "duty": (_NUM, 0.43, False),
        "dead_time_s": (_NUM, 200e-6, False),
        "dark_rate_per_s": (_NUM, 1.53e3, False),
        "qubit_T1_s": (_NUM, 8.1e-6, False),
        "fidelity_g": (_NUM, 0.992, False),
        "fidelity_e": (_NUM, 0.71, False),
        "kappa_b_per_s": (_NUM, 13.7e6, False),
        "kappa_w_per_s": (_NUM, 2.8e6, False),
        "chi_qb_hz": (_NUM, -3.5e6, False),
        "chi_qw_hz": (_NUM, -8.1e6, False),
        "xi_p": (_NUM, None, True),
    },
    "experiment": {
        "detection_mode": (_STR, "smpd", False),
        "repetitions": (_INT, 500, False),
        "repetition_delay_s": (_NUM, 0.0, False),
        "seed": (_INT, 0, False),
        "line_efficiency": (_NUM, 0.315, False),
        "dt_s": (_NUM, 20e-9, False),
        "fine_step_s": (_NUM, 20e-9, False),
        "pi_duration_s": (_NUM, 5.5e-6, False),
        "pi_rotation": (_NUM, 1.0, False),
        "record_duration_s": (_NUM, 2.0, False),
        "bin_width_s": (_NUM, 19e-3, False),
        "fit_t_min_s": (_NUM, 46.8e-3, False),
        "count_window_s": (_PAIR, [46.8e-3, 586.8e-3], False),
        "control_interleaved": (_BOOL, True, False),
        "tls_rate_per_s": (_NUM, 0.0, False),
        "tls_tau_s": (_NUM, 20e-3, False),
        "echo_tau_s": (_NUM, 350e-6, False),
        "half_duration_s": (_NUM, 5.5e-6, False),
        "half_rotation": (_NUM, 0.5, False),
        "refocus_duration_s": (_NUM, 5.5e-6, False),
        "refocus_rotation": (_NUM, 1.0, False),
        "baseline_end_s": (_NUM, 1e-3, False),
        "gamma_eff_hz_per_t": (_NUM, 25e9, False),
        "homodyne_mode_duration_s": (_NUM, 0.5e-6, False),
    },
}

def _unit(key):
    for suf in sorted(_UNITS, key=len, reverse=True):
        if key.endswith(suf):
            return suf
    return None


def _stem(key):
    for suf in sorted(_FOREIGN, key=len, reverse=True):
        if key.endswith(suf):
            return key[: -len(suf)]
    return key


def parse_json(text, source="<config>"):
    """Parse a JSON document; syntax errors report line and column."""
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"parse error at line {exc.lineno} column {exc.colno} "
                          f"(char {exc.pos}): {exc.msg}", source) from None


def _check_value(path, kind, nullable, v):
    if v is None:
        if nullable:
            return None
        raise ConfigError("must not be null", path)
    if isinstance(v, str) and kind != _STR:
        raise ConfigError(f"unit mismatch: expected a bare number, got string {v!r}", path)
    if kind == _BOOL:
        if not isinstance(v, bool):
            raise ConfigError("must be a boolean", path)
        return v
    if kind == _STR:
        if not isinstance(v, str):
            raise ConfigError("must be a string", path)
        return v
    if kind == _INT:
        if isinstance(v, bool) or not isinstance(v, int):
            raise ConfigError("must be an integer", path)
        return v
    if kind == _PAIR:
        if not (isinstance(v, list) and len(v) == 2):
            raise ConfigError("must be a two-element list", path)
        return [_check_value(f"{path}[{i}]", _NUM, False, x) for i, x in enumerate(v)]
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise ConfigError("must be a number", path)
    if not math.isfinite(v):
        raise ConfigError("must be finite", path)
    return float(v)


def normalize(doc) -> dict:
    """Validate a config document and fill defaults (file units kept)."""
    if not isinstance(doc, dict):
        raise ConfigError("top level must be an object", "<root>")
    out = {}
    for sec in doc:
        if sec not in SCHEMA:
            raise ConfigError(f"unknown section (expected one of {list(SECTIONS)})", sec)
    for sec, fields in SCHEMA.items():
        given = doc.get(sec, {})
        if not isinstance(given, dict):
            raise ConfigError("section must be an object", sec)
        stems = {_stem(k): k for k in fields}
        for k in given:
            if k in fields:
                continue
            path = f"{sec}.{k}"
            expected = stems.get(_stem(k))
            if expected is not None:
                suf = _unit(expected)
                unit = _UNITS[suf][0] if suf else "dimensionless"
                raise ConfigError(f"unit mismatch: expected key '{expected}' ({unit})", path)
            raise ConfigError("unknown key", path)
        sec_out = {}
        for k, (kind, default, nullable) in fields.items():
            path = f"{sec}.{k}"
            if k in given:
                sec_out[k] = _check_value(path, kind, nullable, given[k])
            elif default is REQUIRED:
                raise ConfigError("missing required key", path)
            else:
                sec_out[k] = default
        out[sec] = sec_out
    return out


def _angular(v, key):
    suf = _unit(key)
    return v * _UNITS[suf][1] if suf else v


def build_config(doc) -> ExperimentConfig:
    """Convert a (possibly partial) document to an :class:`ExperimentConfig`."""
    d = normalize(doc)

    def val(sec, key, inf_if_null=False):
        v = d[sec][key]
        if v is None:
            return math.inf if inf_if_null else None
        if isinstance(v, list):
            return tuple(_angular(x, key) for x in v)
        if isinstance(v, (bool, str, int)) and not isinstance(v, float):
            return v
        return _angular(v, key)

    r, e, s, x = (lambda k, inf=False, _s=sec: val(_s, k, inf) for sec in SECTIONS)
    try:
        for k in ("kappa_i_hz", "kappa_c_hz"):
            if not r(k) > 0:
                raise ConfigError("must be > 0", f"resonator.{k}")
        res = ResonatorParams(r("frequency_hz"), r("kappa_i_hz"), r("kappa_c_hz"))
        ens = EnsembleConfig(
            rho_spin=e("rho_spin_per_krad_s"), g0_mean=e("g0_mean_hz"), g0_sigma=e("g0_sigma_hz"),
            T1_nonradiative=e("T1_nonradiative_s", True), T2=e("T2_s", True),
            detuning_span=e("detuning_span_hz"), n_freq_bins=e("n_freq_bins"),
            n_g_bins=e("n_g_bins"), line_center=e("line_center_hz"),
            line_fwhm=e("line_fwhm_hz", True))
        period = s("cycle_period_s")
        if not 0 < s("duty") < 1:
            raise ConfigError("must be in (0, 1)", "smpd.duty")
        for k in ("fidelity_g", "fidelity_e"):
            if not 0 < s(k) <= 1:
                raise ConfigError("must be in (0, 1]", f"smpd.{k}")
        if not s("qubit_T1_s") > 0:
            raise ConfigError("must be > 0", "smpd.qubit_T1_s")
        bw = BandwidthModel(kappa_b=s("kappa_b_per_s"), kappa_w=s("kappa_w_per_s"),
                            chi_qb=s("chi_qb_hz"), chi_qw=s("chi_qw_hz"), xi_p=s("xi_p"))
        smpd = SmpdParams(eta_d=s("eta_d"), cycle_period=period, detect_window=s("duty") * period,
                          dead_time_after_pulse=s("dead_time_s"), dark_rate=s("dark_rate_per_s"),
                          bandwidth_model=bw, qubit_T1=s("qubit_T1_s"), fidelity_g=s("fidelity_g"),
                          fidelity_e=s("fidelity_e"))
        if not x("homodyne_mode_duration_s") > 0:
            raise ConfigError("must be > 0", "experiment.homodyne_mode_duration_s")
        hom = HomodyneParams(integration_bandwidth=1.0 / x("homodyne_mode_duration_s"))
        proto = ProtocolParams(
            line_efficiency=x("line_efficiency"), dt=x("dt_s"), fine_step=x("fine_step_s"),
            pi_duration=x("pi_duration_s"), pi_rotation=x("pi_rotation"),
            record_duration=x("record_duration_s"), bin_width=x("bin_width_s"),
            fit_t_min=x("fit_t_min_s"), count_window=x("count_window_s"),
            control_interleaved=x("control_interleaved"), tls_rate=x("tls_rate_per_s"),
            tls_tau=x("tls_tau_s"), echo_tau=x("echo_tau_s"), half_duration=x("half_duration_s"),
            half_rotation=x("half_rotation"), refocus_duration=x("refocus_duration_s"),
            refocus_rotation=x("refocus_rotation"), baseline_end=x("baseline_end_s"),
            gamma_eff=x("gamma_eff_hz_per_t"))
        return ExperimentConfig(res, ens, smpd, hom, proto, repetitions=x("repetitions"),
                                repetition_delay=x("repetition_delay_s"), seed=x("seed"),
                                detection_mode=x("detection_mode"))
    except ConfigError as exc:
        raise _file_key_error(exc) from None
    except FluorsimError as exc:
        raise ConfigError(str(exc), "<config>") from None


# internal field paths that differ from the document key beyond a unit suffix
_KEY_MAP = {
    "ensemble.rho_spin": "ensemble.rho_spin_per_krad_s",
    "ensemble.T2": "ensemble.T2_s",
    "smpd.detect_window": "smpd.duty",
    "smpd.dead_time_after_pulse": "smpd.dead_time_s",
    "homodyne.integration_bandwidth_hz": "experiment.homodyne_mode_duration_s",
}


def _file_key_error(exc: ConfigError) -> ConfigError:
    """Re-express an error raised on an internal field with its document key path."""
    path = exc.key_path or "<config>"
    msg = str(exc)
    if exc.key_path and msg.startswith(exc.key_path + ": "):
        msg = msg[len(exc.key_path) + 2:]
    if path in _KEY_MAP:
        path = _KEY_MAP[path]
    elif "." in path:
        sec, key = path.split(".", 1)
        fields = SCHEMA.get(sec, {})
        if key not in fields:
            for suf in sorted(_UNITS, key=len):
                if key + suf in fields:
                    path = f"{sec}.{key}{suf}"
                    break
    return ConfigError(msg, path)


def _exact_inverse(v, factor):
    """File value ``f`` with ``f * factor == v`` exactly when one exists nearby."""
    if factor == 1.0:
        return v
    f = v / factor
    if f * factor == v:
        return f
    for direction in (math.inf, -math.inf):
        g = f
        for _ in range(4):
            g = math.nextafter(g, direction)
            if g * factor == v:
                return g
    return f


def config_to_dict(cfg: ExperimentConfig) -> dict:
    """Document (file units) that loads back to ``cfg``."""
    res, ens, sm, p = cfg.resonator, cfg.ensemble, cfg.smpd, cfg.protocol
    bw = sm.bandwidth_model

    def hz(v):
        return _exact_inverse(v, TWO_PI)

    def opt(v, conv=lambda z: z):
        return None if v is None or (isinstance(v, float) and math.isinf(v)) else conv(v)

    duty = _exact_inverse(sm.detect_window, sm.cycle_period)
    doc = {
        "resonator": {"frequency_hz": hz(res.omega0), "kappa_i_hz": hz(res.kappa_i),
                      "kappa_c_hz": hz(res.kappa_c)},
        "ensemble": {
            "rho_spin_per_krad_s": _exact_inverse(ens.rho_spin, 1e-3),
            "g0_mean_hz": hz(ens.g0_mean), "g0_sigma_hz": hz(ens.g0_sigma),
            "T1_nonradiative_s": opt(ens.T1_nonradiative), "T2_s": opt(ens.T2),
            "detuning_span_hz": opt(ens.detuning_span, hz), "n_freq_bins": ens.n_freq_bins,
            "n_g_bins": ens.n_g_bins, "line_center_hz": hz(ens.line_center),
            "line_fwhm_hz": opt(ens.line_fwhm, hz)},
        "smpd": {
            "eta_d": sm.eta_d, "cycle_period_s": sm.cycle_period, "duty": duty,
            "dead_time_s": sm.dead_time_after_pulse, "dark_rate_per_s": sm.dark_rate,
            "qubit_T1_s": sm.qubit_T1, "fidelity_g": sm.fidelity_g, "fidelity_e": sm.fidelity_e,
            "kappa_b_per_s": bw.kappa_b, "kappa_w_per_s": bw.kappa_w,
            "chi_qb_hz": hz(bw.chi_qb), "chi_qw_hz": hz(bw.chi_qw), "xi_p": bw.xi_p},
        "experiment": {
            "detection_mode": cfg.detection_mode, "repetitions": cfg.repetitions,
            "repetition_delay_s": cfg.repetition_delay, "seed": cfg.seed,
            "line_efficiency": p.line_efficiency, "dt_s": p.dt, "fine_step_s": p.fine_step,
            "pi_duration_s": p.pi_duration, "pi_rotation": p.pi_rotation,
            "record_duration_s": p.record_duration, "bin_width_s": p.bin_width,
            "fit_t_min_s": p.fit_t_min, "count_window_s": list(p.count_window),
            "control_interleaved": p.control_interleaved, "tls_rate_per_s": p.tls_rate,
            "tls_tau_s": p.tls_tau, "echo_tau_s": p.echo_tau, "half_duration_s": p.half_duration,
            "half_rotation": p.half_rotation, "refocus_duration_s": p.refocus_duration,
            "refocus_rotation": p.refocus_rotation, "baseline_end_s": p.baseline_end,
            "gamma_eff_hz_per_t": hz(p.gamma_eff),
            "homodyne_mode_duration_s": 1.0 / cfg.homodyne.integration_bandwidth},
    }
    return doc


def canonical_json(doc) -> str:
    """Key-sorted compact JSON used for hashing."""
    return json.dumps(doc, sort_keys=True, separators=(",", ":"), allow_nan=False)


def config_hash(doc_or_cfg) -> str:
    """SHA-256 of the normalized document; independent of key order."""
    if isinstance(doc_or_cfg, ExperimentConfig):
        doc = normalize(config_to_dict(doc_or_cfg))
    else:
        doc = normalize(doc_or_cfg)
    return hashlib.sha256(canonical_json(doc).encode()).hexdigest()


def load_document(path) -> dict:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read file ({exc.strerror})", str(path)) from None
    return parse_json(text, str(path))


def load_config(path) -> ExperimentConfig:
    """Read and validate a JSON config file."""
    return build_config(load_document(path))


def preset_names():
    files = resources.files("fluorsim").joinpath("presets")
    return sorted(f.name[:-5] for f in files.iterdir() if f.name.endswith(".json"))


def preset_document(name) -> dict:
    """Document of a shipped preset (name with or without ``.json``)."""
    stem = name[:-5] if name.endswith(".json") else name
    if stem not in preset_names():
        raise ConfigError(f"unknown preset (available: {', '.join(preset_names())})", "--preset")
    text = resources.files("fluorsim").joinpath("presets", stem + ".json").read_text()
    return parse_json(text, f"preset {stem}")


def load_preset(name) -> ExperimentConfig:
    return build_config(preset_document(name))
