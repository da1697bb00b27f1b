"""Measurement protocols: fluorescence, echo, relaxation and coherence sweeps, spin counting."""
from __future__ import annotations

from collections import OrderedDict
from collections.abc import Sequence
from dataclasses import dataclass, field, replace
import math
import warnings

import numpy as np

from . import analysis
from .detectors import (ClickRecord, HomodyneRecord, SmpdParams, blind_cycles, click_probability,
                        cycle_centers, draw_clicks, expected_photons, homodyne_detect)
from .dynamics import (DEFAULT_DT, PulseSegment, PulseSequence, Trajectory, driven_blocks,
                       echo_envelope_width, evolve_packets, integrate_windows, rabi_pi_amplitude,
                       time_grid)
from .errors import ConfigError, EstimationError, InputError
from .physics import (TWO_PI, EnsembleConfig, PacketGrid, ResonatorParams, discretize_ensemble,
                      packet_rates)
from .rng import generator, map_ordered


# --------------------------------------------------------------------------
# configuration


@dataclass(frozen=True)
class HomodyneParams:
    """Phase-sensitive detection chain.

    ``integration_bandwidth`` (1/s) sets the temporal mode width; the line
    efficiency is shared with the counter (``ProtocolParams.line_efficiency``).
    """

    integration_bandwidth: float = 2.0e6

    def __post_init__(self):
        if not self.integration_bandwidth > 0:
            raise ConfigError("must be > 0", "homodyne.integration_bandwidth_hz")


@dataclass(frozen=True)
class ProtocolParams:
    """Pulse timings and analysis windows.

    Rotations are in units of pi for the mean coupling on resonance.
    """

    line_efficiency: float = 0.315
    dt: float = DEFAULT_DT
    pi_duration: float = 5.5e-6
    pi_rotation: float = 1.0
    record_duration: float = 2.0
    bin_width: float = 19e-3
    fit_t_min: float = 46.8e-3
    count_window: tuple = (46.8e-3, 586.8e-3)
    control_interleaved: bool = True
    tls_rate: float = 0.0
    tls_tau: float = 20e-3
    echo_tau: float = 350e-6
    half_duration: float = 5.5e-6
    half_rotation: float = 0.5
    refocus_duration: float = 5.5e-6
    refocus_rotation: float = 1.0
    baseline_end: float = 1e-3
    gamma_eff: float = TWO_PI * 25e9
    fine_step: float = 20e-9

    def __post_init__(self):
        if not 0 <= self.line_efficiency <= 1:
            raise ConfigError("must be in [0, 1]", "experiment.line_efficiency")
        for name in ("pi_duration", "half_duration", "refocus_duration", "record_duration",
                     "bin_width", "echo_tau", "baseline_end", "dt", "fine_step", "tls_tau",
                     "gamma_eff"):
            if not getattr(self, name) > 0:
                raise ConfigError("must be > 0", f"experiment.{name}")
        for name in ("pi_rotation", "half_rotation", "refocus_rotation", "tls_rate", "fit_t_min"):
            if not getattr(self, name) >= 0:
                raise ConfigError("must be >= 0", f"experiment.{name}")
        w0, w1 = self.count_window
        if not 0 <= w0 <= w1 <= self.record_duration:
            raise ConfigError("must satisfy 0 <= start <= end <= record_duration",
                              "experiment.count_window_s")
        object.__setattr__(self, "count_window", (float(w0), float(w1)))


@dataclass(frozen=True)
class ExperimentConfig:
    """Full description of a simulated measurement."""

    resonator: ResonatorParams
    ensemble: EnsembleConfig
    smpd: SmpdParams = field(default_factory=SmpdParams)
    homodyne: HomodyneParams = field(default_factory=HomodyneParams)
    protocol: ProtocolParams = field(default_factory=ProtocolParams)
    repetitions: int = 1
    repetition_delay: float = 0.0
    seed: int = 0
    detection_mode: str = "smpd"

    def __post_init__(self):
        if not self.repetitions >= 1:
            raise ConfigError("must be >= 1", "experiment.repetitions")
        if not self.repetition_delay >= 0:
            raise ConfigError("must be >= 0", "experiment.repetition_delay_s")
        if self.detection_mode not in ("smpd", "homodyne"):
            raise ConfigError("must be 'smpd' or 'homodyne'", "experiment.detection_mode")

    def with_(self, **kw) -> "ExperimentConfig":
        """Copy with top-level fields or ``section__field`` entries replaced."""
        top = {}
        sections = {}
        for k, v in kw.items():
            if "__" in k:
                sec, name = k.split("__", 1)
                sections.setdefault(sec, {})[name] = v
            else:
                top[k] = v
        for sec, vals in sections.items():
            top[sec] = replace(top.get(sec, getattr(self, sec)), **vals)
        return replace(self, **top)


@dataclass(frozen=True)
class SweepSpec:
    """One-dimensional sweep.

    ``overrides`` maps a value index to ``ExperimentConfig.with_`` keywords.
    """

    variable: str
    values: tuple
    overrides: dict = field(default_factory=dict)

    VARIABLES = ("field", "pulse_duration", "pulse_amplitude", "tau")

    def __post_init__(self):
        if self.variable not in self.VARIABLES:
            raise ConfigError(f"must be one of {self.VARIABLES}", "sweep.variable")
        object.__setattr__(self, "values", tuple(float(v) for v in self.values))
        if not self.values:
            raise ConfigError("must be nonempty", "sweep.values")

    def configs(self, cfg: ExperimentConfig):
        """Per-point configurations, with the sweep index as the seed stream."""
        return [cfg.with_(**self.overrides.get(i, {})) for i in range(len(self.values))]


# --------------------------------------------------------------------------
# sequences and simulation


def drive_amplitude(cfg: ExperimentConfig, rotation, duration) -> float:
    """Input amplitude rotating the mean resonant packet by ``rotation * pi``."""
    return rabi_pi_amplitude(cfg.ensemble.g0_mean, duration, cfg.resonator, angle=math.pi * rotation)


def pi_sequence(cfg: ExperimentConfig, rotation=None, duration=None, amplitude=None,
                tail=1e-6) -> PulseSequence:
    """Single excitation pulse followed by a short delay."""
    p = cfg.protocol
    duration = p.pi_duration if duration is None else duration
    if amplitude is None:
        amplitude = drive_amplitude(cfg, p.pi_rotation if rotation is None else rotation, duration)
    segs = [PulseSegment.drive(amplitude, duration) if amplitude > 0 else PulseSegment.delay(duration),
            PulseSegment.delay(tail)]
    return PulseSequence(tuple(segs), "pi")


def echo_sequence(cfg: ExperimentConfig, tau=None, half_rotation=None, refocus_rotation=None,
                  refocus_duration=None, inversion_delay=None, refocus_amplitude=None):
    """Hahn echo; ``tau`` is the center-to-center pulse spacing.

    With ``inversion_delay`` a pi pulse precedes the echo by that delay
    (pi center to pi/2 center).  Returns ``(sequence, echo_time)`` where
    the echo time is ``2 t_refocus - t_half`` for the pulse centers.
    """
    p = cfg.protocol
    tau = p.echo_tau if tau is None else tau
    hr = p.half_rotation if half_rotation is None else half_rotation
    rr = p.refocus_rotation if refocus_rotation is None else refocus_rotation
    Th = p.half_duration
    Tr = p.refocus_duration if refocus_duration is None else refocus_duration
    segs = []
    t0 = 0.0
    if inversion_delay is not None:
        Tp = p.pi_duration
        lead = inversion_delay - 0.5 * (Tp + Th)
        if lead <= 0:
            raise ConfigError("inversion delay shorter than the pulses", "inversion_delay")
        segs += [PulseSegment.drive(drive_amplitude(cfg, p.pi_rotation, Tp), Tp),
                 PulseSegment.delay(lead)]
        t0 = Tp + lead
    gap = tau - 0.5 * (Th + Tr)
    if gap <= 0:
        raise ConfigError("tau shorter than the pulses", "experiment.echo_tau_s")
    a_half = drive_amplitude(cfg, hr, Th) if hr > 0 else 0.0
    if refocus_amplitude is None:
        refocus_amplitude = drive_amplitude(cfg, rr, Tr) if rr > 0 else 0.0
    segs += [PulseSegment.drive(a_half, Th) if a_half > 0 else PulseSegment.delay(Th),
             PulseSegment.delay(gap),
             PulseSegment.drive(refocus_amplitude, Tr) if refocus_amplitude > 0
             else PulseSegment.delay(Tr)]
    echo_time = t0 + 0.5 * Th + 2.0 * tau
    segs.append(PulseSegment.delay(max(echo_time + 50e-6 - (t0 + Th + gap + Tr), 1e-6)))
    return PulseSequence(tuple(segs), "echo"), echo_time


_SIM_CACHE: "OrderedDict" = OrderedDict()
_SIM_CACHE_SIZE = 24


def clear_cache():
    _SIM_CACHE.clear()


def simulate(cfg: ExperimentConfig, sequence: PulseSequence, times, horizon=None,
             ensemble: EnsembleConfig | None = None, grid: PacketGrid | None = None) -> Trajectory:
    """Evolve the configured ensemble (memoized on the physical inputs).

    Without an explicit ``horizon`` the detuning grid resolves twice the
    driven span, so excitation profiles of long pulses are not aliased.
    """
    ens = cfg.ensemble if ensemble is None else ensemble
    times = np.asarray(times, dtype=float)
    if horizon is None:
        blocks = driven_blocks(sequence, cfg.resonator)
        horizon = 2.0 * blocks[-1][1] if blocks else None
    key = None
    if grid is None:
        key = (cfg.resonator, ens, sequence, horizon, cfg.protocol.dt, times.size,
               float(times[0]), float(times[-1]), hash(times.tobytes()))
        if key in _SIM_CACHE:
            _SIM_CACHE.move_to_end(key)
            return _SIM_CACHE[key]
        grid = discretize_ensemble(ens, cfg.resonator.kappa, horizon=horizon)
    traj = evolve_packets(grid, sequence, cfg.resonator, dt=cfg.protocol.dt, times=times)
    if key is not None:
        _SIM_CACHE[key] = traj
        while len(_SIM_CACHE) > _SIM_CACHE_SIZE:
            _SIM_CACHE.popitem(last=False)
    return traj


def _pulse_windows(sequence: PulseSequence):
    return sequence.drive_windows()


def _block_fine_pieces(sequence, res, step, after=10e-6):
    return [(b0, b1 + after, step) for b0, b1 in driven_blocks(sequence, res)]


def fluorescence_times(cfg: ExperimentConfig, sequence: PulseSequence, t_end):
    """Output grid for long relaxation traces: fine around pulses, 0.5 ms steps later."""
    p = cfg.protocol
    pieces = _block_fine_pieces(sequence, cfg.resonator, p.fine_step)
    pieces += [(0.0, min(1e-3, t_end), 1e-6), (1e-3, t_end, 0.5e-3)]
    return time_grid(*pieces, t_end=t_end)


def echo_times(cfg: ExperimentConfig, sequence: PulseSequence, echo_time, t_end, t_dense=0.0,
               half_span=30e-6):
    """Output grid resolving the pulses and the echo.

    Steps are 1 us from ``t_dense`` on and coarse before it (long
    inversion-recovery delays).
    """
    p = cfg.protocol
    pieces = _block_fine_pieces(sequence, cfg.resonator, p.fine_step)
    pieces += [(t_dense, t_end, 1e-6), (echo_time - half_span, echo_time + half_span, p.fine_step)]
    if t_dense > 0:
        pieces.append((0.0, t_dense, max(1e-6, t_dense / 500.0)))
    return time_grid(*pieces, t_end=t_end)


def radiated_in_window(cfg: ExperimentConfig, grid_state: PacketGrid, t_after, window):
    """Photons radiated into the line within ``window`` by packets in ``grid_state``.

    Each packet relaxes exponentially from its population at ``t_after``;
    the Purcell share of the decay inside the window leaves through the
    coupling port.
    """
    res = cfg.resonator
    gr, g1, _ = packet_rates(grid_state.g[:, None], grid_state.delta[None, :], res,
                             T1_nonradiative=grid_state.T1_nonradiative)
    pop = grid_state.weights * (grid_state.sz + 0.5)
    w0, w1 = window[0] - t_after, window[1] - t_after
    frac = np.exp(-g1 * max(w0, 0.0)) - np.exp(-g1 * max(w1, 0.0))
    return float(np.sum(pop * (gr / g1) * frac) * res.collection)


# --------------------------------------------------------------------------
# lazily generated click records


class RecordSet(Sequence):
    """Click records regenerated on demand from per-cycle probabilities.

    Record ``i`` uses the stream ``(seed, stream_ids[i], sweep)``, so any
    subset can be reproduced independently.
    """

    def __init__(self, centers, probabilities, blind, seed, stream_ids, sweep=0):
        self.centers = np.asarray(centers, dtype=float)
        self.probabilities = np.asarray(probabilities, dtype=float)
        self.blind = np.asarray(blind, dtype=bool)
        self.seed = seed
        self.stream_ids = tuple(int(s) for s in stream_ids)
        self.sweep = int(sweep)

    def __len__(self):
        return len(self.stream_ids)

    def clicks(self, i):
        return draw_clicks(self.probabilities, self.blind, self.seed, self.stream_ids[i], self.sweep)

    def __getitem__(self, i):
        if isinstance(i, slice):
            return [self[j] for j in range(*i.indices(len(self)))]
        if i < 0:
            i += len(self)
        if not 0 <= i < len(self):
            raise IndexError(i)
        return ClickRecord(self.centers, self.clicks(i), self.blind)

    def aggregate(self, window=None, threads=None):
        """Summed clicks per cycle and per-record counts inside ``window``.

        Integer sums make the result independent of the thread count.
        """
        sel = None
        if window is not None:
            sel = (self.centers >= window[0]) & (self.centers < window[1])

        def one(i):
            c = self.clicks(i)
            return c, (int(np.count_nonzero(c[sel])) if sel is not None else 0)

        total = np.zeros(self.centers.size, dtype=np.int64)
        counts = np.zeros(len(self), dtype=np.int64)
        chunk = 64
        for s in range(0, len(self), chunk):
            idx = range(s, min(s + chunk, len(self)))
            for i, (c, n) in zip(idx, map_ordered(one, idx, threads)):
                total += c
                counts[i] = n
        return total, counts


def rate_trace_from_sums(centers, click_sum, blind, n_reps, period, bin_width) -> analysis.RateTrace:
    """Bin summed clicks of ``n_reps`` records sharing one cycle grid."""
    if bin_width < period * (1 - 1e-9):
        raise ConfigError("bin narrower than one cycle", "bin_width")
    k = max(1, int(round(bin_width / period)))
    nb = centers.size // k
    n = nb * k
    c = click_sum[:n].reshape(nb, k).sum(axis=1).astype(float)
    e = (~blind[:n]).reshape(nb, k).sum(axis=1) * period * n_reps
    mids = centers[:n].reshape(nb, k).mean(axis=1)
    return analysis.RateTrace(mids, analysis._safe_rate(c, e), k * period, n_reps, c, e)


# --------------------------------------------------------------------------
# fluorescence


@dataclass(eq=False)
class FluorescenceResult:
    signal: RecordSet
    control: RecordSet | None
    trace: analysis.RateTrace
    control_trace: analysis.RateTrace | None
    fit: analysis.FitResult
    histogram: analysis.CountHistogram
    control_histogram: analysis.CountHistogram | None
    c_spin: float
    n_excited: float
    expected_c_spin: float
    trajectory: Trajectory
    warnings: list = field(default_factory=list)

    def summary(self) -> dict:
        f = self.fit
        return {
            "fit": f.to_dict(),
            "T1_fit_s": _num(f.params.get("tau")),
            "T1_fit_sigma_s": _num(f.sigmas.get("tau")),
            "initial_excess_rate_per_s": _num(f.params.get("amplitude")),
            "dark_rate_fit_per_s": _num(f.params.get("offset")),
            "count_mean_pi": self.histogram.mean,
            "count_std_pi": self.histogram.std,
            "count_mean_control": None if self.control_histogram is None else self.control_histogram.mean,
            "count_std_control": None if self.control_histogram is None else self.control_histogram.std,
            "c_spin": _num(self.c_spin),
            "expected_c_spin": self.expected_c_spin,
            "n_excited": self.n_excited,
            "warnings": list(self.warnings),
        }


def _num(v):
    if v is None:
        return None
    v = float(v)
    return v if math.isfinite(v) else None


def _saturation_check(n, params: SmpdParams, blind, label, out):
    m = params.eta_d * np.where(blind, 0.0, n)
    if m.size and float(m.max()) > 0.5:
        msg = f"{label}: detector saturation, eta_d n = {float(m.max()):.3g} > 0.5 in a window"
        warnings.warn(msg)
        out.append(msg)


def fluorescence_experiment(cfg: ExperimentConfig, sweep=0, threads=None) -> FluorescenceResult:
    """Pi pulse at t = 0, then continuous counter cycling over the record.

    Repetitions ``2i`` carry the pulse and ``2i + 1`` are the interleaved
    no-pulse controls (streams of the master seed).
    """
    p = cfg.protocol
    sm = cfg.smpd
    seq = pi_sequence(cfg)
    T = p.record_duration
    times = fluorescence_times(cfg, seq, T)
    traj = simulate(cfg, seq, times)
    notes = []
    _check_repolarization(cfg, traj, notes)

    centers = cycle_centers(sm, T)
    windows = _pulse_windows(seq)
    blind = blind_cycles(centers, sm, windows)
    n = expected_photons(traj, centers, sm, p.line_efficiency)
    _saturation_check(n, sm, blind, "fluorescence", notes)
    tls = p.tls_rate * np.exp(-centers / p.tls_tau) if p.tls_rate > 0 else None
    prob = click_probability(n, sm, extra_rate=tls)
    R = cfg.repetitions
    sig = RecordSet(centers, prob, blind, cfg.seed, [2 * i for i in range(R)], sweep)
    s_sum, s_counts = sig.aggregate(p.count_window, threads)
    trace = rate_trace_from_sums(centers, s_sum, blind, R, sm.cycle_period, p.bin_width)
    ctl = ctl_trace = ctl_hist = None
    c_spin = math.nan
    if p.control_interleaved:
        cprob = click_probability(np.zeros_like(n), sm)
        cblind = np.zeros_like(blind)
        ctl = RecordSet(centers, cprob, cblind, cfg.seed, [2 * i + 1 for i in range(R)], sweep)
        c_sum, c_counts = ctl.aggregate(p.count_window, threads)
        ctl_trace = rate_trace_from_sums(centers, c_sum, cblind, R, sm.cycle_period, p.bin_width)
        ctl_hist = analysis.histogram_from_counts(c_counts)
        c_spin = float(s_counts.mean() - c_counts.mean())
    hist = analysis.histogram_from_counts(s_counts)
    try:
        fit = analysis.fit_exponential(trace, p.fit_t_min)
    except InputError as exc:
        fit = analysis.FitResult({}, {}, math.nan, False, message=str(exc))

    pulse_end = windows[-1][1] if windows else 0.0
    after = driven_blocks(seq, cfg.resonator)
    t_after = after[-1][1] if after else 0.0
    final = _state_at(cfg, seq, t_after)
    n_exc = float(np.sum(final.weights * (final.sz + 0.5)))
    w0, w1 = p.count_window
    sel = (centers >= w0) & (centers < w1) & ~blind
    expected = float(np.sum(prob[sel] - click_probability(0.0, sm)))
    del pulse_end
    return FluorescenceResult(sig, ctl, trace, ctl_trace, fit, hist, ctl_hist, c_spin, n_exc,
                              expected, traj, notes)


def _state_at(cfg: ExperimentConfig, seq: PulseSequence, t_end) -> PacketGrid:
    """Packet states at ``t_end`` (short simulation, memoized)."""
    times = time_grid((0.0, t_end, 1e-6), t_end=t_end)
    return simulate(cfg, seq, times).final


def _check_repolarization(cfg: ExperimentConfig, traj: Trajectory, notes):
    """Warn when the next repetition would start more than 2% below full polarization."""
    deficit = 1.0 - initial_polarization(cfg)
    if deficit > 0.02:
        period = cfg.protocol.record_duration + cfg.repetition_delay
        msg = f"repetition period {period:.3g} s leaves a {deficit:.1%} polarization deficit"
        warnings.warn(msg)
        notes.append(msg)


def initial_polarization(cfg: ExperimentConfig, period=None) -> float:
    """Polarization at the start of a repetition after a pi pulse one period earlier.

    Evaluated for the mean resonant packet after a full inversion (1 =
    fully polarized).  The period is ``record_duration + repetition_delay``
    by default.
    """
    period = cfg.protocol.record_duration + cfg.repetition_delay if period is None else period
    _, g1, _ = packet_rates(cfg.ensemble.g0_mean, 0.0, cfg.resonator, cfg.ensemble)
    # s_z = -1/2 + exp(-G t) after inversion, polarization = -2 s_z
    return float(1.0 - 2.0 * np.max(np.exp(-np.asarray(g1) * period)))


# --------------------------------------------------------------------------
# echo


@dataclass(eq=False)
class EchoResult:
    tau: float
    echo_time: float
    trajectory: Trajectory
    records: RecordSet | list | None
    c_echo: float = math.nan
    dc_echo: float = math.nan
    p_gate: float = math.nan
    p_baseline: float = math.nan
    c_e_linear: float = math.nan
    expected_p_gate: float = math.nan
    expected_p_baseline: float = math.nan
    gate_photons: float = math.nan
    echo_photons: float = math.nan
    echo_width: float = math.nan
    area: complex = complex("nan")
    area_sigma: float = math.nan
    expected_area: complex = complex("nan")
    warnings: list = field(default_factory=list)

    def summary(self) -> dict:
        return {
            "tau_s": self.tau, "echo_time_s": self.echo_time,
            "c_echo": _num(self.c_echo), "dc_echo": _num(self.dc_echo),
            "p_gate": _num(self.p_gate), "p_baseline": _num(self.p_baseline),
            "c_e_linear": _num(self.c_e_linear),
            "expected_p_gate": _num(self.expected_p_gate),
            "expected_p_baseline": _num(self.expected_p_baseline),
            "gate_photons_at_output": _num(self.gate_photons),
            "echo_photons_at_output": _num(self.echo_photons),
            "echo_width_s": _num(self.echo_width),
            "area": None if not np.isfinite(self.area) else [self.area.real, self.area.imag],
            "area_sigma": _num(self.area_sigma),
            "warnings": list(self.warnings),
        }


def _echo_start(cfg: ExperimentConfig, inversion_delay):
    """Start of the pi/2 pulse."""
    if inversion_delay is None:
        return 0.0
    return inversion_delay + 0.5 * (cfg.protocol.pi_duration - cfg.protocol.half_duration)


def _echo_horizon(cfg: ExperimentConfig, echo_time, inversion_delay):
    """Free-evolution span the detuning grid must resolve without revivals."""
    T2 = cfg.ensemble.T2
    t_half = _echo_start(cfg, inversion_delay)
    origin = 0.0
    if inversion_delay is not None and math.isfinite(T2) and \
            t_half - cfg.protocol.pi_duration > 30.0 * T2:
        origin = t_half  # coherence of the pi pulse is reset before the echo
    return echo_time - origin + 60e-6


def baseline_length(cfg: ExperimentConfig, tau) -> float:
    """Time after the echo used for the counter baseline."""
    p = cfg.protocol
    return max(p.baseline_end - (0.5 * p.half_duration + 2.0 * tau), 20 * cfg.smpd.cycle_period)


def echo_trajectory(cfg: ExperimentConfig, tau=None, t_end=None, inversion_delay=None, **seq_kw):
    """Simulated echo trajectory, its sequence and the nominal echo time."""
    p = cfg.protocol
    tau = p.echo_tau if tau is None else tau
    seq, t_echo = echo_sequence(cfg, tau, inversion_delay=inversion_delay, **seq_kw)
    if t_end is None:
        t_end = t_echo + max(baseline_length(cfg, tau), 40e-6)
    t_half = _echo_start(cfg, inversion_delay)
    times = echo_times(cfg, seq, t_echo, t_end, t_dense=max(t_half - 20e-6, 0.0))
    horizon = _echo_horizon(cfg, t_echo, inversion_delay)
    return simulate(cfg, seq, times, horizon=horizon), seq, t_echo


def echo_experiment(cfg: ExperimentConfig, tau=None, sweep=0, mode=None, threads=None,
                    inversion_delay=None, **seq_kw) -> EchoResult:
    """Hahn echo detected by gated counting or by homodyne.

    In counter mode one detection window is centered on the echo and
    cycling continues until ``baseline_end`` for the baseline; ``c_echo``
    is the gate click probability minus the baseline probability and
    ``c_e_linear = -ln((1 - p_gate)/(1 - p_baseline))`` the photon-linear
    excess.  In homodyne mode the echo area is the phase-sensitive sum of
    the quadratures over the echo window.
    """
    p = cfg.protocol
    sm = cfg.smpd
    mode = cfg.detection_mode if mode is None else mode
    tau = p.echo_tau if tau is None else tau
    if tau <= sm.dead_time_after_pulse and mode == "smpd":
        raise ConfigError(f"tau = {tau:.3g} s is not larger than the detector dead time",
                          "experiment.echo_tau_s")
    traj, seq, t_echo = echo_trajectory(cfg, tau, inversion_delay=inversion_delay, **seq_kw)
    notes = []
    out = EchoResult(tau, t_echo, traj, None, warnings=notes)
    out.echo_photons = float(integrate_windows(traj.times, np.abs(traj.spin_field) ** 2,
                                               t_echo - 30e-6, t_echo + 30e-6))
    out.echo_width = echo_envelope_width(traj, t_echo, 30e-6)
    half = 0.5 * sm.detect_window
    out.gate_photons = float(integrate_windows(traj.times, np.abs(traj.spin_field) ** 2,
                                               t_echo - half, t_echo + half))
    R = cfg.repetitions
    if mode == "smpd":
        t_end = float(traj.times[-1])
        t0 = max(_echo_start(cfg, inversion_delay) - 20e-6, 0.0)
        centers = cycle_centers(sm, t_end, gate_time=t_echo, t_start=t0)
        blind = blind_cycles(centers, sm, _pulse_windows(seq))
        gate = int(np.argmin(np.abs(centers - t_echo)))
        if blind[gate]:
            raise ConfigError("echo gate falls inside the detector dead time", "experiment.echo_tau_s")
        n = expected_photons(traj, centers, sm, p.line_efficiency)
        _saturation_check(n, sm, blind, "echo", notes)
        prob = click_probability(n, sm)
        recs = RecordSet(centers, prob, blind, cfg.seed, range(R), sweep)
        total, _ = recs.aggregate(threads=threads)
        base = (centers > t_echo) & ~blind
        if not base.any():
            raise ConfigError("no baseline cycles after the echo", "experiment.baseline_end_s")
        out.records = recs
        out.p_gate = total[gate] / R
        out.p_baseline = float(total[base].sum() / (R * base.sum()))
        out.c_echo = out.p_gate - out.p_baseline
        out.dc_echo = math.sqrt(out.p_gate * (1.0 - out.p_gate))
        out.c_e_linear = _linearize(out.p_gate, out.p_baseline)
        out.expected_p_gate = float(prob[gate])
        out.expected_p_baseline = float(prob[base].mean())
    else:
        hp = cfg.homodyne
        a0, a1 = t_echo - 30e-6, t_echo + 30e-6
        ref = _expected_quadratures(traj, p.line_efficiency, hp.integration_bandwidth, a0, a1)
        ref_phase = _reference_phase(cfg, tau, seq_kw)
        recs = [homodyne_detect(traj, p.line_efficiency, hp.integration_bandwidth,
                                (cfg.seed, i, sweep), t_start=a0, t_end=a1) for i in range(R)]
        areas = np.array([np.sum(r.x + 1j * r.y) for r in recs]) * np.exp(-1j * ref_phase)
        out.records = recs
        out.area = complex(areas.mean())
        out.area_sigma = float(areas.real.std(ddof=1) / math.sqrt(R)) if R > 1 else math.nan
        out.expected_area = complex(np.sum(ref) * np.exp(-1j * ref_phase))
    return out


def _linearize(p_gate, p_base):
    if p_gate >= 1.0:
        return math.inf
    return float(-math.log((1.0 - p_gate) / (1.0 - p_base)))


def _expected_quadratures(traj, line_efficiency, bandwidth, t0, t1, spin_only=False):
    """Noise-free homodyne modes (complex) over [t0, t1]."""
    dtm = 1.0 / bandwidth
    n = int(math.floor((t1 - t0) / dtm + 1e-9))
    a = t0 + dtm * np.arange(n)
    b = a + dtm
    fx, fy = (traj.spin_x, traj.spin_y) if spin_only else (traj.coherent_x, traj.coherent_y)
    ix = integrate_windows(traj.times, fx, a, b)
    iy = integrate_windows(traj.times, fy, a, b)
    return math.sqrt(line_efficiency / dtm) * (ix + 1j * iy)


def _reference_phase(cfg, tau, seq_kw):
    """Phase of the equilibrium echo, the projection axis for echo areas."""
    traj, _, t_echo = echo_trajectory(cfg, tau, **seq_kw)
    ref = _expected_quadratures(traj, cfg.protocol.line_efficiency,
                                cfg.homodyne.integration_bandwidth, t_echo - 30e-6, t_echo + 30e-6)
    return float(np.angle(np.sum(ref)))


# --------------------------------------------------------------------------
# relaxation and coherence


@dataclass(eq=False)
class CurveResult:
    x: np.ndarray
    y: np.ndarray
    sigma: np.ndarray | None
    fit: analysis.FitResult
    derived: dict = field(default_factory=dict)
    points: list = field(default_factory=list)

    def summary(self) -> dict:
        return {"x": self.x.tolist(), "y": self.y.tolist(),
                "sigma": None if self.sigma is None else self.sigma.tolist(),
                "fit": self.fit.to_dict(), **{k: _num(v) for k, v in self.derived.items()}}

    def to_csv(self, path, x_name, y_name):
        cols = [self.x, self.y] + ([self.sigma] if self.sigma is not None else [])
        header = f"{x_name},{y_name}" + (",sigma" if self.sigma is not None else "")
        np.savetxt(path, np.column_stack(cols), delimiter=",", header=header, comments="")


def inversion_recovery(cfg: ExperimentConfig, taus, mode=None, threads=None) -> CurveResult:
    """Pi pulse, delay ``tau``, then echo detection.

    Homodyne mode fits ``A exp(-tau/T1) + B`` to the echo area; counter mode
    fits ``A (1 - b exp(-tau/T1))^2`` to the photon-linear echo excess.
    """
    mode = cfg.detection_mode if mode is None else mode
    taus = np.asarray(taus, dtype=float)
    pts = [echo_experiment(cfg, mode=mode, inversion_delay=float(t), sweep=i, threads=threads)
           for i, t in enumerate(taus)]
    if mode == "homodyne":
        y = np.array([pt.area.real for pt in pts])
        s = np.array([pt.area_sigma for pt in pts]) if cfg.repetitions > 1 else None
        fit = analysis.fit_exponential_curve(taus, y, s)
        T1 = fit.params.get("tau", math.nan)
    else:
        y = np.array([pt.c_e_linear for pt in pts])
        s = None
        fit = _fit_squared_recovery(taus, y)
        T1 = fit.params.get("T1", math.nan)
    return CurveResult(taus, y, s, fit, {"T1_s": T1}, pts)


def _fit_squared_recovery(t, y):
    t = np.asarray(t, dtype=float)
    y = np.asarray(y, dtype=float)
    A0 = float(y[np.argmax(t)])
    k0 = 1.0 / max(np.median(t), 1e-30)

    def resid(q):
        return q[0] * (1.0 - q[1] * np.exp(-q[2] * t)) ** 2 - y

    def jac(q):
        e = np.exp(-q[2] * t)
        u = 1.0 - q[1] * e
        return np.column_stack((u**2, -2 * q[0] * u * e, 2 * q[0] * u * q[1] * t * e))

    q, r, J, it, ok, msg, g0 = analysis.levenberg_marquardt(resid, jac, np.array([A0, 2.0, k0]))

    def transform(params, sigmas):
        k = params["rate"]
        params["T1"] = 1.0 / k if k > 0 else math.inf
        sigmas["T1"] = sigmas["rate"] / k**2 if k > 0 else math.inf

    return analysis._finish(("amplitude", "inversion", "rate"), q, r, J, it, ok, msg, g0, False, transform)


def coherence_sweep(cfg: ExperimentConfig, taus, mode=None, threads=None) -> CurveResult:
    """Echo signal versus ``2 tau`` with an exponential fit.

    Counter mode fits the photon-linear excess, which decays with half the
    amplitude decay time, so ``T2 = 2 tau_fit``; homodyne mode fits the
    echo area directly.
    """
    mode = cfg.detection_mode if mode is None else mode
    taus = np.asarray(taus, dtype=float)
    if np.any(np.diff(taus) <= 0):
        raise ConfigError("taus must be ascending", "taus")
    pts = [echo_experiment(cfg, tau=float(t), mode=mode, sweep=i, threads=threads)
           for i, t in enumerate(taus)]
    x = 2.0 * taus
    if mode == "homodyne":
        y = np.array([pt.area.real for pt in pts])
        s = np.array([pt.area_sigma for pt in pts]) if cfg.repetitions > 1 else None
        factor = 1.0
    else:
        y = np.array([pt.c_e_linear for pt in pts])
        R = cfg.repetitions
        # delta-method error of -ln(1 - p) for a binomial gate probability
        pg = np.array([pt.p_gate for pt in pts])
        s = np.sqrt(np.maximum(pg * (1 - pg), 1.0 / R) / R) / np.maximum(1 - pg, 1.0 / R)
        factor = 2.0
    # baseline-subtracted signals decay to zero
    fit = analysis.fit_exponential_curve(x, y, s, fixed_offset=0.0)
    T2 = factor * fit.params.get("tau", math.nan)
    return CurveResult(x, y, s, fit, {"T2_s": T2}, pts)


# --------------------------------------------------------------------------
# Rabi and field sweeps


def rabi_sweep(cfg: ExperimentConfig, mode="fluorescence", durations=(), amplitude=None,
               rotation=None, threads=None) -> CurveResult:
    """Signal versus pulse duration at fixed drive amplitude.

    ``amplitude`` is the input amplitude (sqrt(photons/s)); alternatively
    ``rotation`` gives it as the rotation (units of pi) of a
    ``pi_duration`` pulse.  Fluorescence mode varies the excitation pulse and
    records the expected spin counts in the count window (simulated clicks
    when ``cfg.repetitions > 1``); echo mode varies the refocusing pulse and
    records the photon-linear echo excess.
    """
    p = cfg.protocol
    durations = np.asarray(durations, dtype=float)
    if durations.size < 2 or np.any(np.diff(durations) <= 0):
        raise ConfigError("durations must be ascending with at least two points", "durations")
    if amplitude is None:
        amplitude = drive_amplitude(cfg, p.pi_rotation if rotation is None else rotation, p.pi_duration)
    y = []
    sig = []
    pts = []
    for i, d in enumerate(durations):
        if mode == "fluorescence":
            val, err = _fluorescence_signal(cfg, d, amplitude, i, threads)
        elif mode == "echo":
            pt = echo_experiment(cfg, mode="smpd", sweep=i, threads=threads, refocus_duration=float(d),
                                 refocus_amplitude=amplitude)
            pts.append(pt)
            val, err = pt.c_e_linear, math.sqrt(max(pt.p_gate * (1 - pt.p_gate), 1e-12) / cfg.repetitions)
        else:
            raise ConfigError("must be 'fluorescence' or 'echo'", "mode")
        y.append(val)
        sig.append(err)
    y = np.array(y)
    try:
        fit = analysis.fit_damped_oscillation(durations, y)
    except InputError as exc:
        fit = analysis.FitResult({}, {}, math.nan, False, message=str(exc))
    rabi = fit.params.get("frequency", math.nan)
    return CurveResult(durations, y, np.array(sig), fit,
                       {"rabi_frequency_hz": rabi, "amplitude": amplitude}, pts)


def _fluorescence_signal(cfg: ExperimentConfig, duration, amplitude, sweep, threads):
    """Spin counts in the count window for one excitation pulse."""
    p = cfg.protocol
    sm = cfg.smpd
    seq = PulseSequence([PulseSegment.drive(amplitude, duration) if amplitude > 0
                         else PulseSegment.delay(duration), PulseSegment.delay(1e-6)], "rabi")
    blocks = driven_blocks(seq, cfg.resonator)
    t_after = blocks[-1][1] if blocks else duration
    state = _state_at(cfg, seq, t_after)
    photons = radiated_in_window(cfg, state, t_after, p.count_window)
    expected = sm.eta_d * sm.duty * p.line_efficiency * photons
    R = cfg.repetitions
    if R <= 1:
        return expected, math.nan
    # counting noise: Bernoulli clicks of the window cycles (spin plus dark)
    centers = cycle_centers(sm, p.count_window[1])
    centers = centers[centers >= p.count_window[0]]
    rng = generator(cfg.seed, sweep)
    n_cyc = centers.size
    p_dark = sm.p_dark
    lam = photons * p.line_efficiency * sm.duty / max(n_cyc, 1)
    p_sig = click_probability(lam, sm)
    c_sig = rng.binomial(n_cyc, p_sig, size=R)
    c_ctl = rng.binomial(n_cyc, p_dark, size=R)
    diff = c_sig.astype(float) - c_ctl
    return float(diff.mean()), float(diff.std(ddof=1) / math.sqrt(R))


@dataclass(eq=False)
class FieldSweepResult:
    fields: np.ndarray
    detunings: np.ndarray
    signals: dict
    peaks: dict

    def summary(self) -> dict:
        return {"fields_T": self.fields.tolist(), "detunings_rad_s": self.detunings.tolist(),
                "signals": {k: v.tolist() for k, v in self.signals.items()},
                "peak_fields_T": {k: float(v) for k, v in self.peaks.items()}}

    def to_csv(self, path):
        names = list(self.signals)
        np.savetxt(path, np.column_stack([self.fields] + [self.signals[k] for k in names]),
                   delimiter=",", header="field_T," + ",".join(names), comments="")


def field_sweep(cfg: ExperimentConfig, fields, gamma_eff=None, b_res=None,
                methods=("homodyne_echo", "smpd_echo", "fluorescence")) -> FieldSweepResult:
    """Lineshape versus static field for the three detection methods.

    The ensemble line center moves as ``gamma_eff (B - B_res)`` with
    ``gamma_eff`` in rad/s/T; since
    the spins do not act back on the cavity, each field point reuses the
    same packet grid with reweighted detuning densities.  Signals are the
    noise-free expectations: echo area magnitude (homodyne), echo click
    excess at the gate (counter) and spin counts in the count window
    (fluorescence).
    """
    p = cfg.protocol
    gamma_eff = p.gamma_eff if gamma_eff is None else gamma_eff
    if not gamma_eff > 0:
        raise ConfigError("must be > 0", "experiment.gamma_eff_hz_per_t")
    fields = np.asarray(fields, dtype=float)
    if b_res is None:
        b_res = float(np.mean(fields))
    det = gamma_eff * (fields - b_res)
    ens = cfg.ensemble
    res = cfg.resonator
    sm = cfg.smpd
    signals = {m: np.zeros(fields.size) for m in methods}

    if "fluorescence" in methods:
        seq = pi_sequence(cfg)
        blocks = driven_blocks(seq, res)
        t_after = blocks[-1][1]
        base = _state_at(cfg, seq, t_after)
        gr, g1, _ = packet_rates(base.g[:, None], base.delta[None, :], res,
                                 T1_nonradiative=base.T1_nonradiative)
        w0, w1 = p.count_window
        per_bin = np.sum(base.g_weights[:, None] * (base.sz + 0.5) * (gr / g1)
                         * (np.exp(-g1 * (w0 - t_after)) - np.exp(-g1 * (w1 - t_after))), axis=0)
        per_bin = per_bin * res.collection
        h = base.spacing
        for i, d in enumerate(det):
            dens = ens.with_(line_center=d).density(base.delta)
            signals["fluorescence"][i] = sm.eta_d * sm.duty * p.line_efficiency * float(
                np.sum(per_bin * dens * h))

    if "homodyne_echo" in methods or "smpd_echo" in methods:
        seq, t_echo = echo_sequence(cfg)
        times = echo_times(cfg, seq, t_echo, t_echo + 40e-6)
        grid0 = discretize_ensemble(ens, res.kappa, horizon=_echo_horizon(cfg, t_echo, None))
        half = 0.5 * sm.detect_window
        hb = cfg.homodyne.integration_bandwidth
        for i, d in enumerate(det):
            w = ens.with_(line_center=d).density(grid0.delta) * grid0.spacing
            traj = evolve_packets(grid0.reweighted(w), seq, res, dt=p.dt, times=times)
            if "homodyne_echo" in methods:
                q = _expected_quadratures(traj, p.line_efficiency, hb, t_echo - 30e-6,
                                          t_echo + 30e-6, spin_only=True)
                signals["homodyne_echo"][i] = abs(np.sum(q))
            if "smpd_echo" in methods:
                n = p.line_efficiency * float(integrate_windows(
                    traj.times, np.abs(traj.spin_field) ** 2, t_echo - half, t_echo + half))
                signals["smpd_echo"][i] = sm.eta_d * n

    peaks = {m: float(fields[int(np.argmax(v))]) for m, v in signals.items()}
    return FieldSweepResult(fields, det, signals, peaks)


# --------------------------------------------------------------------------
# spin-number estimation


def _scaled(cfg: ExperimentConfig, rho) -> ExperimentConfig:
    return cfg.with_(ensemble=cfg.ensemble.with_(rho_spin=float(rho)))


def pi_pulse_excitations(cfg: ExperimentConfig, rotation=None, duration=None) -> float:
    """Excited spins right after the (ratio-method) pi pulse."""
    seq = pi_sequence(cfg, rotation=rotation, duration=duration)
    t_after = driven_blocks(seq, cfg.resonator)[-1][1]
    st = _state_at(cfg, seq, t_after)
    return float(np.sum(st.weights * (st.sz + 0.5)))


def ratio_model(cfg: ExperimentConfig) -> dict:
    """Simulated counterparts of the ratio-method observables.

    ``window_photons``: photons radiated into the line inside the count
    window after the pi pulse; ``gate_photons``: echo photons leaving the
    resonator inside the gated window.  Their ratio is the model value of
    ``C_spin / (eta_duty c_e)``; detector and line efficiencies cancel.
    """
    p = cfg.protocol
    seq = pi_sequence(cfg)
    t_after = driven_blocks(seq, cfg.resonator)[-1][1]
    st = _state_at(cfg, seq, t_after)
    window = radiated_in_window(cfg, st, t_after, p.count_window)
    traj, _, t_echo = echo_trajectory(cfg, t_end=None)
    half = 0.5 * cfg.smpd.detect_window
    gate = float(integrate_windows(traj.times, np.abs(traj.spin_field) ** 2, t_echo - half, t_echo + half))
    n_exc = float(np.sum(st.weights * (st.sz + 0.5)))
    return {"window_photons": window, "gate_photons": gate, "ratio": window / gate if gate > 0 else math.inf,
            "n_excited": n_exc}


def _solve_rho(model, target, rho_range, rtol=1e-4, max_iter=12):
    """Solve ``model(rho) = target`` for a monotone model by log-space secant steps.

    ``model`` is evaluated by simulation; the scan endpoints must bracket
    the target.
    """
    lo, hi = rho_range
    f_lo, f_hi = model(lo), model(hi)
    diag = {"rho_scan": [lo, hi], "model_scan": [f_lo, f_hi], "target": target}
    lt = math.log(target)
    a, b = (math.log(f_lo) - lt, math.log(f_hi) - lt)
    if a * b > 0:
        raise EstimationError("no root in the rho_spin scan range", diag)
    xa, xb = math.log(lo), math.log(hi)
    for _ in range(max_iter):
        x = xb - b * (xb - xa) / (b - a) if b != a else 0.5 * (xa + xb)
        x = min(max(x, min(xa, xb)), max(xa, xb)) if a * b < 0 else x
        fx = model(math.exp(x))
        diag["rho_scan"].append(math.exp(x))
        diag["model_scan"].append(fx)
        c = math.log(fx) - lt
        if abs(c) < rtol:
            return math.exp(x), diag
        # keep the bracket (Illinois-style secant)
        if c * b < 0:
            xa, a = xb, b
        else:
            a *= 0.5
        xb, b = x, c
    raise EstimationError("rho_spin iteration did not converge", diag)


def estimate_spins_ratio_method(c_spin, c_e, eta_duty, cfg: ExperimentConfig,
                                rho_range=None) -> dict:
    """Spin density from the fluorescence-to-echo count ratio.

    Parameters
    ----------
    c_spin : float
        Spin counts in the fluorescence count window.
    c_e : float
        Photon-linear echo click excess per gated window.
    eta_duty : float
        Counter duty cycle (the gated echo is insensitive to it).
    cfg : ExperimentConfig
        Pulse and window settings of the two measurements.
    rho_range : (float, float), optional
        Scan range of ``rho_spin`` (spins per rad/s).
    """
    if not c_e > 0:
        raise EstimationError("c_e must be > 0", {"c_e": c_e})
    if not c_spin > 0:
        raise EstimationError("c_spin must be > 0", {"c_spin": c_spin})
    target = c_spin / (eta_duty * c_e)
    rho0 = cfg.ensemble.rho_spin
    if rho_range is None:
        rho_range = (rho0 / 20.0, rho0 * 20.0)
    rho, diag = _solve_rho(lambda r: ratio_model(_scaled(cfg, r))["ratio"], target, rho_range)
    n = pi_pulse_excitations(_scaled(cfg, rho))
    return {"rho_spin": rho, "rho_spin_per_krad_s": rho * 1e3, "N": n, "ratio": target,
            "diagnostics": diag}


def amplitude_model(cfg: ExperimentConfig, trace_window=None):
    """Noise-free homodyne trace of the amplitude-method echo sequence.

    Returns ``(modes, echo_mask, control_mask)`` over the echo sequence.
    """
    traj, seq, t_echo = echo_trajectory(cfg)
    hp = cfg.homodyne
    t0, t1 = 0.0, t_echo + 30e-6
    q = _expected_quadratures(traj, cfg.protocol.line_efficiency, hp.integration_bandwidth, t0, t1)
    dtm = 1.0 / hp.integration_bandwidth
    mids = t0 + dtm * (np.arange(q.size) + 0.5)
    echo_mask = np.abs(mids - t_echo) < 30e-6
    w = seq.drive_windows()[-1]
    control_mask = (mids > w[0] + 0.25 * (w[1] - w[0])) & (mids < w[1] - 0.25 * (w[1] - w[0]))
    return mids, q, echo_mask, control_mask


def homodyne_echo_trace(cfg: ExperimentConfig, sweep=0) -> HomodyneRecord:
    """Repetition-averaged homodyne trace of the echo sequence (control pulses included)."""
    mids, q, _, _ = amplitude_model(cfg)
    R = cfg.repetitions
    rng = generator(cfg.seed, 0, sweep)
    noise = rng.normal(0.0, 0.5 / math.sqrt(R), size=(2, q.size))
    return HomodyneRecord(mids, q.real + noise[0], q.imag + noise[1])


def _amplitudes(times, z, template, echo_mask, control_mask, sigma):
    te = template[echo_mask]
    norm = float(np.sum(np.abs(te) ** 2))
    echo = complex(np.vdot(te, z[echo_mask]) / norm)
    tc = template[control_mask]
    control = complex(np.vdot(tc, z[control_mask]) / np.sum(np.abs(tc) ** 2))
    snr = abs(echo) * math.sqrt(norm) / sigma
    return echo, control, snr


def estimate_spins_amplitude_method(trace: HomodyneRecord, cfg: ExperimentConfig, noise_sigma=None,
                                    rho_range=None) -> dict:
    """Spin density from the echo-to-control amplitude ratio of a homodyne trace.

    The trace must be sampled on the modes of :func:`amplitude_model`.  The
    measured echo and control amplitudes are the least-squares scale factors
    of the simulated (reference-density) echo and control shapes; ``rho_spin``
    is then adjusted until the simulated ratio matches.
    """
    mids, q, echo_mask, control_mask = amplitude_model(cfg)
    if len(trace.times) != mids.size or not np.allclose(trace.times, mids, rtol=0, atol=1e-12):
        raise InputError("trace is not sampled on the model modes")
    z = np.asarray(trace.x) + 1j * np.asarray(trace.y)
    if noise_sigma is None:
        # quadrature noise from the samples outside pulses and echo
        quiet = ~echo_mask & (np.abs(q) < 1e-3 * np.max(np.abs(q)))
        noise_sigma = float(np.std(np.concatenate((z.real[quiet], z.imag[quiet])))) if quiet.sum() > 10 else 0.5
    echo_scale, control_scale, snr = _amplitudes(mids, z, q, echo_mask, control_mask, noise_sigma)
    diag = {"echo_snr": snr, "echo_scale": abs(echo_scale), "control_scale": abs(control_scale)}
    if snr < 3.0:
        raise EstimationError("echo below the noise floor (matched-filter SNR < 3)", diag)
    ref_echo = float(np.sqrt(np.sum(np.abs(q[echo_mask]) ** 2)))
    ref_ctl = float(np.sqrt(np.sum(np.abs(q[control_mask]) ** 2)))
    target = abs(echo_scale) * ref_echo / (abs(control_scale) * ref_ctl)

    def model(r):
        _, qq, em, cm = amplitude_model(_scaled(cfg, r))
        return float(np.sqrt(np.sum(np.abs(qq[em]) ** 2)) / np.sqrt(np.sum(np.abs(qq[cm]) ** 2)))

    rho0 = cfg.ensemble.rho_spin
    if rho_range is None:
        rho_range = (rho0 / 20.0, rho0 * 20.0)
    rho, d2 = _solve_rho(model, target, rho_range)
    diag.update(d2)
    n = pi_pulse_excitations(_scaled(cfg, rho))
    return {"rho_spin": rho, "rho_spin_per_krad_s": rho * 1e3, "N": n, "ratio": target,
            "diagnostics": diag}


def combine_estimates(*values):
    """Two-method convention: mean and half the spread."""
    v = np.asarray(values, dtype=float)
    return float(v.mean()), float(0.5 * (v.max() - v.min()))
