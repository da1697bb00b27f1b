"""Driven-cavity and Bloch-equation dynamics of spin packet ensembles.

Conventions
-----------
A packet with coupling ``g`` and detuning ``delta`` sees the rotation vector
``Omega = (2 g Re a, -2 g Im a, delta)`` and obeys ``dS/dt = Omega x S``
plus relaxation: transverse at ``1/T2 + Gamma_tot/2`` and longitudinal
toward ``s_z = -1/2`` at ``Gamma_tot = Gamma_P + 1/T1_nr``.  Only the
Purcell share is radiated.  The resonator obeys
``da/dt = -(kappa/2) a + sqrt(kappa_c) a_in - i sum_p w_p g_p sigma_p``
with ``sigma = S_x - i S_y``; the spin term is integrated in linear response
(no back-action on the spins).  The output field is
``a_out = a_in - sqrt(kappa_c) a``.

Driven blocks are stepped with an exact axis-angle rotation followed by
exact relaxation.  Between blocks the evolution is analytic, so long
delays cost nothing.  Uniform detuning grids (:class:`PacketGrid`) use a
fast path: affine block maps computed on a coarse detuning grid and
interpolated in the interaction frame.
"""
from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass, field
import csv
import math

import numpy as np

from . import kernels
from .errors import ConfigError, DomainError
from .physics import (PacketArrays, PacketGrid, ResonatorParams, as_packet_arrays,
                      packet_rates)

#: default integration step inside driven blocks (s)
DEFAULT_DT = 20e-9
#: ring-down is followed until the field falls below this fraction
RINGDOWN_EPS = 1e-6
#: coarse-grid points per 2 pi / T_block for the map interpolation
COARSE_PER_PERIOD = 48


@dataclass(frozen=True)
class PulseSegment:
    """Piecewise-constant input field segment.

    Parameters
    ----------
    kind : {'drive', 'delay'}
    duration : float
        Segment length (s).
    amplitude : float
        Input field amplitude (sqrt(photons/s)); zero for delays.
    phase : float
        Drive phase (rad).
    """

    kind: str
    duration: float
    amplitude: float = 0.0
    phase: float = 0.0

    def __post_init__(self):
        if self.kind not in ("drive", "delay"):
            raise ConfigError(f"unknown segment kind {self.kind!r}", "segment.kind")
        if not (self.duration > 0 and math.isfinite(self.duration)):
            raise ConfigError("duration must be finite and > 0", "segment.duration")
        if not self.amplitude >= 0:
            raise ConfigError("amplitude must be >= 0", "segment.amplitude")
        if self.kind == "delay" and self.amplitude != 0:
            raise ConfigError("delay segments carry no amplitude", "segment.amplitude")

    @classmethod
    def drive(cls, amplitude, duration, phase=0.0):
        return cls("drive", float(duration), float(amplitude), float(phase))

    @classmethod
    def delay(cls, duration):
        return cls("delay", float(duration))

    @property
    def a_in(self) -> complex:
        return self.amplitude * complex(math.cos(self.phase), math.sin(self.phase))


@dataclass(frozen=True)
class PulseSequence:
    """Ordered list of segments starting at t = 0."""

    segments: tuple
    label: str = ""

    def __post_init__(self):
        object.__setattr__(self, "segments", tuple(self.segments))
        if not self.segments:
            raise ConfigError("sequence must be nonempty", "sequence.segments")
        if not math.isfinite(self.total_duration):
            raise ConfigError("total duration must be finite", "sequence.segments")

    @property
    def starts(self) -> np.ndarray:
        d = np.array([s.duration for s in self.segments])
        return np.concatenate(([0.0], np.cumsum(d)[:-1]))

    @property
    def total_duration(self) -> float:
        return float(sum(s.duration for s in self.segments))

    def drive_windows(self):
        """(start, end) of every drive segment with nonzero amplitude."""
        out = []
        for t0, s in zip(self.starts, self.segments):
            if s.kind == "drive" and s.amplitude > 0:
                out.append((float(t0), float(t0 + s.duration)))
        return out


def intracavity_field(segment: PulseSegment, res: ResonatorParams, t, a0=0j):
    """Cavity field during a constant-input segment, starting from ``a0`` at t = 0."""
    t = np.asarray(t, dtype=float)
    if np.any(t < 0) or np.any(t > segment.duration * (1 + 1e-12)):
        raise DomainError("t must lie within the segment")
    ass = 2.0 * math.sqrt(res.kappa_c) * segment.a_in / res.kappa
    out = ass + (a0 - ass) * np.exp(-0.5 * res.kappa * t)
    return complex(out) if np.ndim(out) == 0 else out


class CavityDrive:
    """Analytic drive field of a pulse sequence (no spin contribution)."""

    def __init__(self, sequence: PulseSequence, res: ResonatorParams):
        self.res = res
        self.sequence = sequence
        starts = list(sequence.starts) + [sequence.total_duration]
        a_in = [s.a_in for s in sequence.segments] + [0j]
        a0 = [0j]
        for i, s in enumerate(sequence.segments):
            a0.append(complex(intracavity_field(s, res, s.duration, a0[-1])))
        self.t = np.array(starts)
        self.a_in_seg = np.array(a_in, dtype=complex)
        self.a0 = np.array(a0, dtype=complex)
        self.ass = 2.0 * math.sqrt(res.kappa_c) * self.a_in_seg / res.kappa

    def _index(self, t):
        return np.clip(np.searchsorted(self.t, t, side="right") - 1, 0, None)

    def field(self, t):
        t = np.asarray(t, dtype=float)
        i = self._index(t)
        a = self.ass[i] + (self.a0[i] - self.ass[i]) * np.exp(-0.5 * self.res.kappa * (t - self.t[i]))
        return np.where(t < 0, 0j, a)

    def a_in(self, t):
        t = np.asarray(t, dtype=float)
        return np.where(t < 0, 0j, self.a_in_seg[self._index(t)])

    def output(self, t):
        """Reflected drive at the resonator output (sqrt(photons/s))."""
        return self.a_in(t) - math.sqrt(self.res.kappa_c) * self.field(t)

    def max_field(self) -> float:
        return float(np.max(np.abs(np.concatenate((self.ass, self.a0)))))


def driven_blocks(sequence: PulseSequence, res: ResonatorParams, eps=RINGDOWN_EPS):
    """Intervals that need stepping: drive windows plus their ring-down tails."""
    tail = 2.0 * math.log(1.0 / eps) / res.kappa
    blocks = []
    for t0, t1 in sequence.drive_windows():
        if blocks and t0 <= blocks[-1][1]:
            blocks[-1][1] = max(blocks[-1][1], t1 + tail)
        else:
            blocks.append([t0, t1 + tail])
    return [tuple(b) for b in blocks]


def check_dt(dt, res, g_max, a_max):
    """Raise if ``dt`` does not resolve the cavity and the fastest Rabi rotation."""
    rabi = 2.0 * g_max * a_max
    limit = 0.1 * min(1.0 / res.kappa, 1.0 / rabi if rabi > 0 else math.inf)
    if not dt > 0 or dt > limit * (1 + 1e-9):
        raise ConfigError(f"dt = {dt:.3g} s exceeds stability limit {limit:.3g} s", "dt")


def rabi_pi_amplitude(g_mean: float, duration: float, res: ResonatorParams, angle=math.pi):
    """Input amplitude whose filtered pulse rotates a resonant mean packet by ``angle``.

    The cavity ring-up and ring-down exactly compensate, so the rotation
    angle is ``2 g a_ss T``.
    """
    if not g_mean > 0 or not duration > 0:
        raise DomainError("need g_mean > 0 and duration > 0")
    a_ss = angle / (2.0 * g_mean * duration)
    return a_ss * res.kappa / (2.0 * math.sqrt(res.kappa_c))


@dataclass(frozen=True, eq=False)
class Trajectory:
    """Ensemble observables on the output time grid.

    ``coherent_x/y`` is the full output field (reflected drive plus spin
    emission); ``spin_x/y`` is the spin-emitted part alone.
    """

    times: np.ndarray
    sz_total: np.ndarray
    sx_total: np.ndarray
    sy_total: np.ndarray
    coherent_x: np.ndarray
    coherent_y: np.ndarray
    incoherent_flux: np.ndarray
    spin_x: np.ndarray
    spin_y: np.ndarray
    radiated_flux: np.ndarray
    final: object = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        n = len(self.times)
        for name in ("sz_total", "sx_total", "sy_total", "coherent_x", "coherent_y",
                     "incoherent_flux", "spin_x", "spin_y", "radiated_flux"):
            if len(getattr(self, name)) != n:
                raise DomainError(f"{name} length differs from times")

    @property
    def coherent(self) -> np.ndarray:
        return self.coherent_x + 1j * self.coherent_y

    @property
    def spin_field(self) -> np.ndarray:
        return self.spin_x + 1j * self.spin_y

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["time_s", "sz", "sx", "coherent_x", "incoherent_flux_per_s"])
            for row in zip(self.times, self.sz_total, self.sx_total, self.coherent_x,
                           self.incoherent_flux):
                w.writerow([repr(float(v)) for v in row])


def time_grid(*pieces, t_end=None):
    """Union of uniform pieces ``(t0, t1, step)`` as a sorted unique array."""
    parts = []
    for t0, t1, step in pieces:
        if t1 <= t0:
            continue
        n = int(math.floor((t1 - t0) / step + 1e-9))
        parts.append(t0 + step * np.arange(n + 1))
        parts.append(np.array([t1]))
    t = np.unique(np.concatenate(parts))
    if t_end is not None:
        t = t[t <= t_end]
    # drop near-duplicates created by float roundoff
    keep = np.concatenate(([True], np.diff(t) > 1e-13))
    return t[keep]


# --------------------------------------------------------------------------
# state containers


class _State:
    """Mutable working copy of packet parameters and Bloch components."""

    def __init__(self, packets, res, T1_nonradiative, T2):
        self.grid = isinstance(packets, PacketGrid)
        self.src = packets
        if self.grid:
            n_g, n_f = packets.shape
            g = np.repeat(packets.g, n_f).reshape(n_g, n_f)
            d = np.broadcast_to(packets.delta, (n_g, n_f))
            self.g = g
            self.delta = np.ascontiguousarray(d)
            self.w = packets.weights
        else:
            p = as_packet_arrays(packets)
            self.g, self.delta, self.w = p.g, p.delta, p.weight
            packets = p
        self.sx = np.array(packets.sx, dtype=float)
        self.sy = np.array(packets.sy, dtype=float)
        self.sz = np.array(packets.sz, dtype=float)
        self.T1_nonradiative, self.T2 = T1_nonradiative, T2
        self.gam_rad, self.gam1, self.gam2 = packet_rates(
            self.g, self.delta, res, T1_nonradiative=T1_nonradiative, T2=T2)
        self.W = float(math.fsum(np.ravel(self.w)))

    def packets(self):
        if self.grid:
            return self.src.with_state(self.sx.copy(), self.sy.copy(), self.sz.copy())
        p = as_packet_arrays(self.src)
        return p.with_state(self.sx.ravel().copy(), self.sy.ravel().copy(), self.sz.ravel().copy())

    def free_advance(self, L):
        if L <= 0:
            return
        e1 = np.exp(-self.gam1 * L)
        e2 = np.exp(-self.gam2 * L)
        ph = np.exp(-1j * self.delta * L)
        sig = (self.sx - 1j * self.sy) * ph * e2
        self.sx, self.sy = sig.real.copy(), -sig.imag
        self.sz = -0.5 + (self.sz + 0.5) * e1

    def zero_transverse(self):
        self.sx = np.zeros_like(self.sx)
        self.sy = np.zeros_like(self.sy)

    def sums(self):
        """Instantaneous sums (sz, sx, sy, S_g, F_rad)."""
        w = self.w
        sig = self.sx - 1j * self.sy
        return (float(np.sum(w * self.sz)), float(np.sum(w * self.sx)), float(np.sum(w * self.sy)),
                complex(np.sum(w * self.g * sig)), float(np.sum(w * self.gam_rad * (self.sz + 0.5))))


# --------------------------------------------------------------------------
# free evolution sums

_BIN_THRESHOLD = 2e7
_MAX_BLOCK_RECORDS = 64
_MAX_RECORD_BYTES = 150_000_000
_N_RATE_BINS = 4096


def _longitudinal(st: _State, u):
    """Sum_p w (s_z+1/2) exp(-Gamma_p u) and the radiated counterpart."""
    A = np.vstack([(st.w * (st.sz + 0.5)).ravel(),
                   (st.w * st.gam_rad * (st.sz + 0.5)).ravel()])
    rates = st.gam1.ravel()
    if rates.size * len(u) > _BIN_THRESHOLD and np.ptp(rates) > 0:
        # moment-preserving split of each rate onto two neighbouring bins
        lo, hi = rates.min(), rates.max()
        edges = np.linspace(lo, hi, _N_RATE_BINS)
        pos = (rates - lo) / (edges[1] - edges[0])
        i0 = np.clip(np.floor(pos).astype(np.int64), 0, _N_RATE_BINS - 2)
        f = pos - i0
        Ab = np.zeros((2, _N_RATE_BINS))
        for c in range(2):
            Ab[c] = (np.bincount(i0, A[c] * (1 - f), _N_RATE_BINS)
                     + np.bincount(i0 + 1, A[c] * f, _N_RATE_BINS))
        return kernels.decay_sums(edges, Ab, u)
    return kernels.decay_sums(rates, A, u)


def _transverse(st: _State, u):
    """Complex sums sum w sigma(u) and sum w g sigma(u)."""
    sig = st.sx - 1j * st.sy
    u = np.asarray(u, dtype=float)
    if not np.any(sig):
        return np.zeros((u.size, 2), dtype=complex)
    if st.grid and st.g.shape[0] > 1:
        gam1 = st.gam1
        gw = st.src.g_weights[:, None]
        ref = np.sum(gw * gam1, axis=0)
        eps = gam1 - ref
        x = 0.5 * float(np.max(np.abs(eps))) * float(u.max(initial=0.0))
        if x < 1.0:
            M = 1
            term = 1.0
            while term > 1e-14 and M < 20:
                term *= x / M
                M += 1
            B = np.empty((2, M, st.delta.shape[1]), dtype=complex)
            base = st.w * sig
            epow = np.ones_like(eps)
            fact = 1.0
            for m in range(M):
                if m:
                    epow = epow * eps
                    fact *= m
                B[0, m] = np.sum(base * epow, axis=0) / fact
                B[1, m] = np.sum(base * st.g * epow, axis=0) / fact
            lam = 0.5 * ref + (0.0 if math.isinf(st.T2) else 1.0 / st.T2)
            return kernels.transverse_sums(st.delta[0], lam, B, u)
    B = np.empty((2, 1, sig.size), dtype=complex)
    B[0, 0] = (st.w * sig).ravel()
    B[1, 0] = (st.w * st.g * sig).ravel()
    return kernels.transverse_sums(st.delta.ravel(), st.gam2.ravel(), B, u)


# --------------------------------------------------------------------------
# driven blocks


def _block_steps(b0, b1, drive, rec_times, dt):
    """Sub-step layout of a block: step sizes, midpoints, record indices.

    While the input is off the field only rings down as
    ``exp(-kappa t / 2)``; steps then grow geometrically (up to 16 dt) so
    that ``|a| h^2`` stays below its driven value.
    """
    breaks = drive.t
    knots = np.unique(np.concatenate(([b0, b1], [t for t in breaks if b0 < t < b1],
                                      [t for t in rec_times if b0 < t < b1])))
    q = 0.25 * drive.res.kappa
    hs, mids = [], []
    counts = {b0: 0}
    n_done = 0
    for a, b in zip(knots[:-1], knots[1:]):
        i = int(np.clip(np.searchsorted(breaks, a, side="right") - 1, 0, None))
        if drive.a_in_seg[i] == 0 and a >= breaks[i]:
            t_off = breaks[i]
            edges = [a]
            while edges[-1] < b - 1e-15:
                h = dt * min(16.0, max(1.0, math.exp(q * (edges[-1] - t_off))))
                edges.append(min(b, edges[-1] + h))
            if len(edges) > 2 and edges[-1] - edges[-2] < 0.25 * dt:
                edges.pop(-2)
            e = np.array(edges)
            h_arr = np.diff(e)
            hs.append(h_arr)
            mids.append(e[:-1] + 0.5 * h_arr)
            n_done += h_arr.size
        else:
            n = max(1, int(math.ceil((b - a) / dt - 1e-9)))
            h = (b - a) / n
            hs.append(np.full(n, h))
            mids.append(a + h * (np.arange(n) + 0.5))
            n_done += n
        counts[b] = n_done
    rec_idx = np.array([counts[t] for t in rec_times], dtype=np.int64)
    return np.concatenate(hs), np.concatenate(mids), rec_idx


_MAP_CACHE: "OrderedDict" = OrderedDict()
_MAP_CACHE_SIZE = 8


def clear_map_cache():
    _MAP_CACHE.clear()


def _block_maps(g, delta, gam1, gam2, drive, b0, b1, rec_times, dt, cache_key=None):
    """Affine maps (n_rec, P, 12) for packets through block [b0, b1]."""
    key = None
    if cache_key is not None:
        key = cache_key + (tuple(np.round(np.asarray(rec_times) - b0, 15)), dt, kernels.BACKEND)
        if key in _MAP_CACHE:
            _MAP_CACHE.move_to_end(key)
            return _MAP_CACHE[key]
    h, mids, rec_idx = _block_steps(b0, b1, drive, rec_times, dt)
    field_mid = drive.field(mids)
    maps = kernels.propagate_affine(np.ravel(g), np.ravel(delta), np.ravel(gam1),
                                    np.ravel(gam2), field_mid, h, rec_idx)
    if key is not None:
        _MAP_CACHE[key] = maps
        while len(_MAP_CACHE) > _MAP_CACHE_SIZE:
            _MAP_CACHE.popitem(last=False)
    return maps


def _lagrange_weights(x_coarse0, h, x):
    """4-point Lagrange interpolation weights from a uniform coarse grid."""
    pos = (x - x_coarse0) / h
    i = np.floor(pos).astype(np.int64) - 1
    s = pos - (i + 1)
    w = np.empty((4, x.size))
    w[0] = -s * (s - 1) * (s - 2) / 6
    w[1] = (s + 1) * (s - 1) * (s - 2) / 2
    w[2] = -(s + 1) * s * (s - 2) / 2
    w[3] = (s + 1) * s * (s - 1) / 6
    return i, w


def _apply_maps(st: _State, maps, offsets=None):
    """Apply map (..., 12) arrays to the current state; returns new (sx, sy, sz)."""
    m = maps
    sx, sy, sz = st.sx, st.sy, st.sz
    nx = m[..., 0] * sx + m[..., 1] * sy + m[..., 2] * sz + m[..., 9]
    ny = m[..., 3] * sx + m[..., 4] * sy + m[..., 5] * sz + m[..., 10]
    nz = m[..., 6] * sx + m[..., 7] * sy + m[..., 8] * sz + m[..., 11]
    return nx, ny, nz


def _rotate_rows(maps, phi):
    """Left-multiply maps by a rotation about z by ``phi``."""
    c, s = np.cos(phi)[..., None], np.sin(phi)[..., None]
    out = maps.copy()
    rows_x = maps[..., [0, 1, 2, 9]]
    rows_y = maps[..., [3, 4, 5, 10]]
    out[..., [0, 1, 2, 9]] = c * rows_x - s * rows_y
    out[..., [3, 4, 5, 10]] = s * rows_x + c * rows_y
    return out


class _BlockEngine:
    """Computes maps for the current state container, with the coarse-grid fast path."""

    def __init__(self, st: _State, res, drive, dt, fast, T1_nonradiative, T2):
        self.st, self.res, self.drive, self.dt = st, res, drive, dt
        self.fast = fast and st.grid
        self.T1_nonradiative, self.T2 = T1_nonradiative, T2

    def maps(self, b0, b1, rec_times):
        st = self.st
        if not self.fast:
            m = _block_maps(st.g, st.delta, st.gam1, st.gam2, self.drive, b0, b1, rec_times, self.dt)
            return m.reshape((len(rec_times),) + st.sx.shape + (12,))
        grid = st.src
        T = b1 - b0
        hc = min(2.0 * math.pi / (COARSE_PER_PERIOD * T), self.res.kappa / 10.0)
        if hc <= grid.spacing:
            m = _block_maps(st.g, st.delta, st.gam1, st.gam2, self.drive, b0, b1, rec_times, self.dt)
            return m.reshape((len(rec_times),) + st.sx.shape + (12,))
        d_lo, d_hi = grid.delta[0], grid.delta[-1]
        k0 = int(math.floor(d_lo / hc)) - 2
        n_c = int(math.ceil(d_hi / hc)) + 3 - k0
        x0 = k0 * hc
        dc = x0 + hc * np.arange(n_c)
        n_g = grid.g.size
        gc = np.repeat(grid.g, n_c).reshape(n_g, n_c)
        dcc = np.broadcast_to(dc, (n_g, n_c))
        _, g1c, g2c = packet_rates(gc, dcc, self.res, T1_nonradiative=self.T1_nonradiative, T2=self.T2)
        seg_desc = tuple((round(t - b0, 15), complex(a)) for t, a in
                         zip(self.drive.t, self.drive.a_in_seg) if b0 - 1e-12 <= t < b1)
        a_start = complex(self.drive.field(b0))
        key = ("grid", seg_desc, a_start, round(T, 15), tuple(grid.g), round(x0, 6), round(hc, 9), n_c,
               self.res, self.T1_nonradiative, self.T2)
        mc = _block_maps(gc, dcc, g1c, g2c, self.drive, b0, b1, rec_times, self.dt, cache_key=key)
        mc = mc.reshape(len(rec_times), n_g, n_c, 12)
        offs = np.asarray(rec_times) - b0
        out = np.empty((len(rec_times), n_g, grid.delta.size, 12))
        idx, wts = _lagrange_weights(x0, hc, grid.delta)
        for r, off in enumerate(offs):
            mi = _rotate_rows(mc[r], -np.broadcast_to(dc, (n_g, n_c)) * off)
            acc = np.zeros((n_g, grid.delta.size, 12))
            for q in range(4):
                acc += wts[q][None, :, None] * mi[:, idx + q, :]
            out[r] = _rotate_rows(acc, np.broadcast_to(grid.delta, acc.shape[:2]) * off)
        return out


# --------------------------------------------------------------------------
# main integrator


def evolve_packets(packets, sequence: PulseSequence, res: ResonatorParams, dt=DEFAULT_DT,
                   times=None, T1_nonradiative=None, T2=None, fast=True) -> Trajectory:
    """Evolve packets under a pulse sequence and record ensemble observables.

    Parameters
    ----------
    packets : PacketGrid, PacketArrays or sequence of SpinPacket
        Initial packet states.  Relaxation parameters come from the grid
        (or from the keyword arguments).
    sequence : PulseSequence
    res : ResonatorParams
    dt : float
        Step inside driven blocks (s).
    times : array_like, optional
        Output grid (s, ascending, starting at or before the first pulse).
        Defaults to :func:`default_times`.
    T1_nonradiative, T2 : float, optional
        Override the relaxation times attached to ``packets``.
    fast : bool
        Use the coarse-map path for :class:`PacketGrid` inputs.

    Returns
    -------
    Trajectory
        With ``final`` holding the packet states at the last output time.
    """
    T1nr = T1_nonradiative if T1_nonradiative is not None else getattr(packets, "T1_nonradiative", math.inf)
    T2v = T2 if T2 is not None else getattr(packets, "T2", math.inf)
    drive = CavityDrive(sequence, res)
    st = _State(packets, res, T1nr, T2v)
    check_dt(dt, res, float(np.max(np.abs(st.g))), drive.max_field())
    if times is None:
        times = default_times(sequence, res)
    times = np.asarray(times, dtype=float)
    if times.ndim != 1 or times.size < 1 or np.any(np.diff(times) <= 0):
        raise ConfigError("output times must be strictly increasing", "times")
    if times[0] < 0:
        raise ConfigError("output times must be >= 0", "times")

    blocks = driven_blocks(sequence, res)
    n = times.size
    sz = np.empty(n)
    sx = np.empty(n)
    sy = np.empty(n)
    sg = np.zeros(n, dtype=complex)
    frad = np.empty(n)
    engine = _BlockEngine(st, res, drive, dt, fast, T1nr, T2v)

    recur = st.src.recurrence_time if st.grid else math.inf
    margin = 20.0 / res.kappa
    coh_origin = None  # start of the first block since the last coherence reset
    horizon = math.inf
    epoch_blocks = []
    t_now = 0.0
    t_last = times[-1]

    def free_interval(t_a, t_b, upto_inclusive=False):
        nonlocal t_now
        sel = (times >= t_a) & ((times <= t_b) if upto_inclusive else (times < t_b))
        idx = np.nonzero(sel)[0]
        if idx.size:
            u = times[idx] - t_a
            L = _longitudinal(st, u)
            sz[idx] = -0.5 * st.W + L[:, 0]
            frad[idx] = L[:, 1]
            tr = _transverse(st, u)
            ok = times[idx] < horizon
            sx[idx] = np.where(ok, tr[:, 0].real, 0.0)
            sy[idx] = np.where(ok, -tr[:, 0].imag, 0.0)
            sg[idx] = np.where(ok, tr[:, 1], 0.0)

    for b0, b1 in blocks:
        if b0 > t_last:
            break
        free_interval(t_now, b0)
        gap = b0 - t_now
        st.free_advance(gap)
        if math.isfinite(T2v) and gap > 30.0 * T2v:
            st.zero_transverse()
            coh_origin, horizon, epoch_blocks = None, math.inf, []
        if coh_origin is None:
            coh_origin = b0
            horizon = b0 + recur - margin
        epoch_blocks.append((b0, b1))
        sel = np.nonzero((times >= b0) & (times < b1))[0]
        n_rec = int(np.clip(_MAX_RECORD_BYTES // (96 * max(st.sx.size, 1)), 2, _MAX_BLOCK_RECORDS))
        pick = sel
        if sel.size > n_rec:
            pick = sel[np.unique(np.linspace(0, sel.size - 1, n_rec).round().astype(int))]
        rec = np.concatenate((times[pick], [b1]))
        maps = engine.maps(b0, b1, rec)
        w = st.w
        vals = np.empty((rec.size, 5), dtype=complex)
        for j in range(rec.size):
            nx, ny, nz = _apply_maps(st, maps[j])
            vals[j] = (np.sum(w * nz), np.sum(w * nx), np.sum(w * ny),
                       np.sum(w * st.g * (nx - 1j * ny)), np.sum(w * st.gam_rad * (nz + 0.5)))
        if sel.size:
            tt = rec
            for col, arr in ((0, sz), (1, sx), (2, sy), (4, frad)):
                arr[sel] = np.interp(times[sel], tt, vals[:, col].real)
            sgv = (np.interp(times[sel], tt, vals[:, 3].real)
                   + 1j * np.interp(times[sel], tt, vals[:, 3].imag))
            sg[sel] = np.where(times[sel] < horizon, sgv, 0.0)
        st.sx, st.sy, st.sz = _apply_maps(st, maps[-1], None)
        t_now = b1
    if t_now <= t_last:
        free_interval(t_now, t_last, upto_inclusive=True)
        final_shift = t_last - t_now
    else:
        final_shift = 0.0

    _check_echo_horizon(epoch_blocks, horizon, t_last, T2v)

    # spin-radiated cavity field, linear response
    a_s = _integrate_spin_field(times, sg, res.kappa)
    spin_out = -math.sqrt(res.kappa_c) * a_s
    coh = drive.output(times) + spin_out
    st.free_advance(final_shift)
    if math.isfinite(T2v) and final_shift > 30.0 * T2v:
        st.zero_transverse()
    meta = {"recurrence_time": recur, "horizon": horizon, "blocks": blocks,
            "backend": kernels.BACKEND, "fast": engine.fast}
    return Trajectory(times=times, sz_total=sz, sx_total=sx, sy_total=sy,
                      coherent_x=coh.real.copy(), coherent_y=coh.imag.copy(),
                      incoherent_flux=np.maximum(frad, 0.0) * res.collection,
                      spin_x=spin_out.real.copy(), spin_y=spin_out.imag.copy(),
                      radiated_flux=np.maximum(frad, 0.0), final=st.packets(), meta=meta)


def _check_echo_horizon(blocks, horizon, t_last, T2):
    if not math.isfinite(horizon) or t_last < horizon:
        return
    centers = [0.5 * (a + b) for a, b in blocks]
    for i in range(len(centers)):
        for j in range(i + 1, len(centers)):
            echo = 2 * centers[j] - centers[i]
            weight = math.exp(-(echo - centers[i]) / T2) if math.isfinite(T2) else 1.0
            if horizon <= echo <= t_last and weight > 1e-3:
                raise ConfigError(
                    f"expected echo at {echo:.6g} s lies beyond the grid recurrence horizon "
                    f"{horizon:.6g} s; increase n_freq_bins", "ensemble.n_freq_bins")


def _integrate_spin_field(times, sg, kappa):
    """Solve da/dt = -(kappa/2) a - i S(t) with S piecewise linear on ``times``."""
    lam = 0.5 * kappa
    a = np.zeros(times.size, dtype=complex)
    if not np.any(sg):
        return a
    h = np.diff(times)
    E = np.exp(-lam * h)
    phi1 = -np.expm1(-lam * h) / lam
    phi2 = h * phi1 - (1.0 - E * (1.0 + lam * h)) / lam**2
    slope = np.diff(sg) / h
    incr = -1j * (sg[:-1] * phi1 + slope * phi2)
    acc = 0j
    for k in range(h.size):
        acc = E[k] * acc + incr[k]
        a[k + 1] = acc
    return a


def default_times(sequence: PulseSequence, res: ResonatorParams, t_end=None, fine_step=20e-9,
                  coarse_step=None, fine_after=10e-6):
    """Output grid fine around driven blocks and coarse elsewhere."""
    blocks = driven_blocks(sequence, res)
    if t_end is None:
        t_end = (blocks[-1][1] if blocks else sequence.total_duration) + fine_after
    if coarse_step is None:
        coarse_step = max(t_end / 2000.0, fine_step)
    pieces = [(0.0, t_end, coarse_step)]
    for b0, b1 in blocks:
        pieces.append((b0, min(b1 + fine_after, t_end), fine_step))
    return time_grid(*pieces, t_end=t_end)


def echo_photons(traj: Trajectory, t0, t1) -> float:
    """Spin-emitted coherent photons leaving the resonator in [t0, t1]."""
    return integrate_window(traj.times, np.abs(traj.spin_field) ** 2, t0, t1)


def integrate_window(t, y, t0, t1) -> float:
    """Exact integral over [t0, t1] of the piecewise-linear interpolant of ``y``."""
    t = np.asarray(t, dtype=float)
    y = np.asarray(y, dtype=float)
    return float(integrate_windows(t, y, np.array([t0]), np.array([t1]))[0])


def integrate_windows(t, y, t0, t1):
    """Vectorized :func:`integrate_window` over many windows."""
    t = np.asarray(t, dtype=float)
    y = np.asarray(y, dtype=float)
    seg = 0.5 * (y[1:] + y[:-1]) * np.diff(t)
    cum = np.concatenate(([0.0], np.cumsum(seg)))

    def F(x):
        x = np.clip(x, t[0], t[-1])
        i = np.clip(np.searchsorted(t, x, side="right") - 1, 0, t.size - 2)
        hh = t[i + 1] - t[i]
        s = x - t[i]
        slope = (y[i + 1] - y[i]) / hh
        return cum[i] + y[i] * s + 0.5 * slope * s * s

    return F(np.asarray(t1, dtype=float)) - F(np.asarray(t0, dtype=float))


def echo_envelope_width(traj: Trajectory, t_center, half_span):
    """Measured echo duration T_E: 1/e full width of the emitted intensity envelope.

    For an amplitude envelope ``exp(-2|u|/T_E)`` the intensity falls to 1/e
    at ``|u| = T_E/4``, so ``T_E = 2 x (1/e half width of intensity)``.
    """
    t = traj.times
    sel = (t > t_center - half_span) & (t < t_center + half_span)
    I = np.abs(traj.spin_field[sel]) ** 2
    tt = t[sel]
    if I.size < 3 or I.max() <= 0:
        return math.nan
    k = int(np.argmax(I))
    thr = I[k] / math.e
    left = np.nonzero(I[:k] < thr)[0]
    right = np.nonzero(I[k:] < thr)[0]
    if not left.size or not right.size:
        return math.nan
    i0, i1 = left[-1], k + right[0]
    # linear interpolation of the crossings
    tl = np.interp(thr, [I[i0], I[i0 + 1]], [tt[i0], tt[i0 + 1]])
    tr = np.interp(thr, [I[i1], I[i1 - 1]], [tt[i1], tt[i1 - 1]])
    return float(2.0 * (tr - tl))


def echo_amplitude_analytic(n_spins, eta_col, gamma_p, t_e):
    """Order-of-magnitude echo quadrature amplitude ``N sqrt(eta Gamma T_E / 2)``.

    Valid in the weak-emission limit ``N Gamma T_E << 1``; the echo photon
    number is its square.
    """
    if n_spins < 0 or eta_col < 0 or gamma_p < 0 or t_e < 0:
        raise DomainError("inputs must be >= 0")
    if n_spins * gamma_p * t_e > 0.1:
        import warnings
        warnings.warn("N Gamma T_E not << 1; echo amplitude formula outside its range")
    return n_spins * math.sqrt(eta_col * gamma_p * t_e / 2.0)
