"""Static domain types and closed-form formulas.

All frequencies and rates are angular (rad/s) internally.  Spin densities
are expressed per unit of angular detuning (spins per rad/s).
"""
from __future__ import annotations

from collections.abc import Sequence
from dataclasses import dataclass, field, replace
import math

import numpy as np

from .errors import ConfigError, DomainError

TWO_PI = 2.0 * np.pi


def hz(f):
    """Convert an ordinary frequency (Hz) to angular units (rad/s)."""
    return TWO_PI * f


@dataclass(frozen=True)
class ResonatorParams:
    """Single-port resonator.

    Parameters
    ----------
    omega0 : float
        Resonance frequency (rad/s).
    kappa_i : float
        Internal loss rate (rad/s).
    kappa_c : float
        Coupling rate to the measurement line (rad/s).
    """

    omega0: float
    kappa_i: float
    kappa_c: float

    def __post_init__(self):
        if not self.kappa_i > 0:
            raise DomainError(f"kappa_i must be > 0, got {self.kappa_i}")
        if not self.kappa_c > 0:
            raise DomainError(f"kappa_c must be > 0, got {self.kappa_c}")
        if not np.isfinite(self.omega0):
            raise DomainError("omega0 must be finite")

    @property
    def kappa(self) -> float:
        return self.kappa_i + self.kappa_c

    @property
    def collection(self) -> float:
        return self.kappa_c / self.kappa


@dataclass(frozen=True)
class EnsembleConfig:
    """Spin ensemble description.

    Parameters
    ----------
    rho_spin : float
        Spectral spin density at the line center (spins per rad/s).
    g0_mean, g0_sigma : float
        Mean and standard deviation of the Gaussian coupling distribution (rad/s).
    T1_nonradiative : float
        Non-Purcell relaxation time (s); ``inf`` disables it.
    T2 : float
        Coherence time (s); ``inf`` disables it.
    detuning_span : float or None
        Full width of the detuning window (rad/s).  ``None`` means 10 kappa.
    n_freq_bins : int or None
        Number of detuning bins.  ``None`` sizes the grid from the
        coherence horizon requested by the caller.
    n_g_bins : int
        Number of Gauss-Hermite nodes for the coupling distribution.
    line_center : float
        Center of the inhomogeneous line relative to the resonator (rad/s).
    line_fwhm : float
        FWHM of a Gaussian inhomogeneous line (rad/s); ``inf`` means flat.
    """

    rho_spin: float
    g0_mean: float
    g0_sigma: float = 0.0
    T1_nonradiative: float = math.inf
    T2: float = math.inf
    detuning_span: float | None = None
    n_freq_bins: int | None = None
    n_g_bins: int = 21
    line_center: float = 0.0
    line_fwhm: float = math.inf

    def __post_init__(self):
        if not self.rho_spin >= 0:
            raise ConfigError("must be >= 0", "ensemble.rho_spin")
        if not self.g0_sigma >= 0:
            raise ConfigError("must be >= 0", "ensemble.g0_sigma")
        if not self.T2 > 0:
            raise ConfigError("must be > 0", "ensemble.T2")
        if not self.T1_nonradiative > 0:
            raise ConfigError("must be > 0", "ensemble.T1_nonradiative")
        if self.n_g_bins < 1:
            raise ConfigError("grid must be nonempty", "ensemble.n_g_bins")
        if self.n_freq_bins is not None and self.n_freq_bins < 1:
            raise ConfigError("grid must be nonempty", "ensemble.n_freq_bins")
        if self.detuning_span is not None and not self.detuning_span > 0:
            raise ConfigError("must be > 0", "ensemble.detuning_span")
        if not self.line_fwhm > 0:
            raise ConfigError("must be > 0", "ensemble.line_fwhm")

    def with_(self, **kw) -> "EnsembleConfig":
        return replace(self, **kw)

    def span(self, kappa: float) -> float:
        return 10.0 * kappa if self.detuning_span is None else self.detuning_span

    def density(self, delta):
        """Spin density (spins per rad/s) at detuning ``delta``."""
        delta = np.asarray(delta, dtype=float)
        if math.isinf(self.line_fwhm):
            return np.full(delta.shape, self.rho_spin)
        x = (delta - self.line_center) / self.line_fwhm
        return self.rho_spin * np.exp(-4.0 * math.log(2.0) * x * x)


@dataclass(frozen=True)
class SpinPacket:
    """Subset of spins sharing coupling and detuning, evolved as one Bloch vector."""

    g0: float
    delta: float
    weight: float
    sx: float = 0.0
    sy: float = 0.0
    sz: float = -0.5

    def __post_init__(self):
        if not self.weight >= 0:
            raise DomainError("packet weight must be >= 0")
        if self.sx**2 + self.sy**2 + self.sz**2 > 0.25 + 1e-9:
            raise DomainError("Bloch vector longer than 1/2")


@dataclass(frozen=True)
class EfficiencyBudget:
    """Factors of the overall spin-to-click efficiency."""

    eta_d: float
    eta_duty: float
    eta_int: float
    eta_col: float

    def __post_init__(self):
        for name in ("eta_d", "eta_duty", "eta_int", "eta_col"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise DomainError(f"{name} must be in [0, 1], got {v}")


@dataclass(frozen=True, eq=False)
class PacketArrays:
    """Flat struct-of-arrays view of an arbitrary packet list."""

    g: np.ndarray
    delta: np.ndarray
    weight: np.ndarray
    sx: np.ndarray
    sy: np.ndarray
    sz: np.ndarray
    T1_nonradiative: float = math.inf
    T2: float = math.inf

    def __len__(self):
        return self.g.size

    def with_state(self, sx, sy, sz) -> "PacketArrays":
        return replace(self, sx=sx, sy=sy, sz=sz)

    def to_packets(self) -> list:
        return [SpinPacket(float(a), float(b), float(c), float(d), float(e), float(f))
                for a, b, c, d, e, f in zip(self.g, self.delta, self.weight,
                                            self.sx, self.sy, self.sz)]


@dataclass(frozen=True, eq=False)
class PacketGrid(Sequence):
    """Packets on a (g0, delta) product grid with a uniform detuning axis.

    Behaves as a read-only sequence of :class:`SpinPacket` (g-major order)
    while keeping the struct-of-arrays layout used by the integrators.
    State arrays have shape ``(n_g, n_f)``.
    """

    g: np.ndarray
    g_weights: np.ndarray
    delta: np.ndarray
    freq_weights: np.ndarray
    sx: np.ndarray
    sy: np.ndarray
    sz: np.ndarray
    spacing: float = field(default=0.0)
    T1_nonradiative: float = math.inf
    T2: float = math.inf

    @property
    def shape(self):
        return (self.g.size, self.delta.size)

    @property
    def weights(self) -> np.ndarray:
        return np.outer(self.g_weights, self.freq_weights)

    @property
    def total_weight(self) -> float:
        return float(self.g_weights.sum() * math.fsum(self.freq_weights))

    @property
    def recurrence_time(self) -> float:
        """Revival period of a uniform detuning grid."""
        return TWO_PI / self.spacing if self.spacing > 0 else math.inf

    def __len__(self):
        return self.g.size * self.delta.size

    def __getitem__(self, i):
        if isinstance(i, slice):
            return [self[j] for j in range(*i.indices(len(self)))]
        n_f = self.delta.size
        if i < 0:
            i += len(self)
        if not 0 <= i < len(self):
            raise IndexError(i)
        j, k = divmod(i, n_f)
        return SpinPacket(float(self.g[j]), float(self.delta[k]),
                          float(self.g_weights[j] * self.freq_weights[k]),
                          float(self.sx[j, k]), float(self.sy[j, k]), float(self.sz[j, k]))

    def with_state(self, sx, sy, sz) -> "PacketGrid":
        return replace(self, sx=sx, sy=sy, sz=sz)

    def reweighted(self, freq_weights) -> "PacketGrid":
        return replace(self, freq_weights=np.asarray(freq_weights, dtype=float))

    def flat(self) -> PacketArrays:
        n_g, n_f = self.shape
        return PacketArrays(
            T1_nonradiative=self.T1_nonradiative, T2=self.T2,
            g=np.repeat(self.g, n_f),
            delta=np.tile(self.delta, n_g),
            weight=self.weights.ravel(),
            sx=self.sx.ravel().copy(), sy=self.sy.ravel().copy(), sz=self.sz.ravel().copy())


def as_packet_arrays(packets) -> PacketArrays:
    """Coerce a packet container into :class:`PacketArrays`."""
    if isinstance(packets, PacketArrays):
        return packets
    if isinstance(packets, PacketGrid):
        return packets.flat()
    packets = list(packets)
    if not packets:
        raise ConfigError("packet list is empty", "packets")
    cols = np.array([[p.g0, p.delta, p.weight, p.sx, p.sy, p.sz] for p in packets], dtype=float)
    return PacketArrays(*(cols[:, i].copy() for i in range(6)))


def purcell_rate(g0, kappa, delta=0.0):
    """Radiative decay rate of a spin coupled to a lossy resonator.

    Parameters
    ----------
    g0 : float or array_like
        Spin-photon coupling (rad/s).
    kappa : float
        Resonator energy decay rate (rad/s).
    delta : float or array_like
        Spin-resonator detuning (rad/s).

    Returns
    -------
    float or ndarray
        ``kappa g0**2 / (kappa**2/4 + delta**2)`` in 1/s.
    """
    if not np.all(np.asarray(kappa) > 0):
        raise DomainError("kappa must be > 0")
    g0 = np.asarray(g0, dtype=float)
    delta = np.asarray(delta, dtype=float)
    out = kappa * g0 * g0 / (0.25 * kappa * kappa + delta * delta)
    return float(out) if out.ndim == 0 else out


def collection_efficiency(kappa_c, kappa_i):
    """Fraction of resonator photons leaking into the measurement line."""
    if not kappa_c > 0 or kappa_i < 0:
        raise DomainError("need kappa_c > 0 and kappa_i >= 0")
    return kappa_c / (kappa_c + kappa_i)


def overall_efficiency(budget: EfficiencyBudget) -> float:
    """Product of all efficiency factors."""
    return budget.eta_d * budget.eta_duty * budget.eta_int * budget.eta_col


def integration_window_factor(t_start, t_end, T1):
    """Fraction of an exponential decay falling inside ``[t_start, t_end]``."""
    if t_end < t_start or t_start < 0:
        raise DomainError("window must satisfy 0 <= t_start <= t_end")
    if not T1 > 0:
        raise DomainError("T1 must be > 0")
    hi = 0.0 if math.isinf(t_end) else math.exp(-t_end / T1)
    return math.exp(-t_start / T1) - hi


#: largest packet grid accepted by :func:`discretize_ensemble`
MAX_PACKETS = 2_000_000


def auto_freq_bins(span: float, horizon: float) -> int:
    """Bins needed so the grid recurrence 2 pi / spacing exceeds ``horizon``."""
    n = int(math.ceil(span * horizon / TWO_PI * 1.05)) + 1
    n += (n + 1) % 2  # odd, so that delta = 0 is a node
    return max(n, 201)


def discretize_ensemble(config: EnsembleConfig, kappa: float, horizon: float | None = None) -> PacketGrid:
    """Discretize the ensemble on a (g0, delta) product grid.

    The detuning axis uses the midpoint rule over ``config.span(kappa)``; the
    coupling axis uses probabilists' Gauss-Hermite nodes so the Gaussian
    moments are integrated exactly.  All packets start in the ground state.

    Parameters
    ----------
    config : EnsembleConfig
    kappa : float
        Resonator linewidth (rad/s), used for the default span.
    horizon : float, optional
        Longest free-evolution time over which transverse sums must stay
        free of grid revivals; used only when ``config.n_freq_bins`` is None.
    """
    if not kappa > 0:
        raise DomainError("kappa must be > 0")
    span = config.span(kappa)
    n_f = config.n_freq_bins
    if n_f is None:
        n_f = 201 if horizon is None else auto_freq_bins(span, horizon)
    n_total = n_f * (1 if config.g0_sigma == 0.0 else config.n_g_bins)
    if n_total > MAX_PACKETS:
        raise ConfigError(f"packet grid of {n_total} packets exceeds the limit of {MAX_PACKETS}; "
                          "shorten the free-evolution horizon or the detuning span",
                          "ensemble.n_freq_bins")
    h = span / n_f
    delta = -0.5 * span + (np.arange(n_f) + 0.5) * h
    freq_w = config.density(delta) * h

    if config.g0_sigma == 0.0 or config.n_g_bins == 1:
        g = np.array([config.g0_mean])
        gw = np.array([1.0])
    else:
        x, w = np.polynomial.hermite_e.hermegauss(config.n_g_bins)
        g = config.g0_mean + config.g0_sigma * x
        gw = w / w.sum()
    shape = (g.size, n_f)
    return PacketGrid(g=g, g_weights=gw, delta=delta, freq_weights=freq_w,
                      sx=np.zeros(shape), sy=np.zeros(shape), sz=np.full(shape, -0.5),
                      spacing=h, T1_nonradiative=config.T1_nonradiative, T2=config.T2)


def packet_rates(g, delta, res: ResonatorParams, ens: EnsembleConfig | None = None,
                 T1_nonradiative=math.inf, T2=math.inf):
    """Radiative, total longitudinal and transverse rates of packets."""
    if ens is not None:
        T1_nonradiative, T2 = ens.T1_nonradiative, ens.T2
    gam_rad = purcell_rate(g, res.kappa, delta)
    gam_rad = np.asarray(gam_rad, dtype=float)
    gam1 = gam_rad + (0.0 if math.isinf(T1_nonradiative) else 1.0 / T1_nonradiative)
    gam2 = 0.5 * gam1 + (0.0 if math.isinf(T2) else 1.0 / T2)
    return gam_rad, gam1, gam2


def incoherent_flux(packets, res: ResonatorParams) -> float:
    """Incoherent photon rate leaving the resonator into the line (photons/s)."""
    p = as_packet_arrays(packets)
    gam = purcell_rate(p.g, res.kappa, p.delta)
    return float(math.fsum(p.weight * gam * (p.sz + 0.5)) * res.collection)


def excited_number(packets) -> float:
    """Number of excitations, sum of weight (s_z + 1/2)."""
    p = as_packet_arrays(packets)
    return float(math.fsum(p.weight * (p.sz + 0.5)))
