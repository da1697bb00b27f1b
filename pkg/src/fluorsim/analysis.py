"""Binning, count statistics, least-squares fits and signal-to-noise formulas."""
from __future__ import annotations

from dataclasses import dataclass, field
import math
import warnings

import numpy as np
from scipy import stats

from .errors import ConfigError, DomainError, InputError

#: relative parameter-change tolerance of the fitter
FIT_XTOL = 1e-10
FIT_MAX_ITER = 500


@dataclass(frozen=True, eq=False)
class RateTrace:
    """Mean click rate per wall-clock bin.

    ``counts`` and ``exposure`` (seeing cycles x period, summed over
    repetitions) are kept so traces can be re-binned exactly.
    """

    bin_centers: np.ndarray
    rates: np.ndarray
    bin_width: float
    n_repetitions: int
    counts: np.ndarray = None
    exposure: np.ndarray = None

    def __post_init__(self):
        if np.any(np.asarray(self.rates) < 0):
            raise DomainError("rates must be >= 0")

    def sigmas(self) -> np.ndarray:
        """Poisson standard errors of the rates, with counts floored at one."""
        exp = np.where(self.exposure > 0, self.exposure, np.inf)
        return np.sqrt(np.maximum(self.counts, 1.0)) / exp

    def rebin(self, factor: int) -> "RateTrace":
        """Merge ``factor`` consecutive bins (trailing partial bin dropped)."""
        factor = int(factor)
        if factor < 1:
            raise ConfigError("rebin factor must be >= 1", "factor")
        n = (len(self.counts) // factor) * factor
        c = self.counts[:n].reshape(-1, factor).sum(axis=1)
        e = self.exposure[:n].reshape(-1, factor).sum(axis=1)
        centers = self.bin_centers[:n].reshape(-1, factor).mean(axis=1)
        return RateTrace(centers, _safe_rate(c, e), self.bin_width * factor, self.n_repetitions, c, e)

    def to_csv(self, path):
        np.savetxt(path, np.column_stack((self.bin_centers, self.rates, self.sigmas())),
                   delimiter=",", header="time_s,rate_per_s,sigma_per_s", comments="")


def _safe_rate(counts, exposure):
    return np.where(exposure > 0, counts / np.where(exposure > 0, exposure, 1.0), 0.0)


def bin_counts(records, bin_width) -> RateTrace:
    """Mean click rate per bin across repetitions.

    Bins hold a whole number of cycles (``round(bin_width / period)``), so
    the effective bin width is a multiple of the cycle period.  Blind
    cycles contribute neither counts nor exposure.  ``records`` may be any
    iterable (it is consumed once).
    """
    t = None
    n_rec = 0
    for r in records:
        if t is None:
            t = np.asarray(r.cycle_times, dtype=float)
            period = float(np.median(np.diff(t))) if t.size > 1 else bin_width
            if bin_width < period * (1 - 1e-9):
                raise ConfigError("bin narrower than one cycle", "bin_width")
            k = max(1, int(round(bin_width / period)))
            nb = t.size // k
            n = nb * k
            clicks = np.zeros(n, dtype=np.int64)
            seeing = np.zeros(n, dtype=np.int64)
        elif len(r.cycle_times) != t.size or not np.array_equal(r.cycle_times, t):
            raise InputError("records must share a common cycle grid")
        clicks += np.asarray(r.clicks[:n], dtype=bool)
        seeing += ~np.asarray(r.blind_mask[:n], dtype=bool)
        n_rec += 1
    if t is None:
        raise InputError("no records")
    c = clicks.reshape(nb, k).sum(axis=1).astype(float)
    e = seeing.reshape(nb, k).sum(axis=1) * period
    centers = t[:n].reshape(nb, k).mean(axis=1)
    return RateTrace(centers, _safe_rate(c, e), k * period, n_rec, c, e)


# --------------------------------------------------------------------------
# Levenberg-Marquardt


@dataclass(frozen=True)
class FitResult:
    """Least-squares estimate.

    ``gradient`` is J^T W r at the optimum and ``gradient_initial`` at the
    starting point (weighted residuals).
    """

    params: dict
    sigmas: dict
    residual_norm: float
    converged: bool
    n_iter: int = 0
    message: str = ""
    covariance: np.ndarray = None
    gradient: np.ndarray = None
    gradient_initial: np.ndarray = None
    names: tuple = field(default_factory=tuple)

    def to_dict(self) -> dict:
        return {"params": {k: _jsonable(v) for k, v in self.params.items()},
                "sigmas": {k: _jsonable(v) for k, v in self.sigmas.items()},
                "residual_norm": _jsonable(self.residual_norm),
                "converged": bool(self.converged), "message": self.message}


def _jsonable(v):
    v = float(v)
    return v if math.isfinite(v) else None


def levenberg_marquardt(resid, jac, p0, xtol=FIT_XTOL, max_iter=FIT_MAX_ITER):
    """Damped Gauss-Newton minimization of ``|resid(p)|^2``.

    Parameters
    ----------
    resid : callable
        Weighted residual vector ``r(p)``.
    jac : callable
        Jacobian ``dr/dp``.
    p0 : array_like
        Starting point.

    Returns
    -------
    p, r, J, n_iter, converged, message, g0
    """
    p = np.asarray(p0, dtype=float).copy()
    r = resid(p)
    J = jac(p)
    if not (np.all(np.isfinite(r)) and np.all(np.isfinite(J))):
        return p, r, J, 0, False, "non-finite residual at start", np.full(p.size, np.nan)
    g0 = J.T @ r
    cost = float(r @ r)
    lam = 1e-3
    for it in range(1, max_iter + 1):
        A = J.T @ J
        g = J.T @ r
        d = np.diag(A).copy()
        d[d <= 0] = 1.0
        improved = False
        while lam < 1e16:
            try:
                step = np.linalg.solve(A + lam * np.diag(d), -g)
            except np.linalg.LinAlgError:
                lam *= 10.0
                continue
            pn = p + step
            rn = resid(pn)
            cn = float(rn @ rn) if np.all(np.isfinite(rn)) else math.inf
            if cn <= cost:
                improved = True
                break
            lam *= 10.0
        if not improved:
            # no descent possible: at a (numerical) minimum
            return p, r, J, it, True, "no further descent", g0
        small = np.all(np.abs(step) <= xtol * (np.abs(pn) + xtol))
        p, r, cost = pn, rn, cn
        J = jac(p)
        lam = max(lam / 10.0, 1e-12)
        if small:
            return p, r, J, it, True, "parameter change below tolerance", g0
    return p, r, J, max_iter, False, "maximum iterations reached", g0


def _finish(names, p, r, J, n_iter, ok, msg, g0, absolute_sigma, transform=None):
    dof = max(r.size - p.size, 1)
    try:
        cov = np.linalg.inv(J.T @ J)
        if not absolute_sigma:
            cov = cov * float(r @ r) / dof
        sig = np.sqrt(np.maximum(np.diag(cov), 0.0))
    except np.linalg.LinAlgError:
        cov = np.full((p.size, p.size), np.nan)
        sig = np.full(p.size, np.nan)
    params = dict(zip(names, p.tolist()))
    sigmas = dict(zip(names, sig.tolist()))
    if transform is not None:
        transform(params, sigmas)
    finite = all(math.isfinite(v) for v in params.values())
    finite_s = all(math.isfinite(v) for k, v in sigmas.items() if k in names)
    ok = bool(ok and finite and finite_s)
    return FitResult(params, sigmas, float(np.sqrt(r @ r)), ok, n_iter, msg, cov, J.T @ r, g0, tuple(names))


def _as_weights(y, sigma):
    if sigma is None:
        return np.ones_like(y), False
    sigma = np.asarray(sigma, dtype=float)
    if np.any(sigma <= 0):
        raise DomainError("sigma must be > 0")
    return 1.0 / sigma, True


# --------------------------------------------------------------------------
# exponential


def exponential_model(t, amplitude, tau, offset):
    return amplitude * np.exp(-t / tau) + offset


def _exp_init(t, y):
    n = t.size
    tail = y[-max(2, n // 5):]
    b0 = float(np.median(tail))
    z = y - b0
    sign = 1.0 if np.sum(z[: max(2, n // 3)]) >= 0 else -1.0
    z = sign * z
    good = z > 0.05 * np.max(np.abs(z)) if np.max(np.abs(z)) > 0 else np.zeros(n, bool)
    if good.sum() >= 2:
        slope, icept = np.polyfit(t[good] - t[0], np.log(z[good]), 1)
    else:
        slope, icept = -1.0 / max(t[-1] - t[0], 1e-300), 0.0
    span = max(t[-1] - t[0], 1e-300)
    tau = -1.0 / slope if slope < 0 else span
    tau = float(np.clip(tau, span / 100.0, 100.0 * span))
    amp = sign * math.exp(icept) * math.exp(t[0] / tau)
    return np.array([amp, tau, b0])


def fit_exponential_curve(t, y, sigma=None, p0=None, absolute_sigma=None,
                          fixed_offset=None) -> FitResult:
    """Weighted fit of ``A exp(-t/tau) + B``.

    Parameters
    ----------
    t, y : array_like
    sigma : array_like, optional
        Standard errors; unweighted (and sigmas rescaled by the residual
        variance) when omitted.
    p0 : (A, tau, B), optional
        Start; default from a log-linear regression on baseline-subtracted data.
    fixed_offset : float, optional
        Hold ``B`` at this value (reported with zero uncertainty).
    """
    t = np.asarray(t, dtype=float)
    y = np.asarray(y, dtype=float)
    if t.size != y.size:
        raise InputError("t and y differ in length")
    n_free = 2 if fixed_offset is not None else 3
    if t.size < n_free + 2:
        raise InputError(f"need at least {n_free + 2} points for an exponential fit")
    w, has_sigma = _as_weights(y, sigma)
    if absolute_sigma is None:
        absolute_sigma = has_sigma
    if p0 is not None:
        start = np.asarray(p0, dtype=float)
    elif fixed_offset is not None:
        start = _exp_init_fixed(t, y, fixed_offset)
    else:
        start = _exp_init(t, y)
    # parameterize by the rate k = 1/tau (smooth through k = 0)
    if fixed_offset is None:
        q0 = np.array([start[0], 1.0 / start[1], start[2]])
        names = ("amplitude", "rate", "offset")

        def resid(q):
            return w * (q[0] * np.exp(-q[1] * t) + q[2] - y)

        def jac(q):
            e = np.exp(-q[1] * t)
            return np.column_stack((w * e, -w * q[0] * t * e, w))
    else:
        B = float(fixed_offset)
        q0 = np.array([start[0], 1.0 / start[1]])
        names = ("amplitude", "rate")

        def resid(q):
            return w * (q[0] * np.exp(-q[1] * t) + B - y)

        def jac(q):
            e = np.exp(-q[1] * t)
            return np.column_stack((w * e, -w * q[0] * t * e))

    q, r, J, it, ok, msg, g0 = levenberg_marquardt(resid, jac, q0)

    def transform(params, sigmas):
        k, sk = params.pop("rate"), sigmas.pop("rate")
        params["tau"] = 1.0 / k if k != 0 else math.inf
        sigmas["tau"] = sk / k**2 if k != 0 else math.inf
        params["rate"], sigmas["rate"] = k, sk
        if fixed_offset is not None:
            params["offset"], sigmas["offset"] = float(fixed_offset), 0.0

    res = _finish(names, q, r, J, it, ok, msg, g0, absolute_sigma, transform)
    msg = None
    if res.params["rate"] <= 0:
        msg = "non-decaying solution"
    elif abs(res.params["amplitude"]) <= 1e-9 * max(float(np.max(np.abs(y))), 1e-300):
        msg = "zero amplitude: time constant not identifiable"
    if msg is not None:
        res = FitResult(res.params, res.sigmas, res.residual_norm, False, res.n_iter,
                        msg, res.covariance, res.gradient, res.gradient_initial, res.names)
    return res


def _exp_init_fixed(t, y, offset):
    """Log-linear start for a decay toward a known offset."""
    z = np.asarray(y, dtype=float) - offset
    sign = 1.0 if np.sum(z) >= 0 else -1.0
    pos = sign * z > 0
    if pos.sum() >= 2:
        slope, icept = np.polyfit(t[pos], np.log(sign * z[pos]), 1)
        if slope < 0:
            return np.array([sign * math.exp(icept), -1.0 / slope])
    span = float(np.ptp(t)) or 1.0
    return np.array([z[np.argmin(t)] or 1.0, span / 2.0])


def fit_exponential(trace: RateTrace, t_min=0.0, t_max=None) -> FitResult:
    """Poisson-weighted exponential fit of a rate trace for ``t >= t_min``."""
    sel = trace.bin_centers >= t_min
    if t_max is not None:
        sel &= trace.bin_centers <= t_max
    sel &= trace.exposure > 0
    if sel.sum() < 5:
        raise InputError("need at least 5 bins beyond t_min")
    return fit_exponential_curve(trace.bin_centers[sel], trace.rates[sel], trace.sigmas()[sel])


# --------------------------------------------------------------------------
# damped oscillation


def damped_oscillation_model(t, frequency, decay_rate, amplitude, phase, offset):
    return amplitude * np.exp(-decay_rate * t) * np.cos(2 * np.pi * frequency * t + phase) + offset


def dominant_frequency(t, y, oversample=8):
    """Peak of the discrete (non-uniform) spectrum of the mean-removed data.

    Returns
    -------
    (frequency, power, frequencies, spectrum)
    """
    t = np.asarray(t, dtype=float)
    z = np.asarray(y, dtype=float) - np.mean(y)
    T = t[-1] - t[0]
    if T <= 0:
        raise InputError("time span must be positive")
    dt = float(np.median(np.diff(t)))
    df = 1.0 / (T * oversample)
    freqs = np.arange(1, int(0.5 / dt / df) + 1) * df
    ph = np.exp(-2j * np.pi * np.outer(freqs, t - t[0]))
    spec = np.abs(ph @ z) ** 2
    k = int(np.argmax(spec))
    return float(freqs[k]), float(spec[k]), freqs, spec


def fit_damped_oscillation(t, y, sigma=None, absolute_sigma=None) -> FitResult:
    """Fit ``A exp(-t/tau_d) cos(2 pi f t + phi) + B``.

    The frequency start is the dominant spectral peak; fewer than two
    visible periods or a flat trace are reported as ``converged=False``.
    ``params`` holds ``frequency`` (cycles per unit of t), ``decay_rate``,
    ``decay`` (= 1/decay_rate), ``amplitude``, ``phase`` and ``offset``.
    """
    t = np.asarray(t, dtype=float)
    y = np.asarray(y, dtype=float)
    if t.size != y.size or t.size < 6:
        raise InputError("need at least 6 points of equal-length t and y")
    w, has_sigma = _as_weights(y, sigma)
    if absolute_sigma is None:
        absolute_sigma = has_sigma
    names = ("frequency", "decay_rate", "amplitude", "phase", "offset")
    if np.ptp(y) == 0:
        nan = dict.fromkeys(names + ("decay",), math.nan)
        return FitResult(nan, dict(nan), 0.0, False, 0, "no oscillation detected", names=names)
    f0, _, _, _ = dominant_frequency(t, y)
    T = t[-1] - t[0]
    # amplitude and phase at f0 by linear least squares, no decay
    X = np.column_stack((np.cos(2 * np.pi * f0 * t), np.sin(2 * np.pi * f0 * t), np.ones_like(t)))
    c, *_ = np.linalg.lstsq(X, y, rcond=None)
    amp0 = math.hypot(c[0], c[1])
    phi0 = math.atan2(-c[1], c[0])
    q0 = np.array([f0, 0.5 / T, amp0, phi0, c[2]])

    def resid(q):
        return w * (damped_oscillation_model(t, *q) - y)

    def jac(q):
        f, k, A, ph, _ = q
        e = np.exp(-k * t)
        arg = 2 * np.pi * f * t + ph
        cs, sn = np.cos(arg), np.sin(arg)
        return np.column_stack((-w * A * e * sn * 2 * np.pi * t, -w * A * t * e * cs,
                                w * e * cs, -w * A * e * sn, w))

    q, r, J, it, ok, msg, g0 = levenberg_marquardt(resid, jac, q0)
    if q[2] < 0:
        q[2], q[3] = -q[2], q[3] + math.pi
    q[3] = (q[3] + math.pi) % (2 * math.pi) - math.pi
    if q[0] < 0:
        q[0], q[3] = -q[0], -q[3]
        J = J * np.array([-1.0, 1.0, 1.0, -1.0, 1.0])

    def transform(params, sigmas):
        k = params["decay_rate"]
        params["decay"] = 1.0 / k if k > 0 else math.inf
        sigmas["decay"] = sigmas["decay_rate"] / k**2 if k > 0 else math.inf

    res = _finish(names, q, r, J, it, ok, msg, g0, absolute_sigma, transform)
    if q[0] * T < 2.0:
        return FitResult(res.params, res.sigmas, res.residual_norm, False, res.n_iter,
                         "no oscillation detected (fewer than two periods)", res.covariance,
                         res.gradient, res.gradient_initial, res.names)
    return res


def linear_fit(x, y):
    """Ordinary least-squares line; returns (slope, intercept, r_squared)."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    slope, icept = np.polyfit(x, y, 1)
    pred = slope * x + icept
    ss_res = float(np.sum((y - pred) ** 2))
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else 1.0
    return float(slope), float(icept), r2


# --------------------------------------------------------------------------
# count statistics


@dataclass(frozen=True, eq=False)
class CountHistogram:
    """Distribution of per-repetition counts with its Poisson maximum-likelihood overlay."""

    counts: np.ndarray
    values: np.ndarray
    probabilities: np.ndarray
    mean: float
    std: float
    poisson_mean: float
    poisson_pmf: np.ndarray

    def to_csv(self, path):
        np.savetxt(path, np.column_stack((self.values, self.probabilities, self.poisson_pmf)),
                   delimiter=",", header="counts,probability,poisson_probability", comments="")


def window_counts(records, window):
    """Clicks per record in cycles centered in ``[t_start, t_end)``."""
    t0, t1 = window
    if t1 < t0:
        raise DomainError("window end before start")
    out = np.empty(len(records), dtype=np.int64)
    for i, r in enumerate(records):
        t = np.asarray(r.cycle_times)
        if t.size and (t0 < t[0] - (t[1] - t[0] if t.size > 1 else 0) or t1 > t[-1] + (t[1] - t[0] if t.size > 1 else 0)):
            raise InputError("window outside the record span")
        sel = (t >= t0) & (t < t1)
        out[i] = int(np.count_nonzero(np.asarray(r.clicks)[sel]))
    return out


def histogram_counts(records, window) -> CountHistogram:
    """Histogram of ``C = sum c(t_i)`` over ``window`` across repetitions."""
    records = list(records)
    if not records:
        raise InputError("no records")
    c = window_counts(records, window)
    return histogram_from_counts(c)


def histogram_from_counts(c) -> CountHistogram:
    c = np.asarray(c, dtype=np.int64)
    values = np.arange(c.min(), c.max() + 1) if c.size else np.zeros(1, np.int64)
    probs = np.bincount(c - values[0], minlength=values.size) / max(c.size, 1)
    mean = float(c.mean())
    std = float(c.std(ddof=1)) if c.size > 1 else 0.0
    # the Poisson maximum-likelihood rate is the sample mean
    pmf = stats.poisson.pmf(values, mean) if mean > 0 else (values == 0).astype(float)
    return CountHistogram(c, values, probs, mean, std, mean, pmf)


def dispersion_test(counts):
    """Index of dispersion and its two-sided chi-square p-value for Poisson data."""
    c = np.asarray(counts, dtype=float)
    n = c.size
    if n < 2:
        raise InputError("need at least two counts")
    m = c.mean()
    if m == 0:
        return 1.0, 1.0
    D = float(c.var(ddof=1) / m)
    chi = D * (n - 1)
    cdf = stats.chi2.cdf(chi, n - 1)
    return D, float(2.0 * min(cdf, 1.0 - cdf))


# --------------------------------------------------------------------------
# signal-to-noise


def snr_fluorescence(eta, n_spins, alpha, t_w, variance="binomial"):
    """Counting SNR ``eta N / sqrt(alpha t_w + eta (1 - eta) N)``.

    ``variance="poisson"`` replaces the binomial term by ``eta N``.  A zero
    denominator with nonzero signal returns ``inf`` with a warning.
    """
    for name, v in (("eta", eta), ("n_spins", n_spins), ("alpha", alpha), ("t_w", t_w)):
        if v < 0:
            raise DomainError(f"{name} must be >= 0")
    if eta > 1:
        raise DomainError("eta must be <= 1")
    sig = eta * n_spins
    if variance == "binomial":
        var = alpha * t_w + eta * (1.0 - eta) * n_spins
    elif variance == "poisson":
        var = alpha * t_w + eta * n_spins
    else:
        raise DomainError(f"unknown variance model {variance!r}")
    if var == 0:
        if sig == 0:
            return 0.0
        warnings.warn("zero noise: ideal-detector limit, SNR is infinite")
        return math.inf
    return sig / math.sqrt(var)


def snr_echo_bounds(x_e) -> dict:
    """Echo SNR limits: phase-coherent ``2 x_e`` and ideal counter ``x_e``."""
    if x_e < 0:
        raise DomainError("x_e must be >= 0")
    return {"homodyne": 2.0 * x_e, "counter_ideal": float(x_e)}
