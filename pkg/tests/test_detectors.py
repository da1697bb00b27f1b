import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fluorsim import analysis
from fluorsim.detectors import (BandwidthModel, ClickRecord, HomodyneRecord, SmpdParams,
                                READOUT_P_THERMAL, READOUT_RELAX_RATIO, calibrate_readout_model,
                                click_probability, dark_count_budget, efficiency_budget,
                                efficiency_fwhm, fit_efficiency_spectrum, homodyne_detect,
                                matched_filter_snr, pump_for_bandwidth, read_clicks_binary,
                                readout_threshold, smpd_detect, smpd_efficiency_spectrum,
                                synthetic_readout, thermal_occupancy_from_budget,
                                write_clicks_binary)
from fluorsim.dynamics import Trajectory
from fluorsim.errors import ConfigError, DomainError, InputError
from fluorsim.physics import hz


def flat_trajectory(t_end, flux=0.0, coherent=None, n=2001):
    t = np.linspace(0.0, t_end, n)
    z = np.zeros(n)
    cx = z if coherent is None else coherent(t)
    return Trajectory(t, z - 0.5, z, z, cx, z, np.full(n, flux), z, z, np.full(n, flux))


class TestSmpdDetect:
    def test_dark_rate(self):
        p = SmpdParams()
        n_cyc = 200000
        rec = smpd_detect(flat_trajectory(n_cyc * p.cycle_period + 1e-9), p, 0.315, [], seed=11)
        assert len(rec) == n_cyc
        k = int(rec.clicks.sum())
        mu = n_cyc * p.p_dark
        assert abs(k - mu) < 3 * math.sqrt(mu * (1 - p.p_dark))
        rate = k / (n_cyc * p.cycle_period)
        assert rate == pytest.approx(1530.0, rel=0.03)

    def test_silent_detector(self):
        p = SmpdParams(eta_d=0.0, dark_rate=0.0)
        rec = smpd_detect(flat_trajectory(0.1, flux=1e6), p, 1.0, [], seed=1)
        assert not rec.clicks.any()

    def test_weak_flux_bernoulli_mean(self):
        p = SmpdParams(dark_rate=0.0)
        n_target = 0.01
        flux = n_target / p.detect_window
        n_cyc = 1_000_000
        rec = smpd_detect(flat_trajectory(n_cyc * p.cycle_period + 1e-9, flux=flux), p, 1.0, [], seed=2)
        q = p.eta_d * n_target
        assert abs(rec.clicks.mean() - q) < 3 * math.sqrt(q / n_cyc)

    def test_dead_time_blind(self):
        p = SmpdParams()
        rec = smpd_detect(flat_trajectory(2e-3, flux=1e6), p, 1.0, [(0.0, 5e-6)], seed=3)
        blind_until = rec.cycle_times[rec.blind_mask].max()
        assert 200e-6 <= blind_until + 0.5 * p.detect_window <= 205e-6 + p.cycle_period
        assert not np.any(rec.clicks & rec.blind_mask)

    def test_gate(self):
        p = SmpdParams()
        rec = smpd_detect(flat_trajectory(1e-3), p, 1.0, [], seed=3, gate_time=700e-6)
        assert np.min(np.abs(rec.cycle_times - 700e-6)) < 1e-15

    def test_reproducible(self):
        p = SmpdParams()
        tr = flat_trajectory(0.05, flux=300.0)
        a = smpd_detect(tr, p, 0.3, [], seed=(4, 1, 2))
        assert a == smpd_detect(tr, p, 0.3, [], seed=(4, 1, 2))
        assert a != smpd_detect(tr, p, 0.3, [], seed=(4, 1, 3))

    def test_uncovered_trajectory(self):
        tr = flat_trajectory(1e-3)
        with pytest.raises(InputError):
            from fluorsim.detectors import expected_photons
            expected_photons(tr, np.array([2e-3]), SmpdParams(), 1.0)

    def test_params_validation(self):
        with pytest.raises(ConfigError, match="eta_d"):
            SmpdParams(eta_d=1.5)
        with pytest.raises(ConfigError, match="detect_window"):
            SmpdParams(detect_window=20e-6)

    @given(st.floats(0, 5), st.floats(0, 5), st.floats(0, 1), st.floats(0, 1),
           st.floats(0, 4e4), st.floats(0, 4e4))
    def test_click_probability_monotone(self, n1, n2, e1, e2, a1, a2):
        lo = SmpdParams(eta_d=min(e1, e2), dark_rate=min(a1, a2))
        hi = SmpdParams(eta_d=max(e1, e2), dark_rate=max(a1, a2))
        n_lo, n_hi = sorted((n1, n2))
        assert click_probability(n_lo, lo) <= click_probability(n_hi, hi) + 1e-15
        assert 0.0 <= click_probability(n_hi, hi) <= 1.0


def test_dark_counts_poisson_dispersion():
    """Per-bin dark counts over 500 repetitions have dispersion index in [0.9, 1.1]."""
    p = SmpdParams()
    tr = flat_trajectory(0.2)
    recs = [smpd_detect(tr, p, 0.3, [], seed=(9, i)) for i in range(500)]
    counts = analysis.window_counts(recs, (0.0, 0.2))
    d, _ = analysis.dispersion_test(counts)
    assert 0.9 <= d <= 1.1


class TestRecordsIO:
    def test_binary_round_trip(self, tmp_path):
        rng = np.random.default_rng(0)
        recs = []
        for n in (1, 7, 1000):
            t = 1e-3 + 11.7e-6 * np.arange(n)
            blind = np.zeros(n, bool)
            blind[: n // 3] = True
            clicks = (rng.random(n) < 0.3) & ~blind
            recs.append(ClickRecord(t, clicks, blind))
        write_clicks_binary(recs, tmp_path / "r.fsclk")
        back = read_clicks_binary(tmp_path / "r.fsclk")
        assert len(back) == 3
        for a, b in zip(recs, back):
            assert np.array_equal(a.clicks, b.clicks) and np.array_equal(a.blind_mask, b.blind_mask)
            assert np.allclose(a.cycle_times, b.cycle_times, rtol=0, atol=1e-15)

    def test_binary_generator_input(self, tmp_path):
        t = np.arange(5) * 1e-5
        gen = (ClickRecord(t, np.eye(5, dtype=bool)[i], np.zeros(5, bool)) for i in range(5))
        write_clicks_binary(gen, tmp_path / "g.fsclk")
        assert len(read_clicks_binary(tmp_path / "g.fsclk")) == 5

    def test_bad_magic(self, tmp_path):
        (tmp_path / "x").write_bytes(b"NOTCLICK" + bytes(8))
        with pytest.raises(InputError, match="magic"):
            read_clicks_binary(tmp_path / "x")

    def test_non_uniform_rejected(self, tmp_path):
        r = ClickRecord(np.array([0.0, 1.0, 3.0]), np.zeros(3, bool), np.zeros(3, bool))
        with pytest.raises(InputError):
            write_clicks_binary([r], tmp_path / "x")

    def test_csv_round_trip(self, tmp_path):
        r = ClickRecord(np.array([0.1, 0.2, 0.3]), np.array([1, 0, 0], bool), np.array([0, 0, 1], bool))
        r.to_csv(tmp_path / "r.csv")
        assert ClickRecord.from_csv(tmp_path / "r.csv") == r
        assert (tmp_path / "r.csv").read_text().splitlines()[0] == "cycle_time_s,click,blind"

    def test_record_validation(self):
        with pytest.raises(InputError):
            ClickRecord(np.zeros(2), np.ones(2, bool), np.ones(2, bool))
        with pytest.raises(InputError):
            ClickRecord(np.zeros(2), np.ones(3, bool), np.ones(2, bool))


class TestBandwidth:
    def test_matching_gives_unity(self):
        m = BandwidthModel()
        assert smpd_efficiency_spectrum(0.0, 0.0, BandwidthModel(xi_p=m.matched_xi())) == pytest.approx(1.0, abs=1e-15)

    def test_zero_pump(self):
        d = np.linspace(-1e7, 1e7, 11)
        assert np.all(smpd_efficiency_spectrum(d, d, BandwidthModel(xi_p=0.0)) == 0.0)

    @given(st.floats(0.0, 5.0))
    def test_bounded_by_one(self, xi):
        m = BandwidthModel(xi_p=xi)
        v = smpd_efficiency_spectrum(0.0, 0.0, m)
        assert v <= 1.0 + 1e-12
        if abs(xi - m.matched_xi()) > 1e-3:
            assert v < 1.0

    def test_paper_bandwidth(self):
        m = BandwidthModel()
        xi = pump_for_bandwidth(m, hz(2.1e6))
        assert efficiency_fwhm(BandwidthModel(xi_p=xi)) / hz(1.0) == pytest.approx(2.1e6, rel=1e-4)
        assert xi > m.matched_xi()

    def test_fit_recovers_pump(self):
        m = BandwidthModel()
        xi = pump_for_bandwidth(m, hz(2.1e6))
        d = np.linspace(-hz(6e6), hz(6e6), 121)
        y = 0.53 * smpd_efficiency_spectrum(d, d, BandwidthModel(xi_p=xi))
        noisy = y + np.random.default_rng(1).normal(0, 0.01, d.size)
        fit, fwhm = fit_efficiency_spectrum(d, noisy, m, sigma=np.full(d.size, 0.01))
        assert fit.converged
        assert fwhm / hz(1.0) == pytest.approx(2.1e6, abs=0.3e6)
        exact, _ = fit_efficiency_spectrum(d, y, m)
        assert exact.params["xi_p"] == pytest.approx(xi, rel=1e-6)
        assert exact.params["scale"] == pytest.approx(0.53, rel=1e-6)


class TestBudgets:
    def test_dark_count_budget(self):
        v = dark_count_budget(0.53, hz(2.1e6), 8.1e-6, 1.5e-4)
        assert v == pytest.approx(0.85e-2, rel=0.02)
        assert dark_count_budget(0.53, hz(2.1e6), 8.1e-6, 0.0) == 0.0
        with pytest.raises(DomainError):
            dark_count_budget(-1, 1, 1, 1)

    def test_dark_count_inverse(self):
        n = thermal_occupancy_from_budget(0.8e-2, 0.53, hz(2.1e6), 8.1e-6)
        assert n == pytest.approx(1.41e-4, rel=0.01)
        assert dark_count_budget(0.53, hz(2.1e6), 8.1e-6, n) == pytest.approx(0.8e-2, rel=1e-12)

    def test_efficiency_budget(self):
        assert efficiency_budget(0.71, 8.1e-6, 5e-6) == pytest.approx(0.53, abs=0.03)
        assert efficiency_budget(0.71, 8.1e-6, 0.0) == 0.71

    def test_survival_monte_carlo(self):
        rng = np.random.default_rng(7)
        n = 1_000_000
        arrival = rng.uniform(0.0, 5e-6, n)
        decay = rng.exponential(8.1e-6, n)
        mc = np.mean(decay > 5e-6 - arrival)
        assert efficiency_budget(1.0, 8.1e-6, 5e-6) == pytest.approx(mc, rel=0.005)


class TestHomodyne:
    def test_vacuum_noise(self):
        tr = flat_trajectory(0.05, n=11)
        rec = homodyne_detect(tr, 0.3, 2e6, seed=5)
        assert rec.x.size == 100000
        se = 0.5 / math.sqrt(2 * (rec.x.size - 1))
        assert abs(rec.x.std() - 0.5) < 3 * se
        assert abs(rec.y.std() - 0.5) < 3 * se

    @pytest.mark.parametrize("x_e", [1.0, 3.0])
    def test_matched_filter_snr(self, x_e):
        # exponential echo envelope sampled on 0.5 us modes
        bw = 2e6
        tau = 3e-6
        shape = lambda t: np.exp(-2 * np.abs(t - 20e-6) / tau)
        tr0 = flat_trajectory(40e-6, coherent=shape, n=40001)
        clean = homodyne_detect(tr0, 1.0, bw, seed=0)
        template = clean.x - homodyne_detect(flat_trajectory(40e-6, n=40001), 1.0, bw, seed=0).x
        scale = x_e / np.linalg.norm(template)
        tr = flat_trajectory(40e-6, coherent=lambda t: scale * shape(t), n=40001)
        stats = np.array([matched_filter_snr(homodyne_detect(tr, 1.0, bw, seed=(1, i)), template)
                          for i in range(500)])
        assert stats.mean() == pytest.approx(2 * x_e, rel=0.10)
        assert stats.std(ddof=1) == pytest.approx(1.0, rel=0.10)

    def test_linearity_in_line_efficiency(self):
        tr = flat_trajectory(1e-3, coherent=lambda t: np.full(t.size, 1e3), n=11)
        a = homodyne_detect(tr, 0.2, 2e6, seed=3)
        b = homodyne_detect(tr, 0.4, 2e6, seed=3)
        noise = homodyne_detect(flat_trajectory(1e-3, n=11), 0.2, 2e6, seed=3)
        assert np.allclose(b.x - noise.x, math.sqrt(2) * (a.x - noise.x))
        assert np.allclose(b.y, a.y)

    def test_validation(self):
        tr = flat_trajectory(1e-3, n=11)
        with pytest.raises(DomainError):
            homodyne_detect(tr, 1.5, 2e6, seed=0)
        with pytest.raises(DomainError):
            homodyne_detect(tr, 0.5, 0.0, seed=0)
        with pytest.raises(InputError):
            HomodyneRecord(np.zeros(2), np.zeros(3), np.zeros(2))


class TestReadout:
    def test_separated_gaussians(self):
        rng = np.random.default_rng(0)
        g, e = rng.normal(0, 1, 200000), rng.normal(10, 1, 200000)
        r = readout_threshold(g, e)
        assert r.fidelity_g >= 0.999 and r.fidelity_e >= 0.999
        assert 3 < r.threshold < 7
        assert not r.degenerate

    def test_identical(self):
        x = np.random.default_rng(1).normal(size=50000)
        r = readout_threshold(x, x.copy())
        assert r.degenerate and r.ratio == 1.0

    def test_empty(self):
        with pytest.raises(InputError):
            readout_threshold([], [1.0])

    def test_tail_model_fidelities(self):
        g, e = synthetic_readout(200000, np.random.default_rng(4))
        r = readout_threshold(g, e)
        assert r.fidelity_g == pytest.approx(0.992, abs=0.003)
        assert r.fidelity_e == pytest.approx(0.71, abs=0.015)

    def test_calibration_scan_finds_shipped_constants(self):
        pt, rr, fg, fe = calibrate_readout_model(
            n=100000, seeds=(0,), relax_grid=[1.06, READOUT_RELAX_RATIO, 1.26],
            thermal_grid=[0.006, READOUT_P_THERMAL, 0.014])
        assert (pt, rr) == (READOUT_P_THERMAL, READOUT_RELAX_RATIO)
