import json
import os
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from fluorsim import __version__
from fluorsim.cli import main
from fluorsim.config import config_hash, load_config, preset_document

jsonschema = pytest.importorskip("jsonschema")

SCHEMA = json.loads((Path(__file__).resolve().parents[1] / "docs" / "summary_schema.json").read_text())

FAST = ["--reps", "20"]


def run(tmp_path, *argv, sub="out"):
    out = tmp_path / sub
    code = main([*argv, "--out-dir", str(out)])
    return code, out


def summary(out):
    s = json.loads((out / "summary.json").read_text())
    jsonschema.validate(s, SCHEMA)
    return s


def tree(path):
    return sorted(str(p.relative_to(path)) for p in path.rglob("*"))


class TestExitCodes:
    @pytest.mark.parametrize("argv", [
        ["simulate", "fluorescence", "--preset", "nope"],
        ["simulate", "fluorescence", "--reps", "0"],
        ["simulate", "warp"],
        ["simulate", "fluorescence", "--seed", "x"],
        ["fit", "missing.csv"],
        ["simulate", "rabi", "--durations", "1e-6,2e-6"],
    ])
    def test_config_errors(self, tmp_path, argv, capsys):
        code, _ = run(tmp_path, *argv)
        assert code == 2
        assert "error" in capsys.readouterr().err

    def test_unit_mismatch_file(self, tmp_path, capsys):
        doc = preset_document("paper_fig2")
        doc["resonator"]["kappa_c_rad_s"] = doc["resonator"].pop("kappa_c_hz")
        p = tmp_path / "bad.json"
        p.write_text(json.dumps(doc))
        code, _ = run(tmp_path, "simulate", "fluorescence", "--config", str(p))
        assert code == 2
        assert "resonator.kappa_c_rad_s" in capsys.readouterr().err

    def test_parse_error_file(self, tmp_path, capsys):
        p = tmp_path / "bad.json"
        p.write_text("{\n")
        code, _ = run(tmp_path, "simulate", "echo", "--config", str(p))
        assert code == 2
        assert "line 2" in capsys.readouterr().err

    def test_numerical_failure(self, tmp_path):
        csv = tmp_path / "flat.csv"
        np.savetxt(csv, np.column_stack((np.linspace(0, 1, 20), np.ones(20))), delimiter=",",
                   header="t,y", comments="")
        code, _ = run(tmp_path, "fit", str(csv))
        assert code == 3

    def test_estimation_failure(self, tmp_path):
        code, _ = run(tmp_path, "estimate", "spins", "--method", "ratio", "--c-spin", "1e9", "--c-e", "0.1")
        assert code == 3

    def test_no_command(self, capsys):
        assert main([]) == 2

    def test_version_and_presets(self, capsys):
        assert main(["--list-presets"]) == 0
        assert "paper_fig2" in capsys.readouterr().out
        assert main(["--version"]) == 0
        assert __version__ in capsys.readouterr().out

    def test_console_script(self, tmp_path):
        r = subprocess.run([sys.executable, "-m", "fluorsim.cli", "simulate", "fluorescence",
                            "--preset", "nope", "--out-dir", str(tmp_path / "o")],
                           capture_output=True, text=True)
        assert r.returncode == 2 and "unknown preset" in r.stderr


@pytest.fixture(scope="module")
def outs(tmp_path_factory):
    """Two identical fluorescence runs in sibling directories ``a`` and ``b``."""
    base = tmp_path_factory.mktemp("fl")
    argv = ["simulate", "fluorescence", "--preset", "paper_fig2", "--reps", "500", "--seed", "7"]
    assert main([*argv, "--out-dir", str(base / "a")]) == 0
    assert main([*argv, "--out-dir", str(base / "b")]) == 0
    return base


class TestFluorescenceCommand:
    def test_fitted_T1(self, outs):
        s = summary(outs / "a")
        assert 0.280 <= s["results"]["T1_fit_s"] <= 0.340
        assert s["fits"]["decay"]["converged"]
        assert s["seeds"]["master"] == 7 and s["repetitions"] == 500

    def test_byte_identical_records(self, outs):
        names = set(tree(outs / "a"))
        assert names == set(tree(outs / "b"))
        for name in names - {"manifest.json"}:
            assert (outs / "a" / name).read_bytes() == (outs / "b" / name).read_bytes(), name

    def test_manifest(self, outs):
        m = json.loads((outs / "a" / "manifest.json").read_text())
        assert m["config_hash"] == summary(outs / "a")["config_hash"]
        assert m["master_seed"] == 7
        for rel in m["outputs"].values():
            assert (outs / "a" / rel).exists()
        assert m["timings_s"]["total"] > 0

    def test_reproducible_from_saved_config(self, outs, tmp_path):
        cfg_path = outs / "a" / "config.json"
        assert config_hash(json.loads(cfg_path.read_text())) == summary(outs / "a")["config_hash"]
        code, out = run(tmp_path, "simulate", "fluorescence", "--config", str(cfg_path))
        assert code == 0
        assert (out / "records_signal.fsclk").read_bytes() == (outs / "a" / "records_signal.fsclk").read_bytes()

    def test_plot_csvs(self, outs):
        head = (outs / "a" / "rate_trace.csv").read_text().splitlines()[0]
        assert head == "time_s,rate_per_s,sigma_per_s"
        data = np.loadtxt(outs / "a" / "histogram_pi.csv", delimiter=",", skiprows=1)
        assert data[:, 1].sum() == pytest.approx(1.0)


def test_seed_changes_records(tmp_path):
    assert run(tmp_path, "simulate", "echo", *FAST, "--seed", "1", sub="a")[0] == 0
    assert run(tmp_path, "simulate", "echo", *FAST, "--seed", "2", sub="b")[0] == 0
    assert (tmp_path / "a" / "records.fsclk").read_bytes() != (tmp_path / "b" / "records.fsclk").read_bytes()


def test_thread_count_does_not_change_records(tmp_path, monkeypatch):
    monkeypatch.setenv("FLUORSIM_THREADS", "1")
    assert run(tmp_path, "simulate", "fluorescence", "--reps", "100", sub="one")[0] == 0
    monkeypatch.setenv("FLUORSIM_THREADS", "4")
    assert run(tmp_path, "simulate", "fluorescence", "--reps", "100", sub="four")[0] == 0
    for name in ("records_signal.fsclk", "records_control.fsclk", "summary.json"):
        assert (tmp_path / "one" / name).read_bytes() == (tmp_path / "four" / name).read_bytes()


class TestFit:
    def test_exact_exponential(self, tmp_path):
        t = np.linspace(0, 2, 80)
        y = 700.0 * np.exp(-t / 0.309) + 1530.0
        csv = tmp_path / "d.csv"
        np.savetxt(csv, np.column_stack((t, y)), delimiter=",", header="time_s,rate_per_s", comments="")
        code, out = run(tmp_path, "fit", str(csv))
        assert code == 0
        p = summary(out)["fits"]["exponential"]["params"]
        assert p["tau"] == pytest.approx(0.309, rel=1e-6)
        assert p["amplitude"] == pytest.approx(700.0, rel=1e-6)
        assert p["offset"] == pytest.approx(1530.0, rel=1e-6)

    def test_oscillation(self, tmp_path):
        t = np.linspace(0, 60e-6, 100)
        y = 0.5 * np.exp(-t / 30e-6) * np.cos(2 * np.pi * 9e4 * t + 0.2) + 1.0
        csv = tmp_path / "r.csv"
        np.savetxt(csv, np.column_stack((t, y)), delimiter=",", header="duration_s,signal", comments="")
        code, out = run(tmp_path, "fit", str(csv), "--model", "oscillation")
        assert code == 0
        assert summary(out)["fits"]["oscillation"]["params"]["frequency"] == pytest.approx(9e4, rel=1e-6)


class TestOtherCommands:
    def test_echo(self, tmp_path):
        code, out = run(tmp_path, "simulate", "echo", "--reps", "100")
        assert code == 0
        s = summary(out)
        assert 0.1 < s["results"]["c_echo"] < 0.5
        assert (out / "click_probability.csv").exists()

    def test_echo_homodyne(self, tmp_path):
        doc = preset_document("paper_fig3")
        doc["experiment"]["detection_mode"] = "homodyne"
        p = tmp_path / "h.json"
        p.write_text(json.dumps(doc))
        code, out = run(tmp_path, "simulate", "echo", "--config", str(p), "--reps", "10")
        assert code == 0
        assert (out / "homodyne_0000.csv").exists()
        assert summary(out)["results"]["area"] is not None

    def test_characterize(self, tmp_path):
        code, out = run(tmp_path, "characterize", "smpd")
        assert code == 0
        r = summary(out)["results"]
        assert r["bandwidth_fwhm_hz"] == pytest.approx(2.1e6, abs=0.3e6)
        assert r["efficiency_at_matching"] == pytest.approx(1.0, abs=1e-12)
        assert r["efficiency_budget"] == pytest.approx(0.53, abs=0.03)
        assert r["n_th_from_budget"] == pytest.approx(1.4e-4, abs=0.2e-4)

    def test_rabi_small(self, tmp_path):
        code, out = run(tmp_path, "simulate", "rabi", "--reps", "1", "--durations", "0.5e-6,40e-6,20",
                        "--amplitudes", "1,2")
        assert code == 0
        r = summary(out)["results"]
        assert r["rabi_frequencies_hz"][1] / r["rabi_frequencies_hz"][0] == pytest.approx(2.0, rel=0.05)

    def test_estimate_given_counts(self, tmp_path):
        code, out = run(tmp_path, "estimate", "spins", "--method", "ratio", "--c-spin", "123",
                        "--c-e", "0.0966")
        assert code == 0
        r = summary(out)["results"]["ratio_method"]
        assert 10 < r["rho_spin_per_krad_s"] < 14


def test_nothing_written_outside_out_dir(tmp_path, monkeypatch):
    work = tmp_path / "work"
    work.mkdir()
    monkeypatch.chdir(work)
    before = tree(tmp_path)
    assert main(["simulate", "echo", "--reps", "10", "--out-dir", "results/echo"]) == 0
    after = tree(tmp_path)
    new = set(after) - set(before)
    assert new and all(n.startswith(os.path.join("work", "results")) for n in new)
