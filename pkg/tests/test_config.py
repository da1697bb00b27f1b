import copy
import json
import math
import random

import pytest
from hypothesis import given, settings, strategies as st

from fluorsim.config import (SCHEMA, build_config, config_hash, config_to_dict, load_config,
                             load_preset, normalize, preset_document, preset_names)
from fluorsim.errors import ConfigError
from fluorsim.physics import TWO_PI


def minimal():
    return {"resonator": {"frequency_hz": 6.946e9, "kappa_i_hz": 0.53e6, "kappa_c_hz": 0.15e6},
            "ensemble": {"rho_spin_per_krad_s": 13.3, "g0_mean_hz": 290.0}}


def error_path(doc):
    with pytest.raises(ConfigError) as exc:
        build_config(doc)
    return exc.value.key_path


class TestPresets:
    def test_names(self):
        assert set(preset_names()) == {"paper_fig2", "paper_fig3", "paper_fig4",
                                       "ratio_method", "amplitude_method"}

    def test_fig2_parameters(self, fig2):
        assert fig2.resonator.kappa / TWO_PI == pytest.approx(0.68e6, rel=1e-12)
        assert fig2.smpd.eta_d == 0.53
        assert fig2.smpd.dark_rate == 1530.0
        assert fig2.repetitions == 500

    @pytest.mark.parametrize("name", ["paper_fig2", "paper_fig3", "paper_fig4", "ratio_method",
                                      "amplitude_method"])
    def test_presets_round_trip(self, name):
        cfg = load_preset(name)
        assert build_config(config_to_dict(cfg)) == cfg
        assert config_hash(cfg) == config_hash(preset_document(name))

    def test_suffix_optional(self):
        assert load_preset("paper_fig2.json") == load_preset("paper_fig2")

    def test_unknown(self):
        with pytest.raises(ConfigError, match="available"):
            load_preset("fig9")


class TestErrors:
    def test_missing_required(self):
        doc = minimal()
        del doc["ensemble"]["g0_mean_hz"]
        assert error_path(doc) == "ensemble.g0_mean_hz"

    def test_unit_mismatch(self):
        doc = minimal()
        doc["resonator"]["kappa_c_rad_s"] = doc["resonator"].pop("kappa_c_hz")
        with pytest.raises(ConfigError, match="unit mismatch") as exc:
            build_config(doc)
        assert exc.value.key_path == "resonator.kappa_c_rad_s"
        assert "kappa_c_hz" in str(exc.value)

    def test_unknown_key_and_section(self):
        doc = minimal()
        doc["smpd"] = {"colour": 1}
        assert error_path(doc) == "smpd.colour"
        assert error_path({**minimal(), "laser": {}}) == "laser"

    @pytest.mark.parametrize("sec,key,value", [
        ("smpd", "eta_d", 1.5),
        ("smpd", "duty", 1.2),
        ("experiment", "repetitions", 0),
        ("experiment", "line_efficiency", -0.1),
        ("ensemble", "T2_s", -1.0),
        ("ensemble", "rho_spin_per_krad_s", -1.0),
        ("resonator", "kappa_i_hz", 0.0),
        ("experiment", "count_window_s", [0.5, 0.1]),
        ("experiment", "homodyne_mode_duration_s", 0.0),
        ("experiment", "repetition_delay_s", -1.0),
    ])
    def test_out_of_range_names_key(self, sec, key, value):
        doc = minimal()
        doc.setdefault(sec, {})[key] = value
        assert error_path(doc) == f"{sec}.{key}"

    @pytest.mark.parametrize("value", ["fast", True, float("nan"), [1.0]])
    def test_wrong_type(self, value):
        doc = minimal()
        doc["smpd"] = {"eta_d": value}
        assert error_path(doc) == "smpd.eta_d"

    def test_empty_file(self, tmp_path):
        p = tmp_path / "c.json"
        p.write_text("")
        with pytest.raises(ConfigError, match=r"line 1 column 1 \(char 0\)"):
            load_config(p)

    def test_syntax_position(self, tmp_path):
        p = tmp_path / "c.json"
        p.write_text('{\n  "resonator": {\n    "frequency_hz": 6.9e9,,\n')
        with pytest.raises(ConfigError, match="line 3 column"):
            load_config(p)

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError, match="cannot read"):
            load_config(tmp_path / "nope.json")


class TestHash:
    def test_round_trip_identity(self, tmp_path):
        doc = preset_document("paper_fig3")
        cfg = build_config(doc)
        p = tmp_path / "c.json"
        p.write_text(json.dumps(config_to_dict(cfg)))
        back = load_config(p)
        assert back == cfg
        assert config_hash(back) == config_hash(cfg) == config_hash(doc)

    def test_defaults_do_not_change_hash(self):
        doc = minimal()
        full = normalize(doc)
        assert config_hash(doc) == config_hash(full)

    def test_value_change_changes_hash(self):
        doc = minimal()
        other = copy.deepcopy(doc)
        other["resonator"]["kappa_c_hz"] = 0.16e6
        assert config_hash(doc) != config_hash(other)

    @given(st.randoms(use_true_random=False))
    @settings(max_examples=30, deadline=None)
    def test_key_order_invariance(self, rnd):
        doc = preset_document("paper_fig2")

        def shuffled(d):
            if not isinstance(d, dict):
                return d
            items = list(d.items())
            rnd.shuffle(items)
            return {k: shuffled(v) for k, v in items}

        assert config_hash(shuffled(doc)) == config_hash(doc)

    @given(st.floats(1e3, 1e7), st.floats(1.0, 1e3), st.floats(0.01, 0.99))
    @settings(max_examples=50, deadline=None)
    def test_round_trip_property(self, kappa_c, g0, duty):
        doc = minimal()
        doc["resonator"]["kappa_c_hz"] = kappa_c
        doc["ensemble"]["g0_mean_hz"] = g0
        doc["smpd"] = {"duty": duty}
        cfg = build_config(doc)
        assert build_config(config_to_dict(cfg)) == cfg


def test_schema_sections():
    assert list(SCHEMA) == ["resonator", "ensemble", "smpd", "experiment"]
    for sec in SCHEMA.values():
        for key in sec:
            assert key == key.strip() and " " not in key
