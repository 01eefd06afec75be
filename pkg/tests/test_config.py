import math

import pytest

from spinnoise.config import (
    DEFAULTS,
    PRESETS,
    config_from_app,
    flatten,
    load_config,
    validate,
)
from spinnoise.exceptions import ConfigError
from spinnoise.utils.dynamics import relative_speed


def test_defaults():
    config = load_config()
    assert config["se.gamma_per_s"] == 7917.0
    assert config.se_params().gamma_se == 7917.0
    assert config.pm_spec().duty_cycle == 0.0014
    assert config.cell().osn_factor == pytest.approx(config.number_density() * 23e-3 / 64e-6)
    assert config.number_density() == pytest.approx(8.13e18, rel=1e-2)
    assert config.optical_line().doppler_fwhm_hz == pytest.approx(565.8e6, rel=1e-2)


@pytest.mark.parametrize("preset", PRESETS)
def test_presets_load(preset):
    config = load_config(preset=preset)
    assert config.pm_spec().pulse_rate_hz == 2000.0


def test_hot_cell_triples_the_rate():
    assert load_config(preset="hot_cell").se_params().gamma_se == pytest.approx(3 * 7917.0)


def test_user_file_overlays_preset(tmp_path):
    path = tmp_path / "run.toml"
    path.write_text('[pm]\nduty_cycle = 0.01\n\n[simulation]\nseed = 5\n')
    config = load_config(path, preset="red_detuned")
    assert config["pm.duty_cycle"] == 0.01
    assert config["simulation.seed"] == 5
    assert config["probe.reference"] == "ab"


def test_overrides_coerce_integers_to_floats():
    config = load_config(overrides={"se": {"gamma_per_s": 100}})
    assert isinstance(config["se.gamma_per_s"], float)


@pytest.mark.parametrize("overrides", [
    {"se": {"gamma": 1.0}},
    {"pm": {"duty_cycle": "high"}},
    {"simulation": {"seed": 1.5}},
    {"pipeline": {"joint_fit": 1}},
    {"probe": {"reference": "nowhere"}},
    {"se": {"gamma_per_s": math.inf}},
])
def test_schema_violations(overrides):
    with pytest.raises(ConfigError):
        load_config(overrides=overrides)


def test_invalid_toml(tmp_path):
    path = tmp_path / "broken.toml"
    path.write_text("[pm\n")
    with pytest.raises(ConfigError):
        load_config(path)
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.toml")
    with pytest.raises(ConfigError):
        load_config(preset="unknown")


def test_negative_rate_derives_from_collisions():
    config = load_config(overrides={"se": {"gamma_per_s": -1.0}})
    speed = relative_speed(config.temperature_k, config["atom.mass_amu"])
    expected = config.number_density() * config["se.cross_section_m2"] * speed
    assert config.se_params().gamma_se == pytest.approx(expected)


def test_probe_references():
    config = load_config()
    line = config.optical_line()
    assert config.probe_frequency_hz(line) == pytest.approx(line.offsets["ab"] - 14.1e9)
    cm = config.with_overrides({"probe": {"reference": "cm", "detuning_ghz": 2.0}})
    assert cm.probe_frequency_hz(line) == pytest.approx(2.0e9)


def test_polar_reference():
    config = load_config(preset="polar_minus")
    nu = config.probe_frequency_hz()
    assert 5.8e9 < nu < 7.2e9
    narrow_window = config.with_overrides({"polar": {"low_ghz": 20.0, "high_ghz": 30.0}})
    with pytest.raises(ConfigError):
        narrow_window.probe_frequency_hz()


def test_optical_model_needs_rb87_spin():
    config = load_config(overrides={"atom": {"nuclear_spin": 2.5}})
    with pytest.raises(ConfigError):
        config.optical_line()


def test_flatten_and_validate():
    assert flatten({"a": {"b": {"c": 1}}, "d": 2}) == {"a.b.c": 1, "d": 2}
    assert validate({"cell.length_mm": 10}) == {"cell.length_mm": 10.0}
    assert set(DEFAULTS) >= {"probe.reference", "pipeline.joint_fit"}


def test_config_from_app():
    app_config = {"SPINNOISE_PRESET": "hot_cell", "SPINNOISE": {"pm": {"duty_cycle": 0.002}}}
    config = config_from_app(app_config, {"simulation": {"seed": 3}})
    assert config.se_params().gamma_se == pytest.approx(23751.0)
    assert config["pm.duty_cycle"] == 0.002
    assert config["simulation.seed"] == 3


def test_isotope_selects_atom_constants():
    config = load_config(overrides={"atom": {"isotope": "85Rb"}})
    assert config.atom_spec().nuclear_spin == 2.5
    assert config["atom.w_ghz"] == pytest.approx(3.035732439)
    assert config["atom.mass_amu"] == pytest.approx(84.911789738)
    with pytest.raises(ConfigError):
        config.optical_line()


def test_explicit_atom_values_win_over_isotope():
    config = load_config(overrides={"atom": {"isotope": "87Rb", "w_ghz": 6.8}})
    assert config["atom.w_ghz"] == 6.8
    assert config.with_overrides({"atom": {"isotope": "133Cs"}}).atom_spec().nuclear_spin == 3.5
