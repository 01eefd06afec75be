import io
import json

import numpy as np
import pandas as pd
import pytest

from spinnoise.cli import cli
from spinnoise.utils.records import read_series_binary, write_csv
from spinnoise.utils.spectra import LorentzianComponent, SpectrumModel, evaluate_psd

SHORT_RUN = '[simulation]\nduration_s = 10.0\n'


@pytest.fixture
def short_config(tmp_path):
    path = tmp_path / "short.toml"
    path.write_text(SHORT_RUN)
    return str(path)


def test_schema_flag(runner):
    result = runner.invoke(cli, ["sweep", "--schema"])
    assert result.exit_code == 0
    assert json.loads(result.stdout)["schema"] == "spinnoise.sweep/1"


def test_sweep(runner):
    result = runner.invoke(cli, ["sweep", "--from-ghz", "-20", "--to-ghz", "-19", "--step-ghz", "0.5"])
    assert result.exit_code == 0
    table = pd.read_csv(io.StringIO(result.stdout))
    assert list(table.columns) == ["nu_ghz", "chi_a", "chi_b", "xi_plus", "xi_minus", "xi_total", "phi2_total"]
    assert table["nu_ghz"].tolist() == [-20.0, -19.5, -19.0]


def test_sweep_rejects_bad_step(runner):
    result = runner.invoke(cli, ["sweep", "--step-ghz", "0"])
    assert result.exit_code == 1
    assert json.loads(result.stderr)["error"] == "InvalidInputError"


def test_unknown_config_key(runner, tmp_path):
    path = tmp_path / "bad.toml"
    path.write_text("[se]\ngamma = 1.0\n")
    result = runner.invoke(cli, ["--config", str(path), "rates"])
    assert result.exit_code == 1
    assert json.loads(result.stderr)["error"] == "ConfigError"


def test_polar(runner):
    result = runner.invoke(cli, ["polar"])
    assert result.exit_code == 0
    roots = json.loads(result.stdout)["roots"]
    assert any(r["kind"] == "minus" and 5.8 < r["nu_ghz"] < 7.2 for r in roots)


def test_rates(runner):
    result = runner.invoke(cli, ["rates", "--gamma-per-s", "8000"])
    assert result.exit_code == 0
    payload = json.loads(result.stdout)
    assert payload["analytic"]["gamma_a"] == 1000.0
    assert payload["eigen"]["gamma_a"] == pytest.approx(1000.0, rel=1e-2)


def test_spectrum(runner, tmp_path):
    out = tmp_path / "pm.csv"
    result = runner.invoke(cli, ["--preset", "red_detuned", "spectrum", "--mode", "pm",
                                 "--stop-hz", "4000", "--points", "401", "--out", str(out)])
    assert result.exit_code == 0
    table = pd.read_csv(out)
    assert len(table) == 401
    assert table["psd"].idxmax() == 100


def test_simulate(runner, tmp_path, short_config):
    out = tmp_path / "series.bin"
    result = runner.invoke(cli, ["--config", short_config, "simulate", "--out", str(out)])
    assert result.exit_code == 0
    series, header = read_series_binary(out)
    assert header["count"] == 200000
    assert header["seed"] == 1
    assert np.all(np.isfinite(series))


def _write_psd(path):
    model = SpectrumModel((LorentzianComponent(500.0, 40.0, 3.0),), floor=0.01)
    freq = np.arange(0.0, 1001.0)
    write_csv(pd.DataFrame({"freq_hz": freq, "psd": evaluate_psd(model, freq)}), str(path))


def test_fit_with_template(runner, tmp_path):
    psd = tmp_path / "psd.csv"
    _write_psd(psd)
    template = tmp_path / "template.json"
    template.write_text(json.dumps({"components": [{"label": "line", "center": {}, "fwhm": {}, "area": {}}]}))
    result = runner.invoke(cli, ["fit", str(psd), "--template", str(template)])
    assert result.exit_code == 0
    record = json.loads(result.stdout)
    assert record["converged"]
    assert record["parameters"]["line.fwhm"]["value"] == pytest.approx(40.0, rel=1e-4)


def test_fit_flagged_exit_code(runner, tmp_path):
    psd = tmp_path / "psd.csv"
    _write_psd(psd)
    config = tmp_path / "dc.toml"
    config.write_text("[dc]\nresonance_hz = 500.0\nnuclear_zeeman_split_hz = 0.0\n")
    result = runner.invoke(cli, ["--config", str(config), "fit", str(psd), "--dc"])
    assert result.exit_code == 2
    assert "degenerate_centers" in json.loads(result.stdout)["flags"]


def test_fit_needs_one_model(runner, tmp_path):
    psd = tmp_path / "psd.csv"
    _write_psd(psd)
    result = runner.invoke(cli, ["fit", str(psd)])
    assert result.exit_code == 1
    assert "exactly one" in json.loads(result.stderr)["message"]


def test_pipeline_report(runner, short_config):
    result = runner.invoke(cli, ["--config", short_config, "pipeline", "--seed", "4"])
    assert result.exit_code in (0, 2)
    report = json.loads(result.stdout)
    assert report["schema"] == "spinnoise.pipeline/1"
    assert report["diagnostics"]["seed"] == 4
    assert report["nu_ghz"] == pytest.approx(-17.17, abs=0.01)


ZERO_FIELD_TEMPLATE = {
    "components": [
        {"label": "narrow", "center": 0.0, "fwhm": {"value": 25.0}, "area": {}},
        {"label": "broad", "center": 0.0, "fwhm": {"value": 1900.0}, "area": {}},
    ],
}


@pytest.mark.parametrize("fmt", ["bin", "csv"])
def test_simulate_then_fit_series(runner, tmp_path, fmt):
    config = tmp_path / "two_seconds.toml"
    config.write_text('[simulation]\nduration_s = 2.0\n')
    series = tmp_path / f"series.{fmt}"
    result = runner.invoke(cli, ["--config", str(config), "simulate", "--mode", "zero",
                                 "--format", fmt, "--out", str(series)])
    assert result.exit_code == 0
    template = tmp_path / "template.json"
    template.write_text(json.dumps(ZERO_FIELD_TEMPLATE))
    result = runner.invoke(cli, ["--config", str(config), "fit", str(series), "--template", str(template),
                                 "--resolution-hz", "5", "--to-hz", "6000"])
    assert result.exit_code in (0, 2)
    record = json.loads(result.stdout)
    assert record["schema"] == "spinnoise.fit/1"
    parameters = record["parameters"]
    assert parameters["narrow.fwhm"]["value"] < parameters["broad.fwhm"]["value"]
    assert parameters["narrow.area"]["value"] >= 0


def test_simulate_is_reproducible(runner, tmp_path):
    config = tmp_path / "two_seconds.toml"
    config.write_text('[simulation]\nduration_s = 2.0\nseed = 9\n')
    outputs = [tmp_path / "first.csv", tmp_path / "second.csv"]
    for out in outputs:
        result = runner.invoke(cli, ["--config", str(config), "simulate", "--format", "csv", "--out", str(out)])
        assert result.exit_code == 0
    assert outputs[0].read_bytes() == outputs[1].read_bytes()


def test_fit_rejects_unreadable_input(runner, tmp_path):
    junk = tmp_path / "junk.csv"
    junk.write_bytes(b"")
    template = tmp_path / "template.json"
    template.write_text(json.dumps(ZERO_FIELD_TEMPLATE))
    result = runner.invoke(cli, ["fit", str(junk), "--template", str(template)])
    assert result.exit_code == 1
