import math

import numpy as np
import pandas as pd
import pytest

from spinnoise.config import load_config
from spinnoise.utils.fitting import estimate_xi
from spinnoise.utils.optics import noise_budget
from spinnoise.utils.pipeline import rates_payload, run_pipeline, theory_spectrum
from spinnoise.utils.spectra import evaluate_psd, total_power


def test_theory_spectrum_power():
    config = load_config(preset="red_detuned")
    _, zero_field = theory_spectrum(config, "zf")
    _, comb = theory_spectrum(config, "pm")
    assert total_power(comb) / total_power(zero_field) == pytest.approx(0.984, abs=1e-3)
    _, dc = theory_spectrum(config, "dc")
    assert [c.label for c in dc.components] == ["a", "b"]


def test_rates_payload():
    payload = rates_payload(load_config())
    assert payload["gamma_a_over_pi_hz"] == pytest.approx(315.0, rel=1e-2)
    assert payload["gamma_minus_over_gamma_a"] == pytest.approx(6.0, rel=2e-2)


@pytest.mark.slow
def test_red_detuned_round_trip():
    outcome = run_pipeline(load_config(preset="red_detuned"))
    report = outcome.report
    assert outcome.fit.converged
    assert 0.55 <= report["xi_plus"] <= 0.61
    assert report["xi"] == pytest.approx(1.0, abs=0.07)
    assert report["gamma_minus_over_pi_hz"] == pytest.approx(0.75 * 7917.0 / math.pi, rel=0.1)


@pytest.mark.slow
def test_polar_minus_round_trip():
    outcome = run_pipeline(load_config(preset="polar_minus"))
    fit = outcome.fit
    assert abs(fit.value("narrow.area")) < 3 * fit.error("narrow.area")
    assert fit.value("broad.fwhm") == pytest.approx(1915.0, rel=0.1)



def _model_scans(config):
    nu, model = theory_spectrum(config, "pm")
    narrow = np.arange(0.0, 10000.0, 1.0)
    wide = np.arange(0.0, 10000.0, 15.6)
    return (nu,
            pd.DataFrame({"freq_hz": narrow, "psd": evaluate_psd(model, narrow)}),
            pd.DataFrame({"freq_hz": wide, "psd": evaluate_psd(model, wide)}))


def test_xi_plus_independent_of_exchange_rate():
    estimates = {}
    for preset in ("red_detuned", "hot_cell"):
        config = load_config(preset=preset)
        _, narrow, wide = _model_scans(config)
        result = estimate_xi(narrow, wide, config.pm_spec())
        assert result.converged
        estimates[preset] = result.derived["xi_plus"]
    config = load_config(preset="red_detuned")
    theory = noise_budget(config.probe_frequency_hz(), config.optical_line(), config.operators())
    assert estimates["red_detuned"] == pytest.approx(theory.xi_plus, abs=0.03)
    assert estimates["hot_cell"] == pytest.approx(estimates["red_detuned"], abs=0.03)
