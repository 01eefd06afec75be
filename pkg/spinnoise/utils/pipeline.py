import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Optional

from spinnoise.exceptions import InvalidInputError
from spinnoise.utils.dynamics import RateSet, rate_set
from spinnoise.utils.fitting import FitResult, estimate_xi
from spinnoise.utils.noisegen import (
    background_subtract,
    segment_for_resolution,
    simulate_faraday_noise,
    welch_psd,
    white_noise,
)
from spinnoise.utils.optics import chi_factors, noise_budget, osn_power, polar_frequencies
from spinnoise.utils.spectra import dc_field_model, pm_field_model, zero_field_model

logger = logging.getLogger(__name__)

PIPELINE_SCHEMA = "spinnoise.pipeline/1"


@dataclass
class PipelineOutcome:
    report: dict
    fit: FitResult
    flagged: bool = field(init=False)

    def __post_init__(self):
        self.flagged = self.fit.flagged


def run_pipeline(config, progress: Optional[Callable[[int, str], None]] = None) -> PipelineOutcome:
    """simulate -> Welch (two resolutions) -> optional background subtraction -> estimate_xi."""
    def report_progress(percent, message):
        logger.info(message)
        if progress is not None:
            progress(percent, message)

    ops = config.operators()
    line = config.optical_line()
    cell = config.cell()
    pm = config.pm_spec()
    cfg = config.series_config()
    nu = config.probe_frequency_hz(line)
    gamma_se = config.se_params().gamma_se

    report_progress(10, "Computing eigen-rates...")
    rates = rate_set(gamma_se, config.atom_spec(), ops)

    report_progress(25, "Simulating Faraday-rotation series...")
    series = simulate_faraday_noise(nu, line, rates, pm.wall_broadening_hz, cfg,
                                    field_mode="pm", pm=pm, ops=ops, cell=cell)

    report_progress(60, "Estimating spectra...")
    overlap = config["pipeline.overlap_fraction"]
    narrow_segment = segment_for_resolution(cfg.sample_rate_hz, config["pipeline.narrow_resolution_hz"])
    wide_segment = segment_for_resolution(cfg.sample_rate_hz, config["pipeline.wide_resolution_hz"])
    narrow_scan = welch_psd(series, cfg.sample_rate_hz, narrow_segment, overlap)
    wide_scan = welch_psd(series, cfg.sample_rate_hz, wide_segment, overlap)

    clamped = 0
    if config["pipeline.subtract_background"] and cfg.shot_noise_psd > 0:
        background = white_noise(cfg.shot_noise_psd, cfg, cfg.streams(4)[3])
        narrow_scan, narrow_clamped = background_subtract(
            narrow_scan, welch_psd(background, cfg.sample_rate_hz, narrow_segment, overlap))
        wide_scan, wide_clamped = background_subtract(
            wide_scan, welch_psd(background, cfg.sample_rate_hz, wide_segment, overlap))
        clamped = narrow_clamped + wide_clamped

    report_progress(80, "Fitting harmonic combs...")
    theory = noise_budget(nu, line, ops)
    result = estimate_xi(
        narrow_scan, wide_scan, pm,
        wall_broadening_hz=pm.wall_broadening_hz,
        phi2_theory=osn_power(nu, line, cell, ops),
        narrow_window_hz=config["pipeline.narrow_window_hz"],
        model_narrow_tails=config["pipeline.model_narrow_tails"],
        joint=config["pipeline.joint_fit"],
    )

    derived = result.derived
    report = {
        "schema": PIPELINE_SCHEMA,
        "nu_ghz": nu / 1e9,
        "xi_plus": derived.get("xi_plus"),
        "xi_plus_err": derived.get("xi_plus_err"),
        "xi": derived.get("xi"),
        "gamma_minus_over_pi_hz": derived.get("gamma_minus_over_pi_hz"),
        "diagnostics": {
            "converged": result.converged,
            "flags": list(result.flags),
            "narrow_fwhm_hz": derived.get("narrow_fwhm_hz"),
            "broad_fwhm_hz": derived.get("broad_fwhm_hz"),
            "broad_fwhm_masked_only_hz": derived.get("broad_fwhm_masked_only_hz"),
            "joint_xi_plus": derived.get("joint_xi_plus"),
            "clamped_bins": clamped,
            "narrow_segments": narrow_scan.attrs.get("segments"),
            "wide_segments": wide_scan.attrs.get("segments"),
            "theory_xi_plus": theory.xi_plus,
            "rates": rates.as_dict(),
            "seed": cfg.seed,
        },
        "fit": result.to_record(),
    }
    report_progress(100, "Pipeline complete.")
    return PipelineOutcome(report, result)


def rates_payload(config):
    """Eigen-rates at the configured SE rate next to the low-polarization formulas."""
    gamma_se = config.se_params().gamma_se
    eigen = rate_set(gamma_se, config.atom_spec(), config.operators())
    analytic = RateSet.analytic(gamma_se)
    return {
        "schema": "spinnoise.rates/1",
        "gamma_se": gamma_se,
        "eigen": eigen.as_dict(),
        "analytic": analytic.as_dict(),
        "gamma_a_over_pi_hz": eigen.gamma_a / math.pi,
        "gamma_minus_over_gamma_a": eigen.gamma_minus / eigen.gamma_a if eigen.gamma_a else None,
    }


def polar_payload(config, window=None):
    roots = polar_frequencies(config.optical_line(), window or config.polar_window_hz())
    return {
        "schema": "spinnoise.polar/1",
        "roots": [
            {"nu_ghz": root.nu / 1e9, "kind": root.kind, "near_resonance": root.near_resonance}
            for root in roots
        ],
    }


SPECTRUM_MODES = ("dc", "zf", "pm")


def theory_spectrum(config, mode):
    """
    Model spectrum at the configured probe frequency, in rad^2/Hz.

    ``zf`` is the zero-field pair, ``pm`` its pi-PM harmonic comb and ``dc`` the
    weak-coupling pair of uncorrelated multiplet resonances.
    """
    if mode not in SPECTRUM_MODES:
        raise InvalidInputError(f"spectrum mode must be one of {', '.join(SPECTRUM_MODES)}")
    ops = config.operators()
    line = config.optical_line()
    nu = config.probe_frequency_hz(line)
    rates = RateSet.analytic(config.se_params().gamma_se)
    pm = config.pm_spec()
    if mode == "dc":
        model = dc_field_model(chi_factors(nu, line), ops, rates, config.dc_spec())
    else:
        model = zero_field_model(noise_budget(nu, line, ops), rates, pm.wall_broadening_hz)
        if mode == "pm":
            model = pm_field_model(model, pm, rates.gamma_a)
    return nu, model.scaled(config.cell().osn_factor)
