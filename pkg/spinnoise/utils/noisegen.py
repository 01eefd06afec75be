"""
Synthetic Faraday-rotation time series and their spectral estimation.

Every process draws from its own Philox substream spawned from one
``SeedSequence(seed)``: index 0 feeds x_+, index 1 x_-, index 2 the shot noise.
"""
import logging
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
import pandas as pd
from numpy.random import Generator, Philox, SeedSequence
from scipy import signal

from spinnoise.exceptions import InvalidInputError
from spinnoise.utils.atomic import RB87, SpinOperatorSet, build_operators, thermal_variance
from spinnoise.utils.optics import CellGeometry, OpticalLine, chi_factors
from spinnoise.utils.spectra import PmFieldSpec

logger = logging.getLogger(__name__)

MAX_DECORRELATION_PER_STEP = 50.0
STREAM_PLUS, STREAM_MINUS, STREAM_SHOT = range(3)


@dataclass(frozen=True)
class TimeSeriesConfig:
    sample_rate_hz: float
    duration_s: float
    seed: int = 1
    shot_noise_psd: float = 0.0

    def __post_init__(self):
        if not (self.sample_rate_hz > 0 and self.duration_s > 0):
            raise InvalidInputError("sample rate and duration must be positive")
        if self.count < 2:
            raise InvalidInputError("series must hold at least two samples")
        if not (isinstance(self.seed, (int, np.integer)) and 0 <= self.seed < 2 ** 64):
            raise InvalidInputError(f"seed must be a 64-bit unsigned integer, got {self.seed!r}")
        if self.shot_noise_psd < 0:
            raise InvalidInputError("shot-noise PSD must be non-negative")

    @property
    def count(self):
        return int(round(self.sample_rate_hz * self.duration_s))

    @property
    def dt(self):
        return 1.0 / self.sample_rate_hz

    def times(self):
        return np.arange(self.count) * self.dt

    def streams(self, count=3):
        """Independent, reproducible generators for this seed."""
        return [Generator(Philox(child)) for child in SeedSequence(int(self.seed)).spawn(count)]


@dataclass(frozen=True)
class OUProcessSpec:
    variance: float
    rate: float

    def __post_init__(self):
        if self.variance < 0:
            raise InvalidInputError(f"OU variance must be non-negative, got {self.variance}")
        if self.rate < 0:
            raise InvalidInputError(f"OU rate must be non-negative, got {self.rate}")


def simulate_ou(spec: OUProcessSpec, cfg: TimeSeriesConfig, rng: Optional[Generator] = None):
    """
    Exact AR(1) discretization of a stationary Ornstein-Uhlenbeck process.

    x_{k+1} = a x_k + sqrt(variance (1 - a^2)) g_k with a = exp(-rate dt), and x_0
    drawn from the stationary law.
    """
    step = spec.rate * cfg.dt
    if step >= MAX_DECORRELATION_PER_STEP:
        raise InvalidInputError(
            f"rate*dt = {step:.3g} is too large; raise the sample rate or lower the rate"
        )
    rng = rng if rng is not None else cfg.streams(1)[0]

    a = math.exp(-step)
    draws = rng.standard_normal(cfg.count)
    drive = math.sqrt(spec.variance * (1 - a * a)) * draws
    drive[0] = math.sqrt(spec.variance) * draws[0]
    return signal.lfilter([1.0], [1.0, -a], drive)


def white_noise(psd, cfg: TimeSeriesConfig, rng: Optional[Generator] = None):
    """Gaussian white noise whose one-sided PSD is ``psd``."""
    if psd < 0:
        raise InvalidInputError("white-noise PSD must be non-negative")
    rng = rng if rng is not None else cfg.streams(3)[STREAM_SHOT]
    return math.sqrt(psd * cfg.sample_rate_hz / 2) * rng.standard_normal(cfg.count)


def square_wave_signs(count, sample_rate_hz, pulse_rate_hz):
    """(-1)^floor(t nu_p): one sign flip per pi pulse."""
    times = np.arange(count) / sample_rate_hz
    return np.where(np.floor(times * pulse_rate_hz).astype(np.int64) % 2 == 0, 1.0, -1.0)


def simulate_faraday_noise(nu, line: OpticalLine, rates, wall_broadening_hz, cfg: TimeSeriesConfig,
                           field_mode="zero", pm: Optional[PmFieldSpec] = None,
                           ops: Optional[SpinOperatorSet] = None,
                           cell: Optional[CellGeometry] = None):
    """
    Phi(t) = (5 chi_a + chi_b) x_+(t) + (chi_b - chi_a) x_-(t), plus white shot noise.

    With ``cell`` the series is the rotation angle in rad (scaled by sqrt(n l / A_p));
    otherwise it is Phi in m^2. In ``pm`` mode the spin part is multiplied by the pulse
    train's sign sequence and x_+ gets the duty-cycle-reduced SE broadening d gamma_a.
    """
    if field_mode not in ("zero", "pm"):
        raise InvalidInputError(f"field mode must be 'zero' or 'pm', got {field_mode!r}")
    if field_mode == "pm" and pm is None:
        raise InvalidInputError("pm mode requires a PmFieldSpec")
    ops = ops if ops is not None else build_operators(RB87)

    chi = chi_factors(nu, line)
    coef_plus = 5 * chi.chi_a + chi.chi_b
    coef_minus = chi.chi_b - chi.chi_a

    rate_plus = math.pi * wall_broadening_hz
    if field_mode == "pm":
        rate_plus += pm.duty_cycle * rates.gamma_a
    rate_minus = rates.gamma_minus + math.pi * wall_broadening_hz

    streams = cfg.streams(3)
    x_plus = simulate_ou(OUProcessSpec(thermal_variance(ops, ops.F_zplus), rate_plus), cfg, streams[STREAM_PLUS])
    x_minus = simulate_ou(OUProcessSpec(thermal_variance(ops, ops.F_zminus), rate_minus), cfg, streams[STREAM_MINUS])

    series = coef_plus * x_plus + coef_minus * x_minus
    if cell is not None:
        series = series * math.sqrt(cell.osn_factor)
    if field_mode == "pm":
        series = series * square_wave_signs(cfg.count, cfg.sample_rate_hz, pm.pulse_rate_hz)
    if cfg.shot_noise_psd > 0:
        series = series + white_noise(cfg.shot_noise_psd, cfg, streams[STREAM_SHOT])

    logger.info("Simulated %d samples (%s field) at nu=%.4f GHz", cfg.count, field_mode, nu / 1e9)
    return series


def welch_psd(series, sample_rate_hz, segment_length, overlap_fraction=0.5, window="hann"):
    """
    One-sided Welch PSD estimate as a frame of ``freq_hz`` and ``psd``.

    The number of averaged segments is kept in ``frame.attrs["segments"]``.
    """
    series = np.asarray(series, dtype=float)
    segment_length = int(segment_length)
    if segment_length < 2 or segment_length > series.size:
        raise InvalidInputError(
            f"segment length {segment_length} must lie in [2, {series.size}]"
        )
    if not 0 <= overlap_fraction < 1:
        raise InvalidInputError("overlap fraction must lie in [0, 1)")
    overlap = int(round(segment_length * overlap_fraction))

    freq, psd = signal.welch(
        series, fs=sample_rate_hz, window=window, nperseg=segment_length,
        noverlap=overlap, detrend=False, scaling="density", return_onesided=True,
    )
    segments = (series.size - overlap) // (segment_length - overlap)
    frame = pd.DataFrame({"freq_hz": freq, "psd": psd})
    frame.attrs["segments"] = int(segments)
    frame.attrs["resolution_hz"] = sample_rate_hz / segment_length
    logger.info("Welch PSD: %d segments of %d samples", segments, segment_length)
    return frame


def segment_for_resolution(sample_rate_hz, resolution_hz):
    return int(round(sample_rate_hz / resolution_hz))


def background_subtract(psd: pd.DataFrame, background_psd: pd.DataFrame):
    """
    Pointwise ``psd - background_psd`` on a shared grid.

    Negative bins are clamped to zero; returns ``(frame, clamped_count)``.
    """
    if len(psd) != len(background_psd) or not np.array_equal(
        psd["freq_hz"].to_numpy(), background_psd["freq_hz"].to_numpy()
    ):
        raise InvalidInputError("signal and background PSDs are on different frequency grids")
    difference = psd["psd"].to_numpy() - background_psd["psd"].to_numpy()
    negative = difference < 0
    clamped = int(np.count_nonzero(negative))
    if clamped:
        logger.info("Background subtraction clamped %d of %d bins", clamped, difference.size)
    result = pd.DataFrame({"freq_hz": psd["freq_hz"].to_numpy(), "psd": np.where(negative, 0.0, difference)})
    result.attrs.update(psd.attrs)
    return result, clamped
