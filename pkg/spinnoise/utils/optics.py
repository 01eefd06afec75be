import logging
import math
from dataclasses import dataclass, field
from typing import Dict, Optional

import numpy as np
import pandas as pd
from scipy import constants
from scipy.optimize import brentq
from scipy.special import wofz

from spinnoise.exceptions import InvalidInputError
from spinnoise.utils.atomic import SpinOperatorSet, thermal_covariance, thermal_variance

logger = logging.getLogger(__name__)

CLASSICAL_ELECTRON_RADIUS = constants.physical_constants["classical electron radius"][0]
SPEED_OF_LIGHT = constants.c

RB87_D1_WAVELENGTH_M = 794.978851156e-9
RB87_D1_OSCILLATOR_STRENGTH = 0.34
RB87_GROUND_SPLITTING_HZ = 6.8347e9
RB87_EXCITED_SPLITTING_HZ = 0.8166e9
NATURAL_FWHM_HZ = 5.75e6

TRANSITIONS = ("aa", "ab", "ba", "bb")

# line-strength weights for I = 3/2; chi_a sums aa and ab, chi_b sums ba and bb
RB87_WEIGHTS = {"aa": 0.25, "ab": 0.75, "ba": -1.25, "bb": 0.25}

NEAR_RESONANCE_DOPPLER_WIDTHS = 3.0


def doppler_fwhm(temperature_k, line_frequency_hz, mass_amu):
    """Gaussian FWHM of a thermal vapour line, Hz."""
    mass = mass_amu * constants.atomic_mass
    return line_frequency_hz / constants.c * math.sqrt(
        8 * constants.k * temperature_k * math.log(2) / mass
    )


RB_MELTING_POINT_K = 312.46


def rb_vapour_pressure_torr(temperature_k):
    """Saturated Rb vapour pressure over the solid or liquid metal, Torr."""
    t = temperature_k
    if t < RB_MELTING_POINT_K:
        return 10 ** (-94.04826 - 1961.258 / t - 0.03771687 * t + 42.57526 * math.log10(t))
    return 10 ** (15.88253 - 4529.635 / t + 0.00058663 * t - 2.99138 * math.log10(t))


def rb_number_density(temperature_k):
    """Saturated Rb vapour density, 1/m^3."""
    if not temperature_k > 0:
        raise InvalidInputError("temperature must be positive")
    return rb_vapour_pressure_torr(temperature_k) * constants.torr / (constants.k * temperature_k)


def transition_offsets(ground_splitting_hz, excited_splitting_hz, nuclear_spin=1.5):
    """
    Hyperfine transition frequencies relative to the hyperfine-free line centre.

    Both manifolds are placed by their centre of gravity: E_a = I/(2I+1) W and
    E_b = -(I+1)/(2I+1) W (3/8 and -5/8 for I = 3/2). nu_FF' = E_F' - E_F.
    """
    if ground_splitting_hz <= 0 or excited_splitting_hz < 0:
        raise InvalidInputError("hyperfine splittings must be positive")
    upper = nuclear_spin / (2 * nuclear_spin + 1)
    lower = -(nuclear_spin + 1) / (2 * nuclear_spin + 1)
    ground = {"a": upper * ground_splitting_hz, "b": lower * ground_splitting_hz}
    excited = {"a": upper * excited_splitting_hz, "b": lower * excited_splitting_hz}
    return {f + e: excited[e] - ground[f] for f in "ab" for e in "ab"}


def dispersive_line(delta_nu, gamma_l, gamma_d):
    """
    Dispersive (real-index) part of a unit-area Voigt profile, 1/Hz.

    Computed as Im w(z) / (sigma sqrt(2 pi)) with the Faddeeva function w and
    z = (delta_nu + i gamma_l/2) / (sigma sqrt 2). Far from the line it tends to
    1/(pi delta_nu). A pure Lorentzian (gamma_d = 0) uses the closed form.
    """
    if gamma_l < 0 or gamma_d < 0:
        raise InvalidInputError("line widths must be non-negative")
    if gamma_l == 0 and gamma_d == 0:
        raise InvalidInputError("at least one of the Lorentzian and Doppler widths must be > 0")
    delta_nu = np.asarray(delta_nu, dtype=float)
    if gamma_d == 0:
        half = gamma_l / 2
        return delta_nu / (math.pi * (delta_nu ** 2 + half ** 2))
    sigma = gamma_d / (2 * math.sqrt(2 * math.log(2)))
    z = (delta_nu + 0.5j * gamma_l) / (sigma * math.sqrt(2))
    return wofz(z).imag / (sigma * math.sqrt(2 * math.pi))


@dataclass(frozen=True)
class OpticalLine:
    """D1 line of a vapour: hyperfine transition table and lineshape parameters."""

    line_center_hz: float = SPEED_OF_LIGHT / RB87_D1_WAVELENGTH_M
    ground_splitting_hz: float = RB87_GROUND_SPLITTING_HZ
    excited_splitting_hz: float = RB87_EXCITED_SPLITTING_HZ
    oscillator_strength: float = RB87_D1_OSCILLATOR_STRENGTH
    lorentzian_fwhm_hz: float = NATURAL_FWHM_HZ
    doppler_fwhm_hz: float = 0.5e9
    nuclear_spin: float = 1.5
    weights: Dict[str, float] = field(default_factory=lambda: dict(RB87_WEIGHTS))
    offsets: Optional[Dict[str, float]] = None

    def __post_init__(self):
        if self.offsets is None:
            object.__setattr__(
                self, "offsets",
                transition_offsets(self.ground_splitting_hz, self.excited_splitting_hz,
                                   self.nuclear_spin),
            )

    @classmethod
    def for_temperature(cls, temperature_k, mass_amu=86.909180527, **kwargs):
        line = cls(**kwargs)
        width = doppler_fwhm(temperature_k, line.line_center_hz, mass_amu)
        return cls(doppler_fwhm_hz=width, **kwargs)

    @property
    def prefactor(self):
        """pi r_e c f / (2I+1), m^2 Hz."""
        return (math.pi * CLASSICAL_ELECTRON_RADIUS * SPEED_OF_LIGHT * self.oscillator_strength
                / (2 * self.nuclear_spin + 1))

    def line(self, delta_nu):
        return dispersive_line(delta_nu, self.lorentzian_fwhm_hz, self.doppler_fwhm_hz)

    def is_near_resonance(self, nu):
        reach = NEAR_RESONANCE_DOPPLER_WIDTHS * max(self.doppler_fwhm_hz, self.lorentzian_fwhm_hz)
        return any(abs(nu - center) < reach for center in self.offsets.values())


@dataclass(frozen=True)
class CellGeometry:
    length_m: float = 23e-3
    probe_area_m2: float = 64e-6
    number_density: float = 1.0e19

    def __post_init__(self):
        if min(self.length_m, self.probe_area_m2, self.number_density) <= 0:
            raise InvalidInputError("cell length, probe area and density must be positive")

    @property
    def osn_factor(self):
        """n l / A_p, 1/m^4."""
        return self.number_density * self.length_m / self.probe_area_m2


@dataclass(frozen=True)
class DetuningFactors:
    nu: float
    chi_a: float
    chi_b: float


@dataclass(frozen=True)
class NoiseBudget:
    phi2_plus: float
    phi2_minus: float
    phi2_total: float
    xi_plus: float
    xi_minus: float
    xi: float
    defined: bool = True


def chi_factors(nu, line: OpticalLine) -> DetuningFactors:
    """Detuning factors (chi_a, chi_b) at probe frequency nu (Hz from the line centre)."""
    if not np.isfinite(nu):
        raise InvalidInputError("probe frequency must be finite")
    shape = {name: float(line.line(nu - line.offsets[name])) for name in TRANSITIONS}
    w = line.weights
    chi_a = line.prefactor * (w["aa"] * shape["aa"] + w["ab"] * shape["ab"])
    chi_b = line.prefactor * (w["ba"] * shape["ba"] + w["bb"] * shape["bb"])
    return DetuningFactors(float(nu), chi_a, chi_b)


def _require_eigenobservables(ops: SpinOperatorSet):
    if ops.F_zplus is None:
        raise InvalidInputError("the F_z+/F_z- decomposition is defined for I = 3/2 only")


def noise_budget(nu, line: OpticalLine, ops: SpinOperatorSet, underflow=1e-300) -> NoiseBudget:
    """Zero-field split of the Faraday-rotation variance into its +/- correlation parts."""
    _require_eigenobservables(ops)
    chi = chi_factors(nu, line)
    var_a = thermal_variance(ops, ops.F_za)
    var_b = thermal_variance(ops, ops.F_zb)

    phi2_plus = (5 * chi.chi_a + chi.chi_b) ** 2 * (var_a + var_b) / 36
    phi2_minus = (chi.chi_a - chi.chi_b) ** 2 * (var_a + 25 * var_b) / 36
    phi2_total = (5 * chi.chi_a ** 2 + chi.chi_b ** 2) / 4

    if phi2_total <= underflow:
        logger.warning("Noise budget undefined at nu=%.6g Hz: <Phi^2> underflows", nu)
        nan = float("nan")
        return NoiseBudget(phi2_plus, phi2_minus, phi2_total, nan, nan, nan, defined=False)

    xi_plus = phi2_plus / phi2_total
    xi_minus = phi2_minus / phi2_total
    return NoiseBudget(phi2_plus, phi2_minus, phi2_total, xi_plus, xi_minus, xi_plus + xi_minus)


def phi_observables(chi: DetuningFactors, ops: SpinOperatorSet):
    """(Phi_+, Phi_-) as matrices: (5chi_a + chi_b) F_z+ and (chi_b - chi_a) F_z-."""
    _require_eigenobservables(ops)
    return ((5 * chi.chi_a + chi.chi_b) * ops.F_zplus,
            (chi.chi_b - chi.chi_a) * ops.F_zminus)


def phi_covariance(chi: DetuningFactors, ops: SpinOperatorSet):
    plus, minus = phi_observables(chi, ops)
    return thermal_covariance(ops, plus, minus)


@dataclass(frozen=True)
class PolarRoot:
    nu: float
    kind: str
    near_resonance: bool


def _polar_conditions(line):
    def plus(nu):
        chi = chi_factors(nu, line)
        return chi.chi_a - chi.chi_b

    def minus(nu):
        chi = chi_factors(nu, line)
        return 5 * chi.chi_a + chi.chi_b

    return {"plus": plus, "minus": minus}


def polar_frequencies(line: OpticalLine, search_window, samples_per_interval=400, xtol_hz=1.0):
    """
    Frequencies where the zero-field noise is fully one correlation type.

    The window is split at the transition centres; every sign change of
    g+ = chi_a - chi_b or g- = 5 chi_a + chi_b on a sampled subinterval is bracketed
    and refined with Brent's method. Roots of g+ are kind 'plus' (xi_+ = 1), roots of g-
    are kind 'minus' (xi_- = 1). A window without crossings returns an empty list.
    """
    low, high = search_window
    if not (np.isfinite(low) and np.isfinite(high)) or high <= low:
        raise InvalidInputError(f"invalid search window {search_window!r}")
    edges = sorted({low, high, *[c for c in line.offsets.values() if low < c < high]})

    roots = []
    for kind, condition in _polar_conditions(line).items():
        for left, right in zip(edges[:-1], edges[1:]):
            grid = np.linspace(left, right, samples_per_interval)
            values = np.array([condition(nu) for nu in grid])
            for k in range(len(grid) - 1):
                if values[k] == 0:
                    roots.append(PolarRoot(float(grid[k]), kind, line.is_near_resonance(grid[k])))
                    continue
                if values[k] * values[k + 1] < 0:
                    nu = brentq(condition, grid[k], grid[k + 1], xtol=xtol_hz, rtol=1e-15)
                    roots.append(PolarRoot(float(nu), kind, line.is_near_resonance(nu)))

    roots.sort(key=lambda root: root.nu)
    logger.info("Polar search over [%.4g, %.4g] GHz found %d roots",
                low / 1e9, high / 1e9, len(roots))
    return roots


def osn_power(nu, line: OpticalLine, cell: CellGeometry, ops: SpinOperatorSet):
    """Variance of the rotation angle, rad^2: (n l / A_p) <Phi^2>."""
    return cell.osn_factor * noise_budget(nu, line, ops).phi2_total


def detuning_sweep(line: OpticalLine, ops: SpinOperatorSet, from_hz, to_hz, step_hz):
    """Table of chi factors and power ratios on an evenly spaced detuning grid."""
    if not step_hz > 0:
        raise InvalidInputError("sweep step must be positive")
    if to_hz < from_hz:
        raise InvalidInputError("sweep end must not precede its start")
    count = int(math.floor((to_hz - from_hz) / step_hz + 1e-9)) + 1
    rows = []
    for nu in from_hz + step_hz * np.arange(count):
        chi = chi_factors(nu, line)
        budget = noise_budget(nu, line, ops)
        rows.append({
            "nu_ghz": nu / 1e9,
            "chi_a": chi.chi_a,
            "chi_b": chi.chi_b,
            "xi_plus": budget.xi_plus,
            "xi_minus": budget.xi_minus,
            "xi_total": budget.xi,
            "phi2_total": budget.phi2_total,
        })
    return pd.DataFrame(rows, columns=["nu_ghz", "chi_a", "chi_b", "xi_plus", "xi_minus",
                                       "xi_total", "phi2_total"])
