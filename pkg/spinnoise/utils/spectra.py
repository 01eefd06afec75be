import logging
import math
from dataclasses import dataclass, replace
from typing import Tuple

import numpy as np

from spinnoise.exceptions import InvalidInputError
from spinnoise.utils.atomic import SpinOperatorSet, thermal_variance

logger = logging.getLogger(__name__)

FWHM_FLOOR_HZ = 1e-6
FIRST_HARMONIC_FRACTION = 8 / math.pi ** 2
MODEL_SCHEMA = "spinnoise.spectrum/1"


@dataclass(frozen=True)
class LorentzianComponent:
    center: float
    fwhm: float
    area: float
    label: str = ""
    delta_like: bool = False

    def __post_init__(self):
        if not self.fwhm > 0:
            raise InvalidInputError(f"component fwhm must be > 0, got {self.fwhm}")
        if self.area < 0:
            raise InvalidInputError(f"component area must be >= 0, got {self.area}")


@dataclass(frozen=True)
class SpectrumModel:
    """Lorentzian components plus a flat floor, one-sided PSD convention."""

    components: Tuple[LorentzianComponent, ...] = ()
    floor: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "components", tuple(self.components))

    def scaled(self, factor):
        """Multiply every area and the floor by ``factor`` (e.g. n l / A_p for rad^2)."""
        if factor < 0:
            raise InvalidInputError("scale factor must be non-negative")
        return SpectrumModel(
            tuple(replace(c, area=c.area * factor) for c in self.components),
            self.floor * factor,
        )

    def by_label(self, prefix):
        return [c for c in self.components if c.label.startswith(prefix)]

    @property
    def delta_like(self):
        return any(c.delta_like for c in self.components)

    def to_record(self):
        return {
            "schema": MODEL_SCHEMA,
            "floor": self.floor,
            "components": [
                {"label": c.label, "center_hz": c.center, "fwhm_hz": c.fwhm,
                 "area": c.area, "delta_like": c.delta_like}
                for c in self.components
            ],
        }

    @classmethod
    def from_record(cls, record):
        if record.get("schema") != MODEL_SCHEMA:
            raise InvalidInputError(f"unsupported spectrum record schema {record.get('schema')!r}")
        try:
            components = [
                LorentzianComponent(
                    float(item["center_hz"]), float(item["fwhm_hz"]), float(item["area"]),
                    item.get("label", ""), bool(item.get("delta_like", False)),
                )
                for item in record["components"]
            ]
            return cls(tuple(components), float(record.get("floor", 0.0)))
        except (KeyError, TypeError) as exc:
            raise InvalidInputError(f"malformed spectrum record: {exc}") from exc


@dataclass(frozen=True)
class PmFieldSpec:
    pulse_rate_hz: float
    duty_cycle: float
    harmonic_count: int = 25
    wall_broadening_hz: float = 25.0

    def __post_init__(self):
        if not self.pulse_rate_hz > 0:
            raise InvalidInputError("pulse rate must be positive")
        if not 0 < self.duty_cycle < 1:
            raise InvalidInputError(f"duty cycle must lie in (0, 1), got {self.duty_cycle}")
        if self.harmonic_count < 1 or self.harmonic_count % 2 == 0:
            raise InvalidInputError(f"harmonic count must be a positive odd integer, got {self.harmonic_count}")
        if self.wall_broadening_hz < 0:
            raise InvalidInputError("wall broadening must be non-negative")

    @property
    def harmonics(self):
        return list(range(1, self.harmonic_count + 1, 2))

    def harmonic_center(self, n):
        return n * self.pulse_rate_hz / 2


@dataclass(frozen=True)
class DcFieldSpec:
    resonance_hz: float
    nuclear_zeeman_split_hz: float = 159.0
    wall_broadening_hz: float = 25.0

    def __post_init__(self):
        if self.nuclear_zeeman_split_hz < 0:
            raise InvalidInputError("nuclear Zeeman split must be non-negative")
        if self.wall_broadening_hz < 0:
            raise InvalidInputError("wall broadening must be non-negative")


def harmonic_area_fraction(n):
    """Share of a component's power carried by odd harmonic n of a square-wave modulation."""
    if n < 1 or n % 2 == 0:
        raise InvalidInputError(f"harmonic index must be odd and positive, got {n}")
    return FIRST_HARMONIC_FRACTION / n ** 2


def _component(center, fwhm, area, label):
    if fwhm <= 0:
        logger.warning("Component %s has zero width; using %.1e Hz floor", label, FWHM_FLOOR_HZ)
        return LorentzianComponent(center, FWHM_FLOOR_HZ, area, label, delta_like=True)
    return LorentzianComponent(center, fwhm, area, label)


def zero_field_model(budget, rates, wall_broadening_hz) -> SpectrumModel:
    """Narrow Phi_+ line of width delta_w and broad Phi_- line of width delta_w + gamma_-/pi at 0 Hz."""
    if wall_broadening_hz < 0:
        raise InvalidInputError("wall broadening must be non-negative")
    narrow = _component(0.0, wall_broadening_hz, budget.phi2_plus, "plus")
    broad = _component(0.0, wall_broadening_hz + rates.gamma_minus / math.pi,
                       budget.phi2_minus, "minus")
    return SpectrumModel((narrow, broad))


def pm_field_model(zero_field: SpectrumModel, pm: PmFieldSpec, gamma_a) -> SpectrumModel:
    """
    Harmonic comb of a pi-pulse modulated field.

    Each zero-field component is copied to n * nu_p / 2 for odd n <= n_max with
    area fraction (8/pi^2)/n^2. The narrow (plus) comb width is delta_w + d gamma_a/pi;
    the broad (minus) comb keeps its zero-field width.
    """
    narrow_fwhm = pm.wall_broadening_hz + pm.duty_cycle * gamma_a / math.pi
    components = []
    for source in zero_field.components:
        fwhm = narrow_fwhm if source.label.startswith("plus") else source.fwhm
        for n in pm.harmonics:
            components.append(_component(
                pm.harmonic_center(n), fwhm, source.area * harmonic_area_fraction(n),
                f"{source.label}_n{n}",
            ))
    return SpectrumModel(tuple(components), zero_field.floor)


def dc_field_model(chi, ops: SpinOperatorSet, rates, spec: DcFieldSpec) -> SpectrumModel:
    """Uncorrelated a and b resonances split by the nuclear Zeeman shift."""
    component_a = _component(
        spec.resonance_hz,
        spec.wall_broadening_hz + rates.gamma_a / math.pi,
        chi.chi_a ** 2 * thermal_variance(ops, ops.F_za),
        "a",
    )
    component_b = _component(
        spec.resonance_hz + spec.nuclear_zeeman_split_hz,
        spec.wall_broadening_hz + rates.gamma_b / math.pi,
        chi.chi_b ** 2 * thermal_variance(ops, ops.F_zb),
        "b",
    )
    return SpectrumModel((component_a, component_b))


def lorentzian(freq, center, fwhm, area):
    """area (fwhm/2pi) / ((f - center)^2 + (fwhm/2)^2)."""
    half = fwhm / 2
    return area * (half / math.pi) / ((freq - center) ** 2 + half ** 2)


def folded_lorentzian(freq, center, fwhm, area):
    """One-sided density: the line plus its mirror image at -center."""
    return lorentzian(freq, center, fwhm, area) + lorentzian(freq, -center, fwhm, area)


def evaluate_psd(model: SpectrumModel, freq_grid):
    freq = np.asarray(freq_grid, dtype=float)
    if freq.ndim != 1:
        raise InvalidInputError("frequency grid must be one-dimensional")
    if freq.size > 1 and np.any(np.diff(freq) < 0):
        raise InvalidInputError("frequency grid must be sorted ascending")
    psd = np.full(freq.shape, float(model.floor))
    for component in model.components:
        psd += folded_lorentzian(freq, component.center, component.fwhm, component.area)
    return psd


def total_power(model: SpectrumModel, bandwidth_hz=0.0):
    """Sum of component areas plus floor times bandwidth."""
    return float(sum(c.area for c in model.components) + model.floor * bandwidth_hz)


def pm_power_from_first_harmonic(first_harmonic_area):
    """Component power from the area of its first harmonic, i.e. area / (8/pi^2)."""
    return first_harmonic_area / FIRST_HARMONIC_FRACTION


@dataclass
class FrequencyGrid:
    start_hz: float
    stop_hz: float
    points: int = 4001

    def values(self):
        if self.points < 2 or not self.stop_hz > self.start_hz:
            raise InvalidInputError("frequency grid needs at least two points and stop > start")
        return np.linspace(self.start_hz, self.stop_hz, self.points)
