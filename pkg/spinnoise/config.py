"""
Run configuration.

A configuration is TOML with dotted keys whose names carry their units
(``pm.pulse_rate_hz``, ``probe.detuning_ghz``). ``DEFAULTS`` is the schema: a key
not listed there is rejected, and every value must have the type of its default.
Presets ship in ``spinnoise/presets`` and are overlaid by user files.
"""
import functools
import logging
import math
try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
from dataclasses import dataclass
from importlib import resources
from types import MappingProxyType
from typing import Any, Mapping, Optional

from scipy import constants

from spinnoise.exceptions import ConfigError
from spinnoise.utils.atomic import ATOM_PRESETS, AtomSpec, build_operators
from spinnoise.utils.dynamics import SEParams, relative_speed
from spinnoise.utils.noisegen import TimeSeriesConfig
from spinnoise.utils.optics import CellGeometry, OpticalLine, polar_frequencies, rb_number_density
from spinnoise.utils.spectra import DcFieldSpec, PmFieldSpec

logger = logging.getLogger(__name__)

CELSIUS_OFFSET = 273.15
PROBE_REFERENCES = ("cm", "aa", "ab", "ba", "bb", "polar_plus", "polar_minus")

DEFAULTS = {
    "atom.isotope": "87Rb",
    "atom.nuclear_spin": 1.5,
    "atom.w_ghz": 6.834682610904,
    "atom.w_excited_ghz": 0.8166,
    "atom.mass_amu": 86.909180527,
    "optical.wavelength_nm": 794.978851156,
    "optical.oscillator_strength": 0.34,
    "optical.lorentzian_fwhm_mhz": 5.75,
    "optical.doppler_fwhm_mhz": 0.0,
    "cell.length_mm": 23.0,
    "cell.probe_area_mm2": 64.0,
    "cell.temperature_c": 108.2,
    "cell.stem_temperature_c": 108.2,
    "cell.density_per_m3": 0.0,
    "se.gamma_per_s": 7917.0,
    "se.cross_section_m2": 1.9e-18,
    "se.omega_e_rad_s": 0.0,
    "pm.pulse_rate_hz": 2000.0,
    "pm.duty_cycle": 0.0014,
    "pm.harmonic_count": 25,
    "pm.wall_broadening_hz": 25.0,
    "dc.resonance_hz": 10000.0,
    "dc.nuclear_zeeman_split_hz": 159.0,
    "probe.detuning_ghz": -14.1,
    "probe.reference": "ab",
    "polar.low_ghz": -2.0,
    "polar.high_ghz": 10.0,
    "simulation.seed": 1,
    "simulation.sample_rate_hz": 20000.0,
    "simulation.duration_s": 120.0,
    "simulation.shot_noise_psd": 0.0,
    "spectrum.start_hz": 0.0,
    "spectrum.stop_hz": 10000.0,
    "spectrum.points": 4001,
    "pipeline.narrow_resolution_hz": 1.0,
    "pipeline.wide_resolution_hz": 15.6,
    "pipeline.overlap_fraction": 0.5,
    "pipeline.narrow_window_hz": 250.0,
    "pipeline.model_narrow_tails": True,
    "pipeline.subtract_background": False,
    "pipeline.joint_fit": False,
}

PRESETS = ("red_detuned", "polar_minus", "hot_cell")


def flatten(table: Mapping[str, Any], prefix=""):
    """Nested TOML tables to dotted keys."""
    flat = {}
    for key, value in table.items():
        name = f"{prefix}{key}"
        if isinstance(value, Mapping):
            flat.update(flatten(value, f"{name}."))
        else:
            flat[name] = value
    return flat


def _coerce(key, value):
    default = DEFAULTS[key]
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{key} must be a boolean, got {value!r}")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{key} must be an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key} must be a number, got {value!r}")
        if not math.isfinite(value):
            raise ConfigError(f"{key} must be finite")
        return float(value)
    if not isinstance(value, str):
        raise ConfigError(f"{key} must be a string, got {value!r}")
    return value


def validate(values: Mapping[str, Any]):
    """Check dotted keys against ``DEFAULTS`` and return the coerced mapping."""
    unknown = sorted(set(values) - set(DEFAULTS))
    if unknown:
        raise ConfigError(f"unknown configuration keys: {', '.join(unknown)}")
    checked = {key: _coerce(key, value) for key, value in values.items()}
    reference = checked.get("probe.reference")
    if reference is not None and reference not in PROBE_REFERENCES:
        raise ConfigError(f"probe.reference must be one of {', '.join(PROBE_REFERENCES)}")
    return checked


def read_toml(path):
    try:
        with open(path, "rb") as handle:
            return flatten(tomllib.load(handle))
    except OSError as exc:
        raise ConfigError(f"cannot read configuration {path}: {exc}") from exc
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"invalid TOML in {path}: {exc}") from exc


def read_preset(name):
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; choose from {', '.join(PRESETS)}")
    text = resources.files("spinnoise.presets").joinpath(f"{name}.toml").read_text(encoding="utf-8")
    return flatten(tomllib.loads(text))


def _overlay(values, layer):
    """
    Apply one configuration layer. A layer naming a known ``atom.isotope`` also
    sets that isotope's spin, splitting and mass unless it gives them itself.
    """
    values.update(layer)
    atom = ATOM_PRESETS.get(layer.get("atom.isotope"))
    if atom is None:
        return
    for key, value in (("atom.nuclear_spin", atom.nuclear_spin),
                       ("atom.w_ghz", atom.hyperfine_splitting_hz / 1e9),
                       ("atom.mass_amu", atom.mass_amu)):
        if key not in layer:
            values[key] = value


def load_config(path=None, preset=None, overrides: Optional[Mapping[str, Any]] = None):
    """Defaults, then ``preset``, then the file at ``path``, then ``overrides``."""
    values = dict(DEFAULTS)
    if preset:
        _overlay(values, validate(read_preset(preset)))
    if path:
        _overlay(values, validate(read_toml(path)))
    if overrides:
        _overlay(values, validate(flatten(overrides)))
    config = RunConfig(MappingProxyType(values))
    logger.debug("Loaded configuration (preset=%s, file=%s)", preset, path)
    return config


@functools.lru_cache(maxsize=8)
def _operators(atom: AtomSpec):
    return build_operators(atom)


@dataclass(frozen=True)
class RunConfig:
    values: Mapping[str, Any]

    def __getitem__(self, key):
        return self.values[key]

    def with_overrides(self, overrides):
        values = dict(self.values)
        _overlay(values, validate(flatten(overrides)))
        return RunConfig(MappingProxyType(values))

    def atom_spec(self):
        return AtomSpec(
            self["atom.nuclear_spin"], self["atom.w_ghz"] * 1e9,
            self["atom.isotope"], self["atom.mass_amu"],
        )

    def operators(self):
        return _operators(self.atom_spec())

    @property
    def temperature_k(self):
        return self["cell.temperature_c"] + CELSIUS_OFFSET

    def number_density(self):
        if self["cell.density_per_m3"] > 0:
            return self["cell.density_per_m3"]
        return rb_number_density(self["cell.stem_temperature_c"] + CELSIUS_OFFSET)

    def optical_line(self):
        if self["atom.nuclear_spin"] != 1.5:
            raise ConfigError("the optical model is defined for I = 3/2 atoms only")
        shape = dict(
            line_center_hz=constants.c / (self["optical.wavelength_nm"] * 1e-9),
            ground_splitting_hz=self["atom.w_ghz"] * 1e9,
            excited_splitting_hz=self["atom.w_excited_ghz"] * 1e9,
            oscillator_strength=self["optical.oscillator_strength"],
            lorentzian_fwhm_hz=self["optical.lorentzian_fwhm_mhz"] * 1e6,
            nuclear_spin=self["atom.nuclear_spin"],
        )
        doppler = self["optical.doppler_fwhm_mhz"] * 1e6
        if doppler <= 0:
            return OpticalLine.for_temperature(self.temperature_k, self["atom.mass_amu"], **shape)
        return OpticalLine(doppler_fwhm_hz=doppler, **shape)

    def cell(self):
        return CellGeometry(
            self["cell.length_mm"] * 1e-3,
            self["cell.probe_area_mm2"] * 1e-6,
            self.number_density(),
        )

    def se_params(self):
        if self["se.gamma_per_s"] >= 0:
            return SEParams(self["se.gamma_per_s"], self["se.omega_e_rad_s"])
        speed = relative_speed(self.temperature_k, self["atom.mass_amu"])
        return SEParams.from_collisions(
            self.number_density(), self["se.cross_section_m2"], speed, self["se.omega_e_rad_s"]
        )

    def pm_spec(self):
        return PmFieldSpec(
            self["pm.pulse_rate_hz"], self["pm.duty_cycle"],
            self["pm.harmonic_count"], self["pm.wall_broadening_hz"],
        )

    def dc_spec(self):
        return DcFieldSpec(
            self["dc.resonance_hz"], self["dc.nuclear_zeeman_split_hz"], self["pm.wall_broadening_hz"]
        )

    def series_config(self):
        return TimeSeriesConfig(
            self["simulation.sample_rate_hz"], self["simulation.duration_s"],
            self["simulation.seed"], self["simulation.shot_noise_psd"],
        )

    def polar_window_hz(self):
        return self["polar.low_ghz"] * 1e9, self["polar.high_ghz"] * 1e9

    def probe_frequency_hz(self, line: Optional[OpticalLine] = None):
        """Probe frequency from the line centre of gravity, Hz."""
        line = line or self.optical_line()
        reference = self["probe.reference"]
        detuning = self["probe.detuning_ghz"] * 1e9
        if reference == "cm":
            return detuning
        if reference in line.offsets:
            return line.offsets[reference] + detuning
        kind = reference.split("_", 1)[1]
        roots = [r for r in polar_frequencies(line, self.polar_window_hz()) if r.kind == kind]
        if not roots:
            raise ConfigError(f"no {kind} polar frequency inside the polar search window")
        roots.sort(key=lambda r: r.near_resonance)
        return roots[0].nu + detuning


def config_from_app(app_config, overrides=None):
    """RunConfig for a Flask app: its preset and [SPINNOISE] table, then request overrides."""
    config = load_config(preset=app_config.get("SPINNOISE_PRESET"),
                         overrides=app_config.get("SPINNOISE") or None)
    if overrides:
        config = config.with_overrides(overrides)
    return config
