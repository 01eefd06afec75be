import logging
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy.optimize import least_squares
from scipy.signal import find_peaks, peak_widths

from spinnoise.exceptions import FitError, InvalidInputError
from spinnoise.utils.dynamics import RateSet
from spinnoise.utils.spectra import (
    DcFieldSpec,
    LorentzianComponent,
    PmFieldSpec,
    SpectrumModel,
    pm_power_from_first_harmonic,
)

logger = logging.getLogger(__name__)

QUANTITIES = ("center", "fwhm", "area")
POSITIVE_QUANTITIES = ("fwhm", "area")
# smallest starting area, in units of max|psd| * Hz
MIN_AREA_START = 1e-9
SINGULAR_CONDITION = 1e14
MAX_MASKED_FRACTION = 0.9
DEFAULT_MAX_ITERATIONS = 200
FIT_SCHEMA = "spinnoise.fit/1"


class ParamKind(str, Enum):
    FREE = "free"
    FIXED = "fixed"
    TIED = "tied"


@dataclass(frozen=True)
class ParamSpec:
    """
    How one model quantity enters a fit.

    A TIED quantity equals ``ratio * g + offset`` where g is the shared free value
    of its group, so comb areas tie with ratios 1, 1/9, 1/25 and a fixed centre
    difference is a tie with an offset.
    """

    kind: ParamKind = ParamKind.FREE
    value: Optional[float] = None
    group: Optional[str] = None
    ratio: float = 1.0
    offset: float = 0.0

    def __post_init__(self):
        if self.kind is ParamKind.FIXED and (self.value is None or not np.isfinite(self.value)):
            raise InvalidInputError("a FIXED parameter needs a finite value")
        if self.kind is ParamKind.TIED:
            if not self.group:
                raise InvalidInputError("a TIED parameter needs a group id")
            if self.ratio == 0 or not np.isfinite(self.ratio):
                raise InvalidInputError("tie ratio must be finite and non-zero")

    @classmethod
    def free(cls, value=None):
        return cls(ParamKind.FREE, value)

    @classmethod
    def fixed(cls, value):
        return cls(ParamKind.FIXED, float(value))

    @classmethod
    def tied(cls, group, ratio=1.0, offset=0.0, value=None):
        return cls(ParamKind.TIED, value, group, float(ratio), float(offset))

    @classmethod
    def from_record(cls, record):
        if isinstance(record, (int, float)):
            return cls.fixed(record)
        try:
            kind = ParamKind(record.get("kind", "free"))
        except ValueError as exc:
            raise InvalidInputError(f"unknown parameter kind {record.get('kind')!r}") from exc
        return cls(kind, record.get("value"), record.get("group"),
                   float(record.get("ratio", 1.0)), float(record.get("offset", 0.0)))


@dataclass(frozen=True)
class ComponentTemplate:
    center: ParamSpec
    fwhm: ParamSpec
    area: ParamSpec
    label: str = ""

    @classmethod
    def fixed(cls, component: LorentzianComponent):
        return cls(ParamSpec.fixed(component.center), ParamSpec.fixed(component.fwhm),
                   ParamSpec.fixed(component.area), component.label)


@dataclass
class FitProblem:
    freq: np.ndarray
    psd: np.ndarray
    components: List[ComponentTemplate]
    floor: ParamSpec = field(default_factory=ParamSpec.free)
    weights: Optional[np.ndarray] = None
    masks: List[Tuple[float, float]] = field(default_factory=list)
    max_iterations: int = DEFAULT_MAX_ITERATIONS

    def __post_init__(self):
        self.freq = np.asarray(self.freq, dtype=float)
        self.psd = np.asarray(self.psd, dtype=float)
        if self.freq.ndim != 1 or self.freq.shape != self.psd.shape:
            raise InvalidInputError("frequency and PSD arrays must be one-dimensional and equal length")
        if not (np.all(np.isfinite(self.freq)) and np.all(np.isfinite(self.psd))):
            raise InvalidInputError("fit data must be finite")
        if self.freq.size > 1 and np.any(np.diff(self.freq) <= 0):
            raise InvalidInputError("frequency grid must be strictly increasing")
        if self.weights is not None:
            self.weights = np.asarray(self.weights, dtype=float)
            if self.weights.shape != self.freq.shape or np.any(self.weights < 0):
                raise InvalidInputError("weights must be non-negative and match the data")
        for low, high in self.masks:
            if not high > low:
                raise InvalidInputError(f"mask interval ({low}, {high}) is empty")
        self.components = list(self.components)

        kept = self.active
        if kept.size and 1 - kept.mean() >= MAX_MASKED_FRACTION:
            raise FitError(f"masks exclude {100 * (1 - kept.mean()):.1f}% of the bins")

    @classmethod
    def from_frame(cls, frame: pd.DataFrame, components, **kwargs):
        return cls(frame["freq_hz"].to_numpy(), frame["psd"].to_numpy(), components, **kwargs)

    @classmethod
    def from_template(cls, frame: pd.DataFrame, template):
        """Build a problem from a JSON-style template of components, floor and masks."""
        try:
            components = [
                ComponentTemplate(
                    ParamSpec.from_record(item.get("center", {})),
                    ParamSpec.from_record(item.get("fwhm", {})),
                    ParamSpec.from_record(item.get("area", {})),
                    item.get("label", ""),
                )
                for item in template["components"]
            ]
        except (KeyError, TypeError, AttributeError) as exc:
            raise InvalidInputError(f"malformed fit template: {exc}") from exc
        floor = ParamSpec.from_record(template.get("floor", {}))
        masks = [tuple(map(float, interval)) for interval in template.get("masks", [])]
        return cls.from_frame(frame, components, floor=floor, masks=masks,
                              max_iterations=int(template.get("max_iterations", DEFAULT_MAX_ITERATIONS)))

    @property
    def active(self):
        kept = np.ones(self.freq.shape, dtype=bool)
        for low, high in self.masks:
            kept &= ~((self.freq >= low) & (self.freq <= high))
        return kept


@dataclass
class FitResult:
    parameters: Dict[str, float]
    uncertainties: Dict[str, float]
    residual_norm: float
    iterations: int
    converged: bool
    flags: List[str] = field(default_factory=list)
    condition: Optional[float] = None
    labels: List[str] = field(default_factory=list)
    derived: Dict[str, float] = field(default_factory=dict)
    stages: Dict[str, "FitResult"] = field(default_factory=dict)

    @property
    def flagged(self):
        return bool(self.flags) or not self.converged

    def value(self, name):
        return self.parameters[name]

    def error(self, name):
        return self.uncertainties[name]

    def component(self, label):
        return {q: self.parameters[f"{label}.{q}"] for q in QUANTITIES}

    def model(self) -> SpectrumModel:
        components = []
        for label in self.labels:
            values = self.component(label)
            components.append(LorentzianComponent(
                values["center"], values["fwhm"], max(values["area"], 0.0), label
            ))
        return SpectrumModel(tuple(components), self.parameters.get("floor", 0.0))

    def to_record(self):
        record = {
            "schema": FIT_SCHEMA,
            "converged": self.converged,
            "flags": list(self.flags),
            "iterations": self.iterations,
            "residual_norm": self.residual_norm,
            "condition": self.condition,
            "parameters": {
                name: {"value": value, "error": self.uncertainties.get(name)}
                for name, value in self.parameters.items()
            },
        }
        if self.derived:
            record["derived"] = dict(self.derived)
        if self.stages:
            record["stages"] = {name: stage.to_record() for name, stage in self.stages.items()}
        return record


@dataclass
class _Slot:
    name: str
    quantity: str
    spec: ParamSpec
    index: Optional[int] = None


class _Layout:
    """Maps the free/tied parameters of a problem to an internal unconstrained vector."""

    def __init__(self, problem: FitProblem, scale):
        self.scale = scale
        self.labels = []
        self.slots = []
        for i, template in enumerate(problem.components):
            label = template.label or f"c{i}"
            self.labels.append(label)
            for quantity in QUANTITIES:
                self.slots.append(_Slot(f"{label}.{quantity}", quantity, getattr(template, quantity)))
        self.slots.append(_Slot("floor", "floor", problem.floor))
        if len(set(self.labels)) != len(self.labels):
            raise FitError("component labels must be unique")

        self.names = []
        self.log = []
        groups = {}
        for slot in self.slots:
            if slot.spec.kind is ParamKind.FREE:
                slot.index = self._add(slot.name, slot.quantity in POSITIVE_QUANTITIES)
            elif slot.spec.kind is ParamKind.TIED:
                group = slot.spec.group
                if group not in groups:
                    members = self.members(group)
                    if len({m.quantity for m in members}) != 1:
                        raise FitError(f"tie group {group!r} mixes different quantities")
                    log = all(m.quantity in POSITIVE_QUANTITIES and m.spec.ratio > 0 and m.spec.offset == 0
                              for m in members)
                    groups[group] = self._add(f"tie:{group}", log)
                slot.index = groups[group]
        if not self.names:
            raise FitError("fit problem has no free parameters")

    def _add(self, name, log):
        self.names.append(name)
        self.log.append(log)
        return len(self.names) - 1

    def members(self, group):
        return [s for s in self.slots if s.spec.kind is ParamKind.TIED and s.spec.group == group]

    def unit(self, slot):
        return self.scale if slot.quantity in ("area", "floor") else 1.0

    def initial(self, guesses):
        """Internal start vector from spec values, falling back to ``guesses[name]``."""
        p0 = np.zeros(len(self.names))
        seen = set()
        for slot in self.slots:
            if slot.index is None or slot.index in seen:
                continue
            seen.add(slot.index)
            unit = self.unit(slot)
            if slot.spec.kind is ParamKind.FREE:
                value = slot.spec.value if slot.spec.value is not None else guesses[slot.name]
                master = value / unit
            else:
                source = next((m for m in self.members(slot.spec.group) if m.spec.value is not None), None)
                if source is None:
                    source = slot
                    value = guesses[slot.name]
                else:
                    value = source.spec.value
                master = (value - source.spec.offset) / (unit * source.spec.ratio)
            if self.log[slot.index]:
                if slot.quantity == "area":
                    master = max(master, MIN_AREA_START)
                if not master > 0:
                    raise FitError(f"initial value for {slot.name} must be positive")
                p0[slot.index] = math.log(master)
            else:
                p0[slot.index] = master
        return p0

    def slopes(self, p):
        """d(master value)/d(internal parameter) for each internal parameter."""
        return np.array([math.exp(raw) if log else 1.0 for raw, log in zip(p, self.log)])

    def evaluate(self, p):
        """Internal slot values and their derivatives with respect to their parameter."""
        values = np.empty(len(self.slots))
        derivs = np.zeros(len(self.slots))
        for k, slot in enumerate(self.slots):
            unit = self.unit(slot)
            if slot.index is None:
                values[k] = slot.spec.value / unit
                continue
            raw = p[slot.index]
            master, dmaster = (math.exp(raw), math.exp(raw)) if self.log[slot.index] else (raw, 1.0)
            if slot.spec.kind is ParamKind.FREE:
                values[k], derivs[k] = master, dmaster
            else:
                values[k] = slot.spec.ratio * master + slot.spec.offset / unit
                derivs[k] = slot.spec.ratio * dmaster
        return values, derivs


def _model_and_jacobian(layout: _Layout, p, freq):
    values, derivs = layout.evaluate(p)
    model = np.full(freq.shape, values[-1])
    jac = np.zeros((freq.size, len(layout.names)))
    floor_slot = layout.slots[-1]
    if floor_slot.index is not None:
        jac[:, floor_slot.index] += derivs[-1]

    for k in range(0, len(layout.slots) - 1, 3):
        center, fwhm, area = values[k:k + 3]
        d_center = np.zeros(freq.shape)
        d_fwhm = np.zeros(freq.shape)
        d_area = np.zeros(freq.shape)
        for sign in (1.0, -1.0):
            x = freq - sign * center
            denom = x * x + fwhm * fwhm / 4
            shape = fwhm / (2 * math.pi) / denom
            model += area * shape
            d_area += shape
            d_center += sign * area * fwhm / (2 * math.pi) * 2 * x / denom ** 2
            d_fwhm += area / (2 * math.pi) * (1 / denom - fwhm * fwhm / (2 * denom ** 2))
        for offset, partial in enumerate((d_center, d_fwhm, d_area)):
            slot = layout.slots[k + offset]
            if slot.index is not None:
                jac[:, slot.index] += partial * derivs[k + offset]
    return model, jac


def guess_peaks(freq, psd, count=1):
    """
    Peak-pick starting values: (center, fwhm, area) per peak, highest first.

    Centre is the peak bin, fwhm the half-maximum width, area pi/2 * height * fwhm
    above a median floor.
    """
    freq = np.asarray(freq, dtype=float)
    psd = np.asarray(psd, dtype=float)
    floor = float(np.median(psd))
    peaks, props = find_peaks(psd, prominence=0)
    if peaks.size == 0:
        peaks = np.array([int(np.argmax(psd))])
        props = {"prominences": np.array([psd[peaks[0]] - floor])}
    order = np.argsort(props["prominences"])[::-1][:count]
    peaks = peaks[order]
    widths, _, left, right = peak_widths(psd, peaks, rel_height=0.5)
    index = np.arange(freq.size)
    guesses = []
    spacing = float(np.median(np.diff(freq))) if freq.size > 1 else 1.0
    for peak, lo, hi in zip(peaks, left, right):
        fwhm = float(np.interp(hi, index, freq) - np.interp(lo, index, freq))
        fwhm = max(fwhm, spacing)
        height = max(float(psd[peak]) - floor, 0.0)
        guesses.append((float(freq[peak]), fwhm, math.pi / 2 * height * fwhm))
    return guesses, floor


def _default_guesses(problem: FitProblem, layout: _Layout, freq, psd):
    guesses = {}
    peaks, floor = guess_peaks(freq, psd, max(1, len(layout.labels)))
    peaks = sorted(peaks, key=lambda peak: peak[0])
    spacing = float(np.median(np.diff(freq))) if freq.size > 1 else 1.0
    for i, label in enumerate(layout.labels):
        center, fwhm, area = peaks[i] if i < len(peaks) else (float(freq[np.argmax(psd)]), 10 * spacing, 0.0)
        guesses[f"{label}.center"] = center
        guesses[f"{label}.fwhm"] = fwhm
        guesses[f"{label}.area"] = area
    guesses["floor"] = floor
    return guesses


def fit_lorentzians(problem: FitProblem) -> FitResult:
    """
    Damped Gauss-Newton (Levenberg-Marquardt) fit of a constrained Lorentzian sum.

    Widths and areas are fitted through their logarithm, which keeps fwhm > 0 and
    area >= 0; areas and the floor are in units of max|psd|. Uncertainties and the
    condition diagnostic come from the column-normalized Jacobian in the linear
    parameters, so a line fitted to zero area still has a finite 1-sigma.
    """
    kept = problem.active
    freq = problem.freq[kept]
    psd = problem.psd[kept]
    sqrt_w = np.sqrt(problem.weights[kept]) if problem.weights is not None else np.ones(freq.size)

    scale = float(np.max(np.abs(psd))) if psd.size else 0.0
    if not scale > 0:
        scale = 1.0
    layout = _Layout(problem, scale)
    if freq.size < len(layout.names):
        raise FitError(f"{freq.size} unmasked bins cannot constrain {len(layout.names)} parameters")

    p0 = layout.initial(_default_guesses(problem, layout, freq, psd))
    target = psd / scale

    def residuals(p):
        model, _ = _model_and_jacobian(layout, p, freq)
        return sqrt_w * (model - target)

    def jacobian(p):
        _, jac = _model_and_jacobian(layout, p, freq)
        return sqrt_w[:, None] * jac

    solution = least_squares(
        residuals, p0, jac=jacobian, method="lm", x_scale="jac",
        xtol=1e-8, ftol=1e-10, gtol=1e-12, max_nfev=problem.max_iterations,
    )
    flags = []
    converged = solution.status > 0
    if solution.status == 0:
        flags.append("max_iterations")

    ssr = float(np.sum(solution.fun ** 2))
    dof = freq.size - len(layout.names)
    slopes = layout.slopes(solution.x)
    linear_jac = solution.jac / np.where(slopes > 0, slopes, 1.0)
    norms = np.linalg.norm(linear_jac, axis=0)
    unit_jac = linear_jac / np.where(norms > 0, norms, 1.0)
    normal = unit_jac.T @ unit_jac
    condition = float(np.linalg.cond(normal)) if np.all(norms > 0) else float("inf")
    if not np.isfinite(condition) or condition > SINGULAR_CONDITION:
        flags.append("singular_normal_matrix")
        sigma_master = np.full(len(layout.names), np.nan)
    else:
        reduced = ssr / dof if dof > 0 else np.nan
        sigma_master = np.sqrt(np.clip(np.diag(np.linalg.inv(normal)) * reduced, 0, None)) / norms

    values, _ = layout.evaluate(solution.x)
    parameters = {}
    uncertainties = {}
    for k, slot in enumerate(layout.slots):
        unit = layout.unit(slot)
        parameters[slot.name] = float(values[k] * unit)
        if slot.index is None:
            uncertainties[slot.name] = 0.0
        else:
            ratio = 1.0 if slot.spec.kind is ParamKind.FREE else slot.spec.ratio
            uncertainties[slot.name] = float(abs(ratio * unit) * sigma_master[slot.index])

    result = FitResult(
        parameters=parameters,
        uncertainties=uncertainties,
        residual_norm=math.sqrt(ssr) * scale,
        iterations=int(solution.nfev),
        converged=converged,
        flags=flags,
        condition=condition,
        labels=list(layout.labels),
    )
    if result.flagged:
        logger.warning("Fit flagged %s after %d evaluations", flags or ["not_converged"], solution.nfev)
    else:
        logger.info("Fit converged in %d evaluations, residual %.3g", solution.nfev, result.residual_norm)
    return result


def welch_weights(psd, segments):
    """Inverse-variance weights K/psd^2 of a K-segment Welch estimate."""
    psd = np.asarray(psd, dtype=float)
    if segments < 1:
        raise InvalidInputError("segment count must be positive")
    tiny = np.finfo(float).tiny
    return segments / np.maximum(psd, tiny) ** 2


def _window(frame: pd.DataFrame, low, high):
    freq = frame["freq_hz"].to_numpy()
    if freq.size == 0 or freq[0] > low or freq[-1] < high:
        raise InvalidInputError(
            f"PSD grid [{freq[0] if freq.size else float('nan')}, "
            f"{freq[-1] if freq.size else float('nan')}] Hz does not cover [{low}, {high}] Hz"
        )
    keep = (freq >= low) & (freq <= high)
    return frame.loc[keep].reset_index(drop=True)


def single_lorentzian_problem(frame: pd.DataFrame, center=None, fwhm=None, area=None,
                              window=None, label="line", fix_center=False, fix_fwhm=False):
    """One Lorentzian plus a free floor, optionally restricted to a frequency window."""
    if window is not None:
        frame = _window(frame, *window)
    center_spec = ParamSpec.fixed(center) if fix_center else ParamSpec.free(center)
    fwhm_spec = ParamSpec.fixed(fwhm) if fix_fwhm else ParamSpec.free(fwhm)
    template = ComponentTemplate(center_spec, fwhm_spec, ParamSpec.free(area), label)
    return FitProblem.from_frame(frame, [template])


def _comb_templates(pm: PmFieldSpec, harmonics, label, area_group, fwhm_group):
    return [
        ComponentTemplate(
            ParamSpec.fixed(pm.harmonic_center(n)),
            ParamSpec.tied(fwhm_group, 1.0),
            ParamSpec.tied(area_group, 1.0 / n ** 2),
            f"{label}_n{n}",
        )
        for n in harmonics
    ]


def comb_problem(frame: pd.DataFrame, pm: PmFieldSpec, harmonics=(1, 3, 5), label="broad",
                 masks=(), fit_range=None, area_guess=None, fwhm_guess=None,
                 fixed_components: Sequence[ComponentTemplate] = ()):
    """
    Comb of Lorentzians at n nu_p / 2 with fixed centres, areas tied 1/n^2 and equal widths.

    ``area_guess`` is the first-harmonic area. ``fixed_components`` are carried as
    known contributions (e.g. the tails of an already fitted narrow comb).
    """
    if fit_range is None:
        fit_range = (0.0, pm.harmonic_center(max(harmonics)) + pm.pulse_rate_hz / 2)
    frame = _window(frame, *fit_range)
    freq = frame["freq_hz"].to_numpy()
    psd = frame["psd"].to_numpy()

    floor_guess = float(np.percentile(psd, 5))
    if fwhm_guess is None:
        fwhm_guess = pm.pulse_rate_hz / 2
    if area_guess is None:
        spacing = float(np.median(np.diff(freq))) if freq.size > 1 else 1.0
        excess = float(np.sum(np.clip(psd - floor_guess, 0, None)) * spacing)
        area_guess = excess / sum(1.0 / n ** 2 for n in harmonics)

    templates = _comb_templates(pm, harmonics, label, f"{label}.area", f"{label}.fwhm")
    first = templates[0]
    templates[0] = ComponentTemplate(
        first.center,
        ParamSpec.tied(f"{label}.fwhm", 1.0, value=fwhm_guess),
        ParamSpec.tied(f"{label}.area", 1.0, value=area_guess),
        first.label,
    )
    return FitProblem.from_frame(
        frame, templates + list(fixed_components),
        floor=ParamSpec.free(floor_guess), masks=list(masks),
    )


def dc_problem(frame: pd.DataFrame, spec: DcFieldSpec, fit_range=None):
    """
    Two resonances with their centre difference fixed at the nuclear Zeeman split.

    With a zero split the two lines coincide and are not separable: widths and areas
    are then tied equal.
    """
    if fit_range is not None:
        frame = _window(frame, *fit_range)
    freq = frame["freq_hz"].to_numpy()
    psd = frame["psd"].to_numpy()
    peaks, floor = guess_peaks(freq, psd, 1)
    center, fwhm, _ = peaks[0]
    spacing = float(np.median(np.diff(freq))) if freq.size > 1 else 1.0
    total = float(np.sum(np.clip(psd - floor, 0, None)) * spacing)

    split = spec.nuclear_zeeman_split_hz
    center_a = ParamSpec.tied("center", 1.0, 0.0, value=spec.resonance_hz)
    center_b = ParamSpec.tied("center", 1.0, split)
    if split == 0:
        fwhm_a = ParamSpec.tied("fwhm", 1.0, value=fwhm)
        fwhm_b = ParamSpec.tied("fwhm", 1.0)
        area_a = ParamSpec.tied("area", 1.0, value=total / 2)
        area_b = ParamSpec.tied("area", 1.0)
    else:
        narrow = max(fwhm, spacing)
        broad = 5 * max(narrow - spec.wall_broadening_hz, spacing) + spec.wall_broadening_hz
        fwhm_a = ParamSpec.free(narrow)
        fwhm_b = ParamSpec.free(broad)
        area_a = ParamSpec.free(5 * total / 6)
        area_b = ParamSpec.free(total / 6)
    templates = [
        ComponentTemplate(center_a, fwhm_a, area_a, "a"),
        ComponentTemplate(center_b, fwhm_b, area_b, "b"),
    ]
    return FitProblem.from_frame(frame, templates, floor=ParamSpec.free(floor))


def fit_dc_spectrum(frame: pd.DataFrame, spec: DcFieldSpec, fit_range=None) -> FitResult:
    """
    Fit the dc-field pair and derive gamma_F/pi = fwhm_F - delta_w and the total area.

    The fitted gamma_a also fixes the zero-field rates, reported as the expected
    broad width gamma_-/pi = 6 gamma_a/pi.
    """
    result = fit_lorentzians(dc_problem(frame, spec, fit_range))
    if spec.nuclear_zeeman_split_hz == 0:
        result.flags.append("degenerate_centers")
    if result.converged:
        a, b = result.component("a"), result.component("b")
        gamma_a_over_pi = a["fwhm"] - spec.wall_broadening_hz
        if gamma_a_over_pi > 0:
            implied = RateSet.from_gamma_a_linewidth(gamma_a_over_pi)
            result.derived["gamma_minus_over_pi_expected_hz"] = implied.gamma_minus / math.pi
        result.derived.update({
            "fwhm_a_hz": a["fwhm"],
            "fwhm_b_hz": b["fwhm"],
            "gamma_a_over_pi_hz": a["fwhm"] - spec.wall_broadening_hz,
            "gamma_b_over_pi_hz": b["fwhm"] - spec.wall_broadening_hz,
            "total_area": a["area"] + b["area"],
            "area_ratio": a["area"] / b["area"] if b["area"] else float("nan"),
        })
    return result


def _narrow_stage(narrow_scan, pm: PmFieldSpec, window_hz):
    center = pm.harmonic_center(1)
    window = (center - window_hz, center + window_hz)
    frame = _window(narrow_scan, *window)
    freq = frame["freq_hz"].to_numpy()
    psd = frame["psd"].to_numpy()
    resolution = float(np.median(np.diff(freq)))

    fwhm_guess = max(pm.wall_broadening_hz, 2 * resolution)
    floor = float(np.median(psd))
    near = np.abs(freq - center) <= fwhm_guess
    height = max(float(np.max(psd[near])) - floor, 0.0) if near.any() else 0.0
    area_guess = math.pi / 2 * height * fwhm_guess

    result = fit_lorentzians(single_lorentzian_problem(
        frame, center, fwhm_guess, area_guess, label="narrow", fix_center=True,
    ))
    width = result.parameters["narrow.fwhm"]
    unresolved = "singular_normal_matrix" in result.flags or not resolution / 4 <= width <= window_hz
    if not result.converged or unresolved:
        logger.info("Narrow line not resolved (fwhm %.3g Hz); refitting at fixed width", width)
        result = fit_lorentzians(single_lorentzian_problem(
            frame, center, fwhm_guess, area_guess, label="narrow", fix_center=True, fix_fwhm=True,
        ))
        result.flags.append("narrow_width_fixed")
    return result


def _ratio_error(plus, minus, plus_err, minus_err):
    total = plus + minus
    if total == 0:
        return float("nan")
    return math.hypot(minus / total ** 2 * plus_err, plus / total ** 2 * minus_err)


def estimate_xi(narrow_scan: pd.DataFrame, wide_scan: pd.DataFrame, pm: PmFieldSpec, masks=(),
                wall_broadening_hz=None, phi2_theory=None, narrow_window_hz=250.0,
                mask_half_width_hz=None, harmonics=(1, 3, 5), model_narrow_tails=True,
                joint=False) -> FitResult:
    """
    Split a pi-PM spectrum into its correlated noise powers.

    1. A single Lorentzian plus floor on the high-resolution scan around nu_p/2 gives
       the narrow first harmonic; its area / (8/pi^2) is <Phi_+^2>.
    2. A comb with fixed centres, areas tied 1 : 1/9 : 1/25 and equal widths is fitted
       to the wide scan with the narrow peaks masked; its first-harmonic area / (8/pi^2)
       is <Phi_-^2>. With ``model_narrow_tails`` the narrow comb from step 1 is carried
       as a fixed contribution so its tails outside the masks are not absorbed; the
       purely masked fit is always reported as stage ``broad_masked``.
    3. Optionally (``joint``) both combs are fitted together without narrow masks.
    """
    for name, frame in (("narrow", narrow_scan), ("wide", wide_scan)):
        if not {"freq_hz", "psd"} <= set(frame.columns):
            raise InvalidInputError(f"{name} scan needs freq_hz and psd columns")
    if wall_broadening_hz is None:
        wall_broadening_hz = pm.wall_broadening_hz

    narrow = _narrow_stage(narrow_scan, pm, narrow_window_hz)
    narrow_area = narrow.parameters["narrow.area"]
    narrow_fwhm = narrow.parameters["narrow.fwhm"]

    wide_freq = wide_scan["freq_hz"].to_numpy()
    resolution = float(np.median(np.diff(wide_freq)))
    if mask_half_width_hz is None:
        mask_half_width_hz = max(4 * narrow_fwhm, 4 * resolution)
    narrow_masks = [(pm.harmonic_center(n) - mask_half_width_hz, pm.harmonic_center(n) + mask_half_width_hz)
                    for n in harmonics]
    all_masks = narrow_masks + list(masks)
    fit_range = (resolution, pm.harmonic_center(max(harmonics)) + pm.pulse_rate_hz / 2)

    tails = []
    if narrow_area > 0:
        tails = [
            ComponentTemplate(ParamSpec.fixed(pm.harmonic_center(n)), ParamSpec.fixed(narrow_fwhm),
                              ParamSpec.fixed(narrow_area / n ** 2), f"narrow_n{n}")
            for n in harmonics
        ]

    masked_only = fit_lorentzians(comb_problem(wide_scan, pm, harmonics, "broad", all_masks, fit_range))
    stages = {"narrow": narrow, "broad_masked": masked_only}
    broad = masked_only
    if model_narrow_tails and tails:
        broad = fit_lorentzians(comb_problem(
            wide_scan, pm, harmonics, "broad", all_masks, fit_range,
            area_guess=masked_only.parameters["broad_n1.area"],
            fwhm_guess=masked_only.parameters["broad_n1.fwhm"],
            fixed_components=tails,
        ))
        stages["broad"] = broad

    if joint:
        joint_problem = comb_problem(
            wide_scan, pm, harmonics, "broad", list(masks), fit_range,
            area_guess=broad.parameters["broad_n1.area"],
            fwhm_guess=broad.parameters["broad_n1.fwhm"],
        )
        narrow_comb = _comb_templates(pm, harmonics, "narrow", "narrow.area", "narrow.fwhm")
        narrow_comb[0] = ComponentTemplate(
            narrow_comb[0].center,
            ParamSpec.tied("narrow.fwhm", 1.0, value=max(narrow_fwhm, resolution)),
            ParamSpec.tied("narrow.area", 1.0, value=narrow_area),
            narrow_comb[0].label,
        )
        joint_problem.components.extend(narrow_comb)
        stages["joint"] = fit_lorentzians(joint_problem)

    flags = [f"{name}:{flag}" for name, stage in stages.items() for flag in stage.flags]
    converged = all(stage.converged for stage in stages.values())
    broad_area = broad.parameters["broad_n1.area"]
    broad_fwhm = broad.parameters["broad_n1.fwhm"]
    parameters = {
        "narrow.area": narrow_area,
        "narrow.fwhm": narrow_fwhm,
        "broad.area": broad_area,
        "broad.fwhm": broad_fwhm,
    }
    uncertainties = {
        "narrow.area": narrow.uncertainties["narrow.area"],
        "narrow.fwhm": narrow.uncertainties["narrow.fwhm"],
        "broad.area": broad.uncertainties["broad_n1.area"],
        "broad.fwhm": broad.uncertainties["broad_n1.fwhm"],
    }
    result = FitResult(
        parameters=parameters,
        uncertainties=uncertainties,
        residual_norm=math.sqrt(sum(stage.residual_norm ** 2 for stage in stages.values())),
        iterations=sum(stage.iterations for stage in stages.values()),
        converged=converged,
        flags=flags,
        condition=max(stage.condition or 0.0 for stage in stages.values()),
        stages=stages,
    )
    if not converged:
        logger.warning("Xi estimate incomplete: %s", flags)
        return result

    phi2_plus = pm_power_from_first_harmonic(narrow_area)
    phi2_minus = pm_power_from_first_harmonic(broad_area)
    phi2_plus_err = pm_power_from_first_harmonic(uncertainties["narrow.area"])
    phi2_minus_err = pm_power_from_first_harmonic(uncertainties["broad.area"])
    total = phi2_plus + phi2_minus
    derived = {
        "phi2_plus": phi2_plus,
        "phi2_plus_err": phi2_plus_err,
        "phi2_minus": phi2_minus,
        "phi2_minus_err": phi2_minus_err,
        "phi2_sum": total,
        "phi2_sum_err": math.hypot(phi2_plus_err, phi2_minus_err),
        "xi_plus": phi2_plus / total if total else float("nan"),
        "xi_plus_err": _ratio_error(phi2_plus, phi2_minus, phi2_plus_err, phi2_minus_err),
        "narrow_fwhm_hz": narrow_fwhm,
        "broad_fwhm_hz": broad_fwhm,
        "broad_fwhm_masked_only_hz": masked_only.parameters["broad_n1.fwhm"],
        "gamma_minus_over_pi_hz": broad_fwhm - wall_broadening_hz,
    }
    if phi2_theory:
        derived["xi"] = total / phi2_theory
        derived["xi_err"] = derived["phi2_sum_err"] / phi2_theory
    if "joint" in stages:
        joint_stage = stages["joint"]
        joint_plus = pm_power_from_first_harmonic(joint_stage.parameters["narrow_n1.area"])
        joint_minus = pm_power_from_first_harmonic(joint_stage.parameters["broad_n1.area"])
        derived["joint_xi_plus"] = joint_plus / (joint_plus + joint_minus)
        derived["joint_broad_fwhm_hz"] = joint_stage.parameters["broad_n1.fwhm"]
    result.derived.update(derived)
    logger.info("Xi estimate: xi_+ = %.4f, broad fwhm %.1f Hz", derived["xi_plus"], broad_fwhm)
    return result
