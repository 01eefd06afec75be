import dataclasses
import logging
import math
from dataclasses import dataclass
from typing import List, Optional

import numpy as np
import pandas as pd
from scipy import constants
from scipy.linalg import LinAlgError, eig, expm
from scipy.optimize import curve_fit

from spinnoise.exceptions import (
    EigenSolverError,
    IntegrationError,
    InvalidInputError,
    SpinNoiseError,
)
from spinnoise.utils.atomic import (
    AtomSpec,
    SpinOperatorSet,
    build_operators,
    is_hermitian,
    multiplet_block,
)

logger = logging.getLogger(__name__)

# Regime used for rate extraction: 2*pi*W = HYPERFINE_RATIO * Gamma, omega_0 = LARMOR_RATIO * Gamma
HYPERFINE_RATIO = 1e6
LARMOR_RATIO = 100.0
TRACE_DRIFT_LIMIT = 1e-8
STEP_SAFETY = 0.05


@dataclass(frozen=True)
class SEParams:
    """Spin-exchange rate Gamma (1/s) and bare-electron Larmor frequency omega_e (rad/s)."""

    gamma_se: float
    omega_e: float = 0.0

    def __post_init__(self):
        if not np.isfinite(self.gamma_se) or self.gamma_se < 0:
            raise InvalidInputError(f"SE rate must be finite and >= 0, got {self.gamma_se}")
        if not np.isfinite(self.omega_e):
            raise InvalidInputError("omega_e must be finite")

    def omega_0(self, atom: AtomSpec):
        """Hyperfine Larmor frequency omega_e/(2I+1)."""
        return self.omega_e / atom.multiplicity

    @classmethod
    def from_collisions(cls, number_density, cross_section, relative_speed, omega_e=0.0):
        """Gamma = n sigma v."""
        if number_density < 0 or cross_section < 0 or relative_speed < 0:
            raise InvalidInputError("n, sigma and v must be non-negative")
        return cls(number_density * cross_section * relative_speed, omega_e)

    @classmethod
    def from_omega_0(cls, gamma_se, omega_0, atom: AtomSpec):
        return cls(gamma_se, omega_0 * atom.multiplicity)


@dataclass(frozen=True)
class RateSet:
    """Weak-coupling (a, b) and zero-field (+, -) decay rates, all in 1/s."""

    gamma_a: float
    gamma_b: float
    gamma_plus: float
    gamma_minus: float

    @classmethod
    def analytic(cls, gamma_se):
        return cls(gamma_se / 8, 5 * gamma_se / 8, 0.0, 3 * gamma_se / 4)

    @classmethod
    def from_gamma_a_linewidth(cls, gamma_a_over_pi_hz):
        """Analytic rates for the SE rate implied by a measured gamma_a/pi (Hz)."""
        return cls.analytic(8 * math.pi * gamma_a_over_pi_hz)

    def as_dict(self):
        return dataclasses.asdict(self)


def relative_speed(temperature_k, mass_amu):
    """Mean relative speed sqrt(8kT/(pi mu)) of two identical atoms, m/s."""
    reduced_mass = 0.5 * mass_amu * constants.atomic_mass
    return math.sqrt(8 * constants.k * temperature_k / (math.pi * reduced_mass))


def vec(matrix):
    """Column-major stacking."""
    return np.asarray(matrix).reshape(-1, order="F")


def unvec(vector, dimension):
    return np.asarray(vector).reshape((dimension, dimension), order="F")


def commutator_superoperator(operator):
    """Matrix of X -> [H, X] acting on vec(X)."""
    eye = np.eye(operator.shape[0])
    return np.kron(eye, operator) - np.kron(operator.T, eye)


def sandwich_superoperator(left, right):
    """Matrix of X -> A X B acting on vec(X)."""
    return np.kron(right.T, left)


def check_density_matrix(rho, tol=1e-12):
    rho = np.asarray(rho)
    if rho.ndim != 2 or rho.shape[0] != rho.shape[1]:
        raise InvalidInputError(f"density matrix must be square, got shape {rho.shape}")
    if not is_hermitian(rho, tol):
        raise InvalidInputError("density matrix is not Hermitian")
    trace = np.trace(rho).real
    if abs(trace - 1) > tol:
        raise InvalidInputError(f"density matrix trace is {trace!r}, expected 1")
    smallest = np.linalg.eigvalsh((rho + rho.conj().T) / 2).min()
    if smallest < -1e-10:
        raise InvalidInputError(f"density matrix has negative eigenvalue {smallest:.3e}")
    return rho


def phi_nuclear(rho, ops: SpinOperatorSet):
    """phi = rho/4 + S.rho S, the nuclear part of rho."""
    return rho / 4 + sum(s @ rho @ s for s in ops.S)


def se_term(rho, ops: SpinOperatorSet, gamma_se):
    """Gamma [phi (1 + 4 <S>.S) - rho] with <S> = Tr(S rho)."""
    mean_spin = [np.trace(s @ rho) for s in ops.S]
    polarizer = ops.identity + 4 * sum(m * s for m, s in zip(mean_spin, ops.S))
    return gamma_se * (phi_nuclear(rho, ops) @ polarizer - rho)


def _hyperfine_scale(atom: AtomSpec):
    return 2 * math.pi * atom.hyperfine_splitting_hz / (atom.nuclear_spin + 0.5)


def master_rhs(rho, ops: SpinOperatorSet, params: SEParams, atom: Optional[AtomSpec] = None):
    """Right-hand side of the nonlinear master equation; ``atom`` sets W (default ``ops.atom``)."""
    hyperfine = _hyperfine_scale(atom or ops.atom) * (ops.IdotS @ rho - rho @ ops.IdotS) / 1j
    zeeman = params.omega_e * (ops.S_x @ rho - rho @ ops.S_x) / 1j
    return hyperfine + zeeman + se_term(rho, ops, params.gamma_se)


@dataclass
class Trajectory:
    times: np.ndarray
    states: np.ndarray

    def expectation(self, observable):
        """Tr(O rho(t)) for every stored state."""
        return np.einsum("kj,tjk->t", observable, self.states).real


def max_step(params: SEParams, atom: AtomSpec):
    fastest = max(2 * math.pi * atom.hyperfine_splitting_hz, abs(params.omega_e), params.gamma_se)
    return STEP_SAFETY / fastest


def evolve_nonlinear(rho0, params: SEParams, atom: AtomSpec, t_final, dt,
                     ops: Optional[SpinOperatorSet] = None, store_every=1) -> Trajectory:
    """
    Integrate the nonlinear master equation with classical fixed-step RK4.

    Args:
        rho0: initial density matrix.
        params: SE rate and electron Larmor frequency.
        atom: atom whose hyperfine splitting sets the coherent part.
        t_final: integration time, s.
        dt: requested step; the step used divides t_final evenly and is never larger.
        store_every: keep one state every this many steps (the final state is always kept).

    Returns:
        Trajectory of stored times and states.
    """
    rho = check_density_matrix(np.array(rho0, dtype=complex))
    limit = max_step(params, atom)
    if not dt > 0 or dt > limit:
        raise InvalidInputError(f"step {dt!r} s exceeds the stability limit {limit:.3e} s")
    if t_final < 0:
        raise InvalidInputError("t_final must be non-negative")
    ops = ops or build_operators(atom)

    n_steps = max(1, int(math.ceil(t_final / dt - 1e-9))) if t_final > 0 else 0
    step = t_final / n_steps if n_steps else 0.0

    times = [0.0]
    states = [rho.copy()]
    for k in range(1, n_steps + 1):
        k1 = master_rhs(rho, ops, params, atom)
        k2 = master_rhs(rho + 0.5 * step * k1, ops, params, atom)
        k3 = master_rhs(rho + 0.5 * step * k2, ops, params, atom)
        k4 = master_rhs(rho + step * k3, ops, params, atom)
        rho = rho + step / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
        rho = (rho + rho.conj().T) / 2

        drift = abs(np.trace(rho).real - 1)
        if drift > TRACE_DRIFT_LIMIT:
            raise IntegrationError(
                f"trace drift {drift:.3e} at step {k} (t={k * step:.6e} s); "
                f"reduce dt below {step:.3e} s"
            )
        if k % store_every == 0 or k == n_steps:
            times.append(k * step)
            states.append(rho.copy())

    logger.info("Nonlinear evolution: %d RK4 steps of %.3e s, %d states stored",
                n_steps, step, len(states))
    return Trajectory(np.array(times), np.array(states))


@dataclass
class LiouvillianMatrix:
    """Linearized master equation about identity/d, split into its three parts."""

    dimension: int
    hyperfine: np.ndarray
    zeeman: np.ndarray
    se: np.ndarray
    atom: Optional[AtomSpec] = None

    @property
    def matrix(self):
        return self.hyperfine + self.zeeman + self.se

    def apply(self, drho):
        return unvec(self.matrix @ vec(drho), self.dimension)


def build_linearized_liouvillian(params: SEParams, atom: AtomSpec,
                                 ops: Optional[SpinOperatorSet] = None,
                                 verify=True) -> LiouvillianMatrix:
    """
    Closed-form Liouvillian of the master equation linearized about rho0 = identity/d.

    L(drho) = -i 2piW/(I+1/2) [I.S, drho] - i omega_e [S_x, drho]
              + Gamma [drho/4 + sum_i S_i drho S_i + (4/d) sum_i Tr(S_i drho) S_i - drho]
    """
    ops = ops or build_operators(atom)
    d = ops.dimension
    hyperfine = -1j * _hyperfine_scale(atom) * commutator_superoperator(ops.IdotS)
    zeeman = -1j * params.omega_e * commutator_superoperator(ops.S_x)

    se = (0.25 - 1.0) * np.eye(d * d, dtype=complex)
    for s in ops.S:
        se = se + sandwich_superoperator(s, s)
        se = se + (4.0 / d) * np.outer(vec(s), vec(s.T))
    liouvillian = LiouvillianMatrix(d, hyperfine, zeeman, params.gamma_se * se, atom)

    if verify:
        error = linearization_error(liouvillian, ops, params, count=3, central=True)
        if error > 1e-6:
            raise SpinNoiseError(
                f"closed-form Liouvillian disagrees with the linearized RHS (rel. error {error:.3e})"
            )
    return liouvillian


def random_traceless_hermitian(dimension, rng, norm=1.0):
    raw = rng.normal(size=(dimension, dimension)) + 1j * rng.normal(size=(dimension, dimension))
    herm = (raw + raw.conj().T) / 2
    herm -= np.trace(herm) / dimension * np.eye(dimension)
    return norm * herm / np.linalg.norm(herm)


def linearization_error(liouvillian: LiouvillianMatrix, ops, params, count=20,
                        step=1e-6, central=False, seed=2021):
    """Worst relative mismatch between L(drho) and a finite difference of the nonlinear RHS."""
    rng = np.random.default_rng(seed)
    d = ops.dimension
    rho0 = ops.identity / d
    atom = liouvillian.atom or ops.atom

    def rhs(rho):
        return master_rhs(rho, ops, params, atom)

    base = rhs(rho0)
    worst = 0.0
    for _ in range(count):
        drho = random_traceless_hermitian(d, rng, norm=step)
        exact = liouvillian.apply(drho)
        if central:
            approx = (rhs(rho0 + drho) - rhs(rho0 - drho)) / 2
        else:
            approx = rhs(rho0 + drho) - base
        scale = np.linalg.norm(exact)
        if scale == 0:
            scale = 1.0
        worst = max(worst, np.linalg.norm(exact - approx) / scale)
    return worst


@dataclass
class EigenMode:
    value: complex
    mode: np.ndarray

    @property
    def rate(self):
        return -self.value.real

    @property
    def frequency(self):
        return self.value.imag


def liouvillian_eigenmodes(liouvillian: LiouvillianMatrix) -> List[EigenMode]:
    """Dense eigendecomposition; modes have unit Frobenius norm, sorted by |Re| ascending."""
    matrix = liouvillian.matrix
    if not np.all(np.isfinite(matrix)):
        raise InvalidInputError("Liouvillian contains non-finite entries")
    try:
        values, vectors = eig(matrix)
    except LinAlgError as exc:
        raise EigenSolverError(
            f"eigendecomposition failed: {exc}", condition=np.linalg.cond(matrix)
        ) from exc

    d = liouvillian.dimension
    modes = []
    for k in np.lexsort((np.abs(values.imag), np.abs(values.real))):
        mode = unvec(vectors[:, k], d)
        modes.append(EigenMode(complex(values[k]), mode / np.linalg.norm(mode)))
    return modes


def overlap(mode, observable):
    """|Tr(O^dagger m)| / ||O||."""
    return abs(np.vdot(observable, mode)) / np.linalg.norm(observable)


def classify_modes(modes, observables, overlap_tol=1e-6, max_frequency=None):
    """Modes with overlap above ``overlap_tol`` on any observable (and |Im| below the bound)."""
    selected = []
    for mode in modes:
        if max_frequency is not None and abs(mode.frequency) > max_frequency:
            continue
        if max(overlap(mode.mode, obs) for obs in observables) > overlap_tol:
            selected.append(mode)
    return selected


def _cluster(values, tol):
    clusters = []
    for value in sorted(values):
        if clusters and value - clusters[-1][-1] <= tol:
            clusters[-1].append(value)
        else:
            clusters.append([value])
    return [float(np.mean(c)) for c in clusters]


def regime_atom(atom: AtomSpec, gamma_se, hyperfine_ratio=HYPERFINE_RATIO):
    """Copy of ``atom`` whose 2*pi*W is ``hyperfine_ratio`` times Gamma."""
    return dataclasses.replace(
        atom, hyperfine_splitting_hz=hyperfine_ratio * gamma_se / (2 * math.pi)
    )


def zero_field_rates(gamma_se, atom: AtomSpec, ops=None, hyperfine_ratio=HYPERFINE_RATIO,
                     overlap_tol=1e-6):
    """Distinct decay rates of F_z-sector modes at omega_e = 0, slowest first."""
    ops = ops or build_operators(atom)
    model_atom = regime_atom(atom, gamma_se, hyperfine_ratio)
    liouvillian = build_linearized_liouvillian(SEParams(gamma_se, 0.0), model_atom, ops)
    modes = liouvillian_eigenmodes(liouvillian)
    sector = classify_modes(
        modes, [ops.F_za, ops.F_zb], overlap_tol,
        max_frequency=0.5 * 2 * math.pi * model_atom.hyperfine_splitting_hz,
    )
    return _cluster([m.rate for m in sector], tol=1e-4 * gamma_se)


@dataclass
class TransverseMode:
    multiplet: str
    rate: float
    frequency: float
    sense: int


def precession_sense(mode: EigenMode, ops: SpinOperatorSet, multiplet):
    """+1/-1 handedness of a transverse mode about the x field axis."""
    f_y = multiplet_block(ops, ops.F_y, multiplet)
    f_z = multiplet_block(ops, ops.F_z, multiplet)
    forward = abs(np.vdot(f_y + 1j * f_z, mode.mode))
    backward = abs(np.vdot(f_y - 1j * f_z, mode.mode))
    return int(np.sign(mode.frequency) * np.sign(forward - backward))


def weak_field_rates(gamma_se, atom: AtomSpec, ops=None, hyperfine_ratio=HYPERFINE_RATIO,
                     larmor_ratio=LARMOR_RATIO):
    """
    Transverse decay rates of the a and b multiplets in a field along x.

    The dominant mode of each multiplet is picked by its overlap with P_F F_y P_F and
    P_F F_z P_F; its conjugate partner carries the same rate.
    """
    ops = ops or build_operators(atom)
    model_atom = regime_atom(atom, gamma_se, hyperfine_ratio)
    params = SEParams.from_omega_0(gamma_se, larmor_ratio * gamma_se, atom)
    modes = liouvillian_eigenmodes(build_linearized_liouvillian(params, model_atom, ops))
    bound = 0.5 * 2 * math.pi * model_atom.hyperfine_splitting_hz

    result = {}
    for multiplet in ("a", "b"):
        transverse = [multiplet_block(ops, ops.F_y, multiplet),
                      multiplet_block(ops, ops.F_z, multiplet)]
        candidates = [m for m in modes if abs(m.frequency) < bound]
        candidates.sort(key=lambda m: -max(overlap(m.mode, obs) for obs in transverse))
        pair = candidates[:2]
        dominant = max(pair, key=lambda m: m.frequency)
        result[multiplet] = TransverseMode(
            multiplet=multiplet,
            rate=float(np.mean([m.rate for m in pair])),
            frequency=float(abs(dominant.frequency)),
            sense=precession_sense(dominant, ops, multiplet),
        )
    return result


def rate_set(gamma_se, atom: AtomSpec, ops=None) -> RateSet:
    """Assemble a RateSet from the weak-field and zero-field eigenanalyses."""
    if gamma_se == 0:
        return RateSet(0.0, 0.0, 0.0, 0.0)
    ops = ops or build_operators(atom)
    slow, fast = zero_field_rates(gamma_se, atom, ops)[:2]
    transverse = weak_field_rates(gamma_se, atom, ops)
    rates = RateSet(
        gamma_a=transverse["a"].rate,
        gamma_b=transverse["b"].rate,
        gamma_plus=slow,
        gamma_minus=fast,
    )
    logger.info("Eigen-rates at Gamma=%.6g 1/s: %s", gamma_se, rates)
    return rates


def observable_trajectories(liouvillian: LiouvillianMatrix, drho0, observables, times):
    """
    <O>(t) = Tr(O exp(Lt) drho0) for each observable.

    ``observables`` is a mapping name -> matrix (a list is named O0, O1, ...).
    Returns a DataFrame with a ``time_s`` column and one column per observable.
    """
    drho0 = np.asarray(drho0, dtype=complex)
    if not is_hermitian(drho0):
        raise InvalidInputError("initial deviation must be Hermitian")
    if abs(np.trace(drho0)) > 1e-12 * max(1.0, np.linalg.norm(drho0)):
        raise InvalidInputError("initial deviation must be traceless")
    if not isinstance(observables, dict):
        observables = {f"O{k}": obs for k, obs in enumerate(observables)}

    times = np.asarray(times, dtype=float)
    matrix = liouvillian.matrix
    start = vec(drho0)
    rows = np.array([vec(obs.T) for obs in observables.values()])

    spacing = np.diff(times)
    states = np.empty((len(times), start.size), dtype=complex)
    if len(times) > 2 and np.allclose(spacing, spacing[0], rtol=1e-12, atol=0):
        propagator = expm(matrix * spacing[0])
        current = expm(matrix * times[0]) @ start
        for k in range(len(times)):
            states[k] = current
            current = propagator @ current
    else:
        for k, t in enumerate(times):
            states[k] = expm(matrix * t) @ start

    table = pd.DataFrame({"time_s": times})
    for name, values in zip(observables, (states @ rows.T).T):
        table[name] = values.real
    return table


@dataclass
class RateFit:
    rates: list
    amplitudes: list
    residual: float
    flagged: bool


def extract_rates(times, values, n_exponentials=1, residual_threshold=1e-6) -> RateFit:
    """
    Exponential decay rates of a trajectory.

    One exponential is fitted as a straight line to log|y| (the trajectory must be
    single-signed); two exponentials use nonlinear least squares seeded from that.
    ``flagged`` is set when the relative rms residual exceeds the threshold. A
    constant trajectory has the single rate 0; asking it for two rates is an error.
    """
    if n_exponentials not in (1, 2):
        raise InvalidInputError("extract_rates fits one or two exponentials")
    times = np.asarray(times, dtype=float)
    values = np.asarray(values, dtype=float)
    if values.size == 0:
        raise InvalidInputError("empty trajectory")
    scale = np.max(np.abs(values))

    if np.ptp(values) <= 1e-14 * scale:
        if n_exponentials > 1:
            raise InvalidInputError("a constant trajectory has no second decay rate")
        return RateFit([0.0], [float(values[0])], 0.0, False)

    if not (np.all(values > 0) or np.all(values < 0)):
        raise InvalidInputError("trajectory changes sign; a log-linear fit needs one sign")
    sign = np.sign(values[0])
    slope, intercept = np.polyfit(times, np.log(np.abs(values)), 1)
    rate, amplitude = -slope, sign * math.exp(intercept)

    if n_exponentials == 1:
        model = amplitude * np.exp(-rate * times)
        residual = float(np.sqrt(np.mean((values - model) ** 2)) / scale)
        return RateFit([float(rate)], [float(amplitude)], residual, residual > residual_threshold)

    def double(t, a1, r1, a2, r2):
        return a1 * np.exp(-r1 * t) + a2 * np.exp(-r2 * t)

    guess = (amplitude / 2, rate / 2, amplitude / 2, rate * 2)
    popt, _ = curve_fit(double, times, values, p0=guess, maxfev=20000)
    residual = float(np.sqrt(np.mean((values - double(times, *popt)) ** 2)) / scale)
    order = np.argsort([popt[1], popt[3]])
    pairs = [(popt[0], popt[1]), (popt[2], popt[3])]
    pairs = [pairs[k] for k in order]
    return RateFit([float(r) for _, r in pairs], [float(a) for a, _ in pairs],
                   residual, residual > residual_threshold)


def eigenobservable_directions(liouvillian: LiouvillianMatrix, ops: SpinOperatorSet,
                               deviations, t_probe):
    """
    Eigenobservables in the (F_za, F_zb) plane from two independent initial deviations.

    Returns [(rate, unit coefficient vector)], slowest first, each vector signed so its
    F_zb coefficient is positive.
    """
    if len(deviations) != 2:
        raise InvalidInputError("exactly two initial deviations are needed")
    observables = {"F_za": ops.F_za, "F_zb": ops.F_zb}
    start, end = [], []
    for drho in deviations:
        table = observable_trajectories(liouvillian, drho, observables, [0.0, t_probe])
        start.append(table.iloc[0][["F_za", "F_zb"]].to_numpy(dtype=float))
        end.append(table.iloc[1][["F_za", "F_zb"]].to_numpy(dtype=float))
    initial = np.column_stack(start)
    final = np.column_stack(end)
    if abs(np.linalg.det(initial)) < 1e-14 * np.linalg.norm(initial) ** 2:
        raise InvalidInputError("initial deviations are not independent in the F_za/F_zb plane")

    propagator = final @ np.linalg.inv(initial)
    factors, vectors = np.linalg.eig(propagator.T)
    result = []
    for factor, vector in zip(factors.real, vectors.T.real):
        vector = vector / np.linalg.norm(vector)
        if vector[1] < 0:
            vector = -vector
        rate = -math.log(factor) / t_probe if factor > 0 else math.inf
        result.append((rate, vector))
    result.sort(key=lambda item: item[0])
    return result
