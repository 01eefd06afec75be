import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.linalg import expm
from sympy import Rational
from sympy.physics.wigner import clebsch_gordan

from spinnoise.exceptions import InvalidInputError, SpinNoiseError

logger = logging.getLogger(__name__)

HERMITIAN_TOL = 1e-12


@dataclass(frozen=True)
class AtomSpec:
    """Ground-state description of one alkali atom (electron spin 1/2, nuclear spin I)."""

    nuclear_spin: float
    hyperfine_splitting_hz: float
    isotope_label: str = "87Rb"
    mass_amu: float = 86.909180527

    def __post_init__(self):
        twice = 2.0 * self.nuclear_spin
        if twice <= 0 or abs(twice - round(twice)) > 1e-12:
            raise InvalidInputError(
                f"nuclear spin must be a positive half-integer, got {self.nuclear_spin}"
            )
        if not self.hyperfine_splitting_hz > 0:
            raise InvalidInputError(
                f"hyperfine splitting must be positive, got {self.hyperfine_splitting_hz}"
            )

    @property
    def multiplicity(self):
        """2I+1, the number of nuclear sublevels."""
        return int(round(2 * self.nuclear_spin)) + 1

    @property
    def dimension(self):
        return 2 * self.multiplicity

    @property
    def a(self):
        return self.nuclear_spin + 0.5

    @property
    def b(self):
        return self.nuclear_spin - 0.5


RB87 = AtomSpec(1.5, 6.834682610904e9, "87Rb", 86.909180527)
RB85 = AtomSpec(2.5, 3.035732439e9, "85Rb", 84.911789738)
CS133 = AtomSpec(3.5, 9.192631770e9, "133Cs", 132.905451933)

ATOM_PRESETS = {atom.isotope_label: atom for atom in (RB87, RB85, CS133)}


def spin_matrices(j):
    """Return (J_x, J_y, J_z) for spin j in the |j, m> basis, m descending."""
    n = int(round(2 * j)) + 1
    m = j - np.arange(n)
    raising = np.zeros((n, n), dtype=complex)
    for k in range(1, n):
        raising[k - 1, k] = np.sqrt(j * (j + 1) - m[k] * (m[k] + 1))
    lowering = raising.conj().T
    jx = (raising + lowering) / 2
    jy = (raising - lowering) / 2j
    jz = np.diag(m).astype(complex)
    return jx, jy, jz


def coupling_matrix(nuclear_spin):
    """
    Clebsch-Gordan rotation from the product basis |m_I, m_S> to |F, m_F>.

    Columns are ordered F = a first, m_F descending, then F = b. Rows follow
    numpy.kron(nuclear, electron) ordering with both m descending.
    """
    nuclear = Rational(int(round(2 * nuclear_spin)), 2)
    half = Rational(1, 2)
    m_nuclear = [nuclear - k for k in range(int(2 * nuclear) + 1)]
    m_electron = [half, -half]

    columns = []
    for total in (nuclear + half, nuclear - half):
        for k in range(int(2 * total) + 1):
            columns.append((total, total - k))

    size = len(m_nuclear) * 2
    rotation = np.zeros((size, size))
    for col, (total, m_total) in enumerate(columns):
        for i, m_i in enumerate(m_nuclear):
            for s, m_s in enumerate(m_electron):
                if m_i + m_s != m_total:
                    continue
                rotation[2 * i + s, col] = float(
                    clebsch_gordan(nuclear, half, total, m_i, m_s, m_total)
                )

    # orthonormality of the coefficient table
    if not np.allclose(rotation.T @ rotation, np.eye(size), atol=1e-12):
        raise SpinNoiseError(f"Clebsch-Gordan table for I={nuclear_spin} is not orthonormal")
    return rotation


@dataclass(frozen=True)
class SpinOperatorSet:
    """Dense operators on the 2(2I+1)-dimensional ground manifold, |F, m_F> basis."""

    atom: AtomSpec
    dimension: int
    I_x: np.ndarray
    I_y: np.ndarray
    I_z: np.ndarray
    S_x: np.ndarray
    S_y: np.ndarray
    S_z: np.ndarray
    F_x: np.ndarray
    F_y: np.ndarray
    F_z: np.ndarray
    IdotS: np.ndarray
    P_a: np.ndarray
    P_b: np.ndarray
    F_za: np.ndarray
    F_zb: np.ndarray
    F_zplus: Optional[np.ndarray] = None
    F_zminus: Optional[np.ndarray] = None

    @property
    def multiplets(self):
        return {"a": self.atom.a, "b": self.atom.b}

    @property
    def S(self):
        return (self.S_x, self.S_y, self.S_z)

    @property
    def identity(self):
        return np.eye(self.dimension, dtype=complex)

    def projector(self, multiplet):
        if multiplet == "a":
            return self.P_a
        if multiplet == "b":
            return self.P_b
        raise InvalidInputError(f"unknown multiplet {multiplet!r}; expected 'a' or 'b'")


def build_operators(atom: AtomSpec) -> SpinOperatorSet:
    """Build the full operator set for ``atom``."""
    nuclear = spin_matrices(atom.nuclear_spin)
    electron = spin_matrices(0.5)
    eye_i = np.eye(atom.multiplicity)
    eye_s = np.eye(2)

    rotation = coupling_matrix(atom.nuclear_spin)

    def coupled(op):
        return rotation.T @ op @ rotation

    i_ops = [coupled(np.kron(op, eye_s)) for op in nuclear]
    s_ops = [coupled(np.kron(eye_i, op)) for op in electron]
    f_ops = [i_op + s_op for i_op, s_op in zip(i_ops, s_ops)]
    i_dot_s = sum(i_op @ s_op for i_op, s_op in zip(i_ops, s_ops))

    # P_F from the F^2 spectrum: F^2 takes a(a+1) on the a block and b(b+1) on the b block
    f_squared = sum(f_op @ f_op for f_op in f_ops)
    a, b = atom.a, atom.b
    eye = np.eye(atom.dimension)
    p_a = (f_squared - b * (b + 1) * eye) / (a * (a + 1) - b * (b + 1))
    p_b = (f_squared - a * (a + 1) * eye) / (b * (b + 1) - a * (a + 1))

    f_za = p_a @ f_ops[2] @ p_a
    f_zb = p_b @ f_ops[2] @ p_b

    f_zplus = f_zminus = None
    if np.isclose(atom.nuclear_spin, 1.5):
        f_zplus = (f_za + f_zb) / 6
        f_zminus = (-f_za + 5 * f_zb) / 6

    ops = SpinOperatorSet(
        atom=atom,
        dimension=atom.dimension,
        I_x=i_ops[0], I_y=i_ops[1], I_z=i_ops[2],
        S_x=s_ops[0], S_y=s_ops[1], S_z=s_ops[2],
        F_x=f_ops[0], F_y=f_ops[1], F_z=f_ops[2],
        IdotS=i_dot_s,
        P_a=p_a, P_b=p_b,
        F_za=f_za, F_zb=f_zb,
        F_zplus=f_zplus, F_zminus=f_zminus,
    )
    logger.debug("Built %d-dim operator set for %s", atom.dimension, atom.isotope_label)
    return ops


def multiplet_block(ops: SpinOperatorSet, observable, multiplet):
    """P_F O P_F for F in {'a', 'b'}."""
    projector = ops.projector(multiplet)
    return projector @ observable @ projector


def is_hermitian(matrix, tol=HERMITIAN_TOL):
    matrix = np.asarray(matrix)
    return matrix.ndim == 2 and np.allclose(matrix, matrix.conj().T, atol=tol, rtol=0)


def _check_observable(ops, observable):
    observable = np.asarray(observable)
    if observable.shape != (ops.dimension, ops.dimension):
        raise InvalidInputError(
            f"observable shape {observable.shape} does not match dimension {ops.dimension}"
        )
    if not is_hermitian(observable):
        raise InvalidInputError("observable is not Hermitian")
    return observable


def thermal_variance(ops: SpinOperatorSet, observable) -> float:
    """Tr(rho0 O^2) - Tr(rho0 O)^2 at rho0 = identity/d."""
    observable = _check_observable(ops, observable)
    d = ops.dimension
    mean = np.trace(observable).real / d
    return float(np.trace(observable @ observable).real / d - mean ** 2)


def thermal_covariance(ops: SpinOperatorSet, first, second) -> float:
    """Symmetrized thermal covariance of two observables."""
    first = _check_observable(ops, first)
    second = _check_observable(ops, second)
    d = ops.dimension
    anticommutator = first @ second + second @ first
    return float(
        0.5 * np.trace(anticommutator).real / d
        - (np.trace(first).real / d) * (np.trace(second).real / d)
    )


def thermal_multiplet_variance(nuclear_spin, total):
    """Closed form (2F+1)/(2(2I+1)) * F(F+1)/3 for the F_z variance of multiplet F."""
    return (2 * total + 1) / (2 * (2 * nuclear_spin + 1)) * total * (total + 1) / 3


def spin_temperature_state(ops: SpinOperatorSet, beta):
    """exp(beta F_z)/Z."""
    rho = expm(beta * ops.F_z)
    return rho / np.trace(rho).real
