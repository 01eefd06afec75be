import math

import numpy as np
import pytest
from scipy.optimize import brentq

from spinnoise.exceptions import InvalidInputError
from spinnoise.utils.atomic import RB87, AtomSpec, build_operators, spin_temperature_state
from spinnoise.utils.dynamics import (
    RateSet,
    SEParams,
    build_linearized_liouvillian,
    classify_modes,
    eigenobservable_directions,
    evolve_nonlinear,
    extract_rates,
    linearization_error,
    liouvillian_eigenmodes,
    master_rhs,
    observable_trajectories,
    rate_set,
    regime_atom,
    relative_speed,
    se_term,
    weak_field_rates,
    zero_field_rates,
)

GAMMA = 7917.0


def test_analytic_rates():
    rates = RateSet.analytic(8.0)
    assert rates.as_dict() == {"gamma_a": 1.0, "gamma_b": 5.0, "gamma_plus": 0.0, "gamma_minus": 6.0}
    assert RateSet.from_gamma_a_linewidth(315.0).gamma_a == pytest.approx(315.0 * math.pi)


def test_se_params_validation():
    with pytest.raises(InvalidInputError):
        SEParams(-1.0)
    assert SEParams.from_omega_0(1.0, 10.0, RB87).omega_e == pytest.approx(40.0)
    assert SEParams(1.0, 40.0).omega_0(RB87) == pytest.approx(10.0)


def test_gamma_from_collisions():
    speed = relative_speed(381.35, 86.909180527)
    assert speed == pytest.approx(431.1, rel=1e-3)
    params = SEParams.from_collisions(1.0e19, 1.9e-18, speed)
    assert params.gamma_se == pytest.approx(1.0e19 * 1.9e-18 * speed)


def test_thermal_state_is_stationary(ops):
    rho0 = ops.identity / ops.dimension
    assert np.allclose(master_rhs(rho0, ops, SEParams(GAMMA, 1e4)), 0, atol=1e-9)


def test_se_term_conserves_trace_and_f_z(ops):
    assert np.allclose(se_term(ops.identity / ops.dimension, ops, GAMMA), 0, atol=1e-9)
    rho = spin_temperature_state(ops, 0.8)
    drift = se_term(rho, ops, GAMMA)
    assert abs(np.trace(drift)) < 1e-9 * GAMMA
    assert abs(np.trace(ops.F_z @ drift)) < 1e-9 * GAMMA


def test_liouvillian_matches_linearized_rhs(ops):
    params = SEParams(GAMMA, 2 * math.pi * 1e3)
    liouvillian = build_linearized_liouvillian(params, RB87, ops)
    assert liouvillian.matrix.shape == (64, 64)
    assert linearization_error(liouvillian, ops, params, count=5, central=True) < 1e-6


def test_eigenmodes_are_normalized(ops):
    liouvillian = build_linearized_liouvillian(SEParams(1.0), regime_atom(RB87, 1.0, 1e4), ops)
    modes = liouvillian_eigenmodes(liouvillian)
    assert len(modes) == 64
    assert all(np.linalg.norm(m.mode) == pytest.approx(1.0) for m in modes)
    assert all(m.rate >= -1e-9 for m in modes)


def test_zero_field_rates(ops):
    slow, fast = zero_field_rates(GAMMA, RB87, ops)[:2]
    assert abs(slow) < 1e-6 * GAMMA
    assert fast == pytest.approx(0.75 * GAMMA, rel=1e-3)


def test_weak_field_rates(ops):
    transverse = weak_field_rates(GAMMA, RB87, ops)
    assert transverse["a"].rate == pytest.approx(GAMMA / 8, rel=1e-2)
    assert transverse["b"].rate == pytest.approx(5 * GAMMA / 8, rel=1e-2)
    assert transverse["a"].frequency == pytest.approx(100 * GAMMA, rel=1e-2)
    assert transverse["a"].sense == -transverse["b"].sense


def test_rate_set_against_analytic(ops):
    eigen = rate_set(GAMMA, RB87, ops)
    analytic = RateSet.analytic(GAMMA)
    assert eigen.gamma_a == pytest.approx(analytic.gamma_a, rel=1e-2)
    assert eigen.gamma_b == pytest.approx(analytic.gamma_b, rel=1e-2)
    assert eigen.gamma_minus == pytest.approx(analytic.gamma_minus, rel=1e-2)
    assert eigen.gamma_a / math.pi == pytest.approx(315.0, rel=1e-2)


def test_rate_set_without_collisions(ops):
    assert rate_set(0.0, RB87, ops) == RateSet(0.0, 0.0, 0.0, 0.0)


def test_eigenobservable_directions(ops):
    liouvillian = build_linearized_liouvillian(SEParams(1.0), regime_atom(RB87, 1.0, 1e4), ops)
    eps = 1e-3
    directions = eigenobservable_directions(liouvillian, ops, [eps * ops.F_za, eps * ops.F_zb], 1.0)
    (slow_rate, slow), (fast_rate, fast) = directions
    assert slow_rate == pytest.approx(0.0, abs=1e-4)
    assert fast_rate == pytest.approx(0.75, rel=1e-3)
    assert np.allclose(slow, np.array([1.0, 1.0]) / math.sqrt(2), atol=1e-3)
    assert np.allclose(fast, np.array([-1.0, 5.0]) / math.sqrt(26), atol=1e-3)


def test_eigenobservable_trajectories_decay_singly(ops):
    liouvillian = build_linearized_liouvillian(SEParams(1.0), regime_atom(RB87, 1.0, 1e4), ops)
    times = np.linspace(0.0, 2.0, 21)
    table = observable_trajectories(liouvillian, 1e-3 * ops.F_zminus, {"minus": ops.F_zminus}, times)
    fit = extract_rates(table["time_s"], table["minus"])
    assert fit.rates[0] == pytest.approx(0.75, rel=1e-3)
    assert not fit.flagged


def test_observable_trajectories_reject_traceful_deviation(ops):
    liouvillian = build_linearized_liouvillian(SEParams(1.0), regime_atom(RB87, 1.0, 1e4), ops)
    with pytest.raises(InvalidInputError):
        observable_trajectories(liouvillian, ops.identity, [ops.F_z], [0.0, 1.0])


def test_extract_rates_double_exponential():
    times = np.linspace(0, 3, 200)
    values = np.exp(-1.0 * times) + 0.5 * np.exp(-5.0 * times)
    fit = extract_rates(times, values, n_exponentials=2)
    assert fit.rates == pytest.approx([1.0, 5.0], rel=1e-4)


def test_extract_rates_constant_trajectory():
    fit = extract_rates(np.arange(5.0), np.full(5, 2.0))
    assert fit.rates == [0.0]


def test_nonlinear_evolution_conserves_fz():
    atom = AtomSpec(1.5, 1000.0 / (2 * math.pi), "model")
    ops = build_operators(atom)
    params = SEParams(10.0)
    rho0 = spin_temperature_state(ops, 0.5)
    trajectory = evolve_nonlinear(rho0, params, atom, 0.01, 4e-5, ops=ops, store_every=25)
    fz = trajectory.expectation(ops.F_z)
    assert np.allclose(fz, fz[0], rtol=1e-9)
    assert np.allclose(np.trace(trajectory.states, axis1=1, axis2=2).real, 1.0, atol=1e-10)


def test_nonlinear_evolution_agrees_with_linearization():
    atom = AtomSpec(1.5, 1000.0 / (2 * math.pi), "model")
    ops = build_operators(atom)
    params = SEParams(10.0)
    eps = 1e-4
    rho0 = ops.identity / 8 + eps * ops.F_za
    trajectory = evolve_nonlinear(rho0, params, atom, 0.05, 4e-5, ops=ops, store_every=125)
    liouvillian = build_linearized_liouvillian(params, atom, ops)
    linear = observable_trajectories(liouvillian, eps * ops.F_za, {"F_za": ops.F_za}, trajectory.times)
    assert np.allclose(trajectory.expectation(ops.F_za), linear["F_za"], rtol=1e-3, atol=1e-9)


def test_nonlinear_step_limit():
    atom = AtomSpec(1.5, 1000.0 / (2 * math.pi), "model")
    with pytest.raises(InvalidInputError):
        evolve_nonlinear(np.eye(8) / 8, SEParams(10.0), atom, 0.01, 1e-3)


def test_classify_modes_selects_f_z_sector(ops):
    model_atom = regime_atom(RB87, GAMMA)
    modes = liouvillian_eigenmodes(build_linearized_liouvillian(SEParams(GAMMA, 0.0), model_atom, ops))
    sector = classify_modes(modes, [ops.F_za, ops.F_zb])
    assert 0 < len(sector) < len(modes)
    bounded = classify_modes(modes, [ops.F_za, ops.F_zb], max_frequency=1e-6 * GAMMA)
    assert all(abs(m.frequency) <= 1e-6 * GAMMA for m in bounded)
    rates = sorted(m.rate for m in bounded)
    assert rates[0] == pytest.approx(0.0, abs=1e-6 * GAMMA)
    assert any(abs(r - 0.75 * GAMMA) < 1e-3 * GAMMA for r in rates)


@pytest.mark.parametrize("gamma", [1e2, 1e3, 1e4])
def test_rate_ratio_holds_across_gamma(ops, gamma):
    rates = rate_set(gamma, RB87, ops)
    assert rates.gamma_minus / rates.gamma_a == pytest.approx(6.0, rel=2e-2)


def test_rates_scale_linearly_with_gamma(ops):
    low, high = rate_set(1e3, RB87, ops), rate_set(2e3, RB87, ops)
    assert high.gamma_a == pytest.approx(2 * low.gamma_a, rel=1e-6)
    assert high.gamma_b == pytest.approx(2 * low.gamma_b, rel=1e-6)
    assert high.gamma_minus == pytest.approx(2 * low.gamma_minus, rel=1e-6)


@pytest.mark.parametrize("beta", [0.1, 0.5, 1.0])
def test_spin_temperature_is_se_fixed_point(ops, beta):
    rho = spin_temperature_state(ops, beta)
    assert np.linalg.norm(se_term(rho, ops, GAMMA)) <= 1e-10 * GAMMA


def test_forward_difference_linearization(ops):
    params = SEParams(GAMMA, 2 * math.pi * 1e3)
    liouvillian = build_linearized_liouvillian(params, RB87, ops)
    assert linearization_error(liouvillian, ops, params, count=20, central=False) < 1e-6


def test_spectrum_without_collisions_is_imaginary(ops):
    liouvillian = build_linearized_liouvillian(SEParams(0.0), regime_atom(RB87, 1.0), ops)
    eigenvalues = np.linalg.eigvals(liouvillian.matrix)
    assert np.max(np.abs(eigenvalues.real)) <= 1e-9 * np.max(np.abs(eigenvalues))


def test_extract_rates_rejects_two_rates_on_constant_trajectory():
    with pytest.raises(InvalidInputError):
        extract_rates(np.arange(5.0), np.full(5, 2.0), n_exponentials=2)


@pytest.mark.slow
def test_nonlinear_evolution_holds_fz_over_ten_lifetimes():
    atom = AtomSpec(1.5, 1000.0 / (2 * math.pi), "model")
    ops = build_operators(atom)
    params = SEParams(10.0)
    trajectory = evolve_nonlinear(spin_temperature_state(ops, 0.5), params, atom, 1.0, 4e-5,
                                  ops=ops, store_every=2500)
    fz = trajectory.expectation(ops.F_z)
    assert np.max(np.abs(fz - fz[0])) <= 1e-9


@pytest.mark.slow
def test_nonlinear_evolution_relaxes_to_spin_temperature():
    atom = AtomSpec(1.5, 1000.0 / (2 * math.pi), "model")
    ops = build_operators(atom)
    params = SEParams(10.0)
    rho0 = ops.identity / 8 + 1e-4 * ops.F_za
    trajectory = evolve_nonlinear(rho0, params, atom, 2.0, 4e-5, ops=ops, store_every=5000)
    final = trajectory.states[-1]
    target = float(np.trace(ops.F_z @ final).real)

    def mismatch(beta):
        return float(np.trace(ops.F_z @ spin_temperature_state(ops, beta)).real) - target

    beta = brentq(mismatch, -1.0, 1.0)
    assert np.linalg.norm(final - spin_temperature_state(ops, beta)) < 1e-6
    assert np.linalg.norm(rho0 - spin_temperature_state(ops, beta)) > 1e-5
