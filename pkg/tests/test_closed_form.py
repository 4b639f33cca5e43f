import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import norm

from qbsde.closed_form import (comparison_check, envelope_bounds, hbar, log_bsde_residual,
                               log_transform_ln1p, pure_quadratic_surface, quadratic_log_map,
                               scalar_log_bound_violations, solve_pure_quadratic,
                               solve_theta_linear, solve_zero_generator)
from qbsde.errors import DomainError, IntegrabilityError, PreconditionError
from qbsde.function_model import (Constant, IndicatorHalfline, Polynomial, Sum, cosine,
                                  identity)
from qbsde.mc_engine import SolutionSurface
from qbsde.pde_oracle import PdeGrid, solve_pde
from qbsde.scenario import GeneratorSpec, GirsanovControl, TerminalSpec, f_zsq

W1 = TerminalSpec(identity(), 1.0)


def test_zero_generator_examples():
    y, z = solve_zero_generator(W1, 0.3, 0.7)
    assert (y, z) == pytest.approx((0.7, 1.0), abs=1e-12)
    y, z = solve_zero_generator(TerminalSpec(Polynomial((0, 0, 1)), 1.0), 0.0, 0.0)
    assert y == pytest.approx(1.0, abs=1e-10) and z == pytest.approx(0.0, abs=1e-10)
    y, _ = solve_zero_generator(TerminalSpec(cosine(), 1.0), 0.0, 0.0)
    assert y == pytest.approx(np.exp(-0.5), abs=1e-10)


def test_pure_quadratic_entropic():
    y, z = solve_pure_quadratic(Constant(0.5), W1, 0.0, 0.0)
    assert y == pytest.approx(0.5, abs=1e-6)
    assert z == pytest.approx(1.0, abs=1e-6)
    y, _ = solve_pure_quadratic(Constant(0.5), W1, 0.5, 0.2)
    assert y == pytest.approx(0.2 + 0.25, abs=1e-6)


def test_pure_quadratic_constant_terminal():
    y, z = solve_pure_quadratic(Sum((Constant(0.3), cosine())), TerminalSpec(Constant(1.7), 1.0), 0.0, 0.4)
    assert y == pytest.approx(1.7, abs=1e-10) and z == pytest.approx(0.0, abs=1e-10)


def test_pure_quadratic_step_coefficient_matches_pde():
    f = IndicatorHalfline(0.0, 0.0, 1.0)
    y, _ = solve_pure_quadratic(f, W1, 0.0, 0.0)
    # u(y) = (e^{2y} - 1)/2 on y >= 0 and y below; E u(W_1) closed form
    eu = 0.5 * (np.exp(2) * norm.cdf(2.0) - 0.5) - 1 / np.sqrt(2 * np.pi)
    assert 0.5 * (np.exp(2 * y) - 1) == pytest.approx(eu, abs=1e-9)
    H = GeneratorSpec.from_terms(f_zsq(f, abs_y=False))
    pde = solve_pde(H, identity(), PdeGrid.build(H, identity(), 1.0, nx=401))
    assert pde.y0() == pytest.approx(y, abs=1e-3)


def test_pure_quadratic_non_integrable():
    with pytest.raises(IntegrabilityError):
        solve_pure_quadratic(Constant(0.5), TerminalSpec(Polynomial((0, 0, 1)), 1.0), 0.0, 0.0)


def test_surface_shapes():
    s = pure_quadratic_surface(Constant(0.5), W1, np.array([0.0, 0.5, 1.0]), np.linspace(-1, 1, 5))
    assert s.Y.shape == (3, 5)
    np.testing.assert_allclose(s.Y[-1], np.linspace(-1, 1, 5))
    np.testing.assert_allclose(s.Y[0], np.linspace(-1, 1, 5) + 0.5, atol=1e-6)


def test_envelope_zero_coefficient():
    times, states = np.array([0.0, 0.5, 1.0]), np.linspace(-2, 2, 9)
    b = envelope_bounds(Constant(0.0), 0.0, 0.0, W1, times, states)
    sig = np.sqrt(1.0)
    expected_plus = states * norm.cdf(states / sig) + sig * norm.pdf(states / sig)
    np.testing.assert_allclose(b.U[0], expected_plus, atol=1e-10)
    np.testing.assert_allclose(b.L[0], -(expected_plus - states), atol=1e-10)
    np.testing.assert_allclose(b.U[-1], np.maximum(states, 0))


def test_envelope_constant_terminal():
    b = envelope_bounds(Constant(0.5), 0.0, 0.0, TerminalSpec(Constant(2.0), 1.0),
                        np.array([0.0, 1.0]), np.linspace(-1, 1, 5))
    np.testing.assert_allclose(b.U, 2.0, atol=1e-10)
    np.testing.assert_allclose(b.L, 0.0, atol=1e-12)


def test_envelope_contains_pde_solution():
    f = Constant(0.5)
    times = np.linspace(0, 1, 11)
    states = np.linspace(-10.5, 10.5, 351)
    b = envelope_bounds(f, 0.0, 0.0, W1, times, states)
    # U(0, 0) = ln E exp(W_1^+)
    u0 = np.log(np.exp(0.5) * norm.cdf(1.0) + 0.5)
    assert b.U[0, 175] == pytest.approx(u0, abs=1e-8)
    H = GeneratorSpec.from_terms(f_zsq(f))
    s = solve_pde(H, identity(), PdeGrid.build(H, identity(), 1.0, X=10.0))
    x = np.linspace(-2, 2, 21)
    for t in (0.0, 0.5):
        L, U = b.at(t, x)
        y = s.interpolate(t, x)
        assert np.all(y <= U + 1e-3) and np.all(y >= L - 1e-3)


def test_theta_linear():
    res = solve_theta_linear(0.5, TerminalSpec(Polynomial((5.0, 1.0)), 1.0), M=100_000, seed=3)
    assert res.y0 == pytest.approx(5.5, abs=2e-2)
    assert res.y0 >= res.expectation
    assert res.pde_value == pytest.approx(5.5, abs=1e-2)
    assert len(res.table) == 81


def test_theta_zero_gives_expectation():
    ts = TerminalSpec(Polynomial((2.0, 0.0, 1.0)), 1.0)
    res = solve_theta_linear(0.0, ts, M=20_000, seed=1, pde=False)
    assert all(r[2] == res.table[0][2] for r in res.table)
    assert res.y0 == res.expectation


def test_theta_linear_needs_positive_terminal():
    with pytest.raises(PreconditionError):
        solve_theta_linear(0.5, W1, M=1000, pde=False)


def test_theta_family_includes_zero_control():
    fam = [GirsanovControl((1, 1))]
    res = solve_theta_linear(0.5, TerminalSpec(Polynomial((5.0, 1.0)), 1.0), family=fam,
                             M=2000, seed=1, pde=False)
    assert len(res.table) == 2 and res.expectation == pytest.approx(5.0, abs=0.1)


def _surface(Y, Z):
    return SolutionSurface("state_indexed", np.arange(Y.shape[0], dtype=float), Y, Z,
                           states=np.arange(Y.shape[1], dtype=float))


def test_log_map_examples():
    s = quadratic_log_map(_surface(np.zeros((2, 3)), np.zeros((2, 3))), 1.0)
    np.testing.assert_array_equal(s.Y, 1.0)
    np.testing.assert_array_equal(s.Z, 0.0)
    with pytest.raises(DomainError):
        quadratic_log_map(s, -1.0)
    with pytest.raises(DomainError):
        quadratic_log_map(_surface(-np.ones((2, 3)), np.zeros((2, 3))), 1.0, "inverse")


@settings(max_examples=40, deadline=None)
@given(st.floats(0.1, 3.0), st.integers(0, 2 ** 32))
def test_log_map_round_trip(gamma, seed):
    rng = np.random.default_rng(seed)
    s = _surface(rng.normal(size=(3, 4)), rng.normal(size=(3, 4)))
    back = quadratic_log_map(quadratic_log_map(s, gamma), gamma, "inverse")
    np.testing.assert_allclose(back.Y, s.Y, atol=1e-12)
    np.testing.assert_allclose(back.Z, s.Z, atol=1e-12)


def test_log_map_entropic_exponential_moment():
    H = GeneratorSpec.from_terms(f_zsq(Constant(0.5)))
    s = solve_pde(H, identity(), PdeGrid.build(H, identity(), 1.0))
    assert quadratic_log_map(s, 1.0).y0() == pytest.approx(np.exp(0.5), abs=2e-3)
    assert log_bsde_residual(quadratic_log_map(s, 1.0), 1.0, 0.0, 0.0) <= 1e-2


def test_ln1p_and_hbar():
    s = log_transform_ln1p(_surface(np.zeros((2, 3)), np.zeros((2, 3))), 1, 1, 1)
    np.testing.assert_array_equal(s.surface.Y, 0.0)
    assert s.violations == 0
    H = hbar(1.0, 1.0, 1.0)
    assert 0 <= H(1.0, 0.0) <= 4.0
    assert scalar_log_bound_violations() == 0


def test_comparison_examples():
    times, states = np.linspace(0, 1, 5), np.linspace(-1, 1, 5)
    rep = comparison_check(Constant(0.5), Constant(0.5), W1, W1, times, states)
    assert rep.max_excess == 0.0
    rep = comparison_check(Constant(0.0), Constant(0.5), W1, W1, times, states)
    assert rep.lower.Y[0, 2] == pytest.approx(0.0, abs=1e-8)
    assert rep.upper.Y[0, 2] == pytest.approx(0.5, abs=1e-6)
    g1 = TerminalSpec(Polynomial((-1.0, 1.0)), 1.0)
    rep = comparison_check(Constant(0.5), Constant(0.5), g1, W1, times, states)
    assert rep.max_excess <= 1e-8
    with pytest.raises(PreconditionError):
        comparison_check(Constant(0.5), Constant(0.5), W1, g1, times, states)


def test_moment_bound_is_monotone_in_time():
    from qbsde.closed_form import moment_bound
    from qbsde.function_model import Max, Min

    g = Max((Min((identity(), Constant(3.0))), Constant(-3.0)))
    H = GeneratorSpec.from_terms(f_zsq(Constant(0.5)))
    s = solve_pde(H, g, PdeGrid.build(H, g, 1.0), store_every=25)
    mb = moment_bound(Constant(0.5), TerminalSpec(g, 1.0), s, p=2.0)
    vals = [v for _, v in mb.per_time]
    assert np.all(np.diff(vals) >= -1e-9)
    assert mb.holds()
    with pytest.raises(PreconditionError):
        moment_bound(Constant(0.5), TerminalSpec(g, 1.0), s, p=1.0)


def test_envelope_with_tabulated_majorant_is_fast_and_valid():
    import time

    from qbsde.scenario import dominating_coefficient

    f = Sum((Constant(0.2), IndicatorHalfline(1.0, 0.0, 0.2)))
    phi = dominating_coefficient(Sum((f, cosine())), 10.0)
    ts = TerminalSpec(cosine(), 1.0)
    t0 = time.perf_counter()
    b = envelope_bounds(phi, 0.0, 0.0, ts, np.linspace(0, 1, 11), np.linspace(-2, 2, 11))
    assert time.perf_counter() - t0 < 5.0
    assert np.all(b.L <= b.U)
