import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from qbsde.errors import ConfigError
from qbsde.function_model import Constant, identity
from qbsde.mc_engine import (SolutionSurface, TimeGrid, build_basis, counter_normals,
                             default_bins, lsmc_solve, regress_conditional, simulate_paths)
from qbsde.scenario import GeneratorSpec, TerminalSpec, f_zsq


def test_time_grid():
    g = TimeGrid(2.0, 4)
    assert g.h == 0.5
    np.testing.assert_allclose(g.nodes, [0, 0.5, 1, 1.5, 2])
    with pytest.raises(ConfigError):
        TimeGrid(-1.0, 3)


def test_simulation_is_deterministic_and_worker_independent():
    grid = TimeGrid(1.0, 10)
    a = simulate_paths(5, 3000, grid, chunk=256)
    b = simulate_paths(5, 3000, grid, workers=4, chunk=256)
    c = simulate_paths(5, 3000, grid, chunk=4096)
    assert np.array_equal(a.dW, b.dW) and np.array_equal(a.dW, c.dW)
    assert not np.array_equal(a.dW, simulate_paths(6, 3000, grid).dW)


def test_paths_are_prefix_stable():
    grid = TimeGrid(1.0, 10)
    small, large = simulate_paths(1, 100, grid), simulate_paths(1, 1000, grid)
    assert np.array_equal(small.dW, large.dW[:, :100])


def test_brownian_moments():
    b = simulate_paths(11, 100_000, TimeGrid(1.0, 20))
    WT = b.W[-1]
    assert abs(WT.mean()) <= 3 * np.sqrt(1.0 / 1e5)
    assert np.mean(WT ** 2) == pytest.approx(1.0, abs=0.02)
    assert np.all(b.W[0] == 0.0)


def test_antithetic_pairs():
    b = simulate_paths(2, 10, TimeGrid(1.0, 4), antithetic=True)
    np.testing.assert_array_equal(b.dW[:, 0], -b.dW[:, 1])


def test_counter_normals_shape_and_moments():
    z = counter_normals(0, np.arange(200_000), np.arange(1))
    assert z.shape == (1, 200_000)
    assert abs(z.mean()) < 0.01 and abs(z.std() - 1) < 0.01


def test_regression_reproduces_affine():
    x = np.random.default_rng(0).normal(size=20_000)
    np.testing.assert_allclose(regress_conditional(2 * x + 1, x), 2 * x + 1, atol=1e-10)


def test_regression_parabola_bias():
    x = np.random.default_rng(1).normal(size=100_000)
    basis = build_basis(x, 50)
    fit = regress_conditional(x ** 2, x, basis)
    idx = basis.index
    edges = np.concatenate([[x.min()], basis.edges, [x.max()]])
    width = np.diff(edges)[idx]
    err = np.abs(fit - x ** 2)
    inner = (idx > 0) & (idx < basis.K - 1)
    # a least-squares line through y^2 on a bin of width w misses by about w^2 / 6
    # when the density is flat across the bin; the skewed tail bins get w^2 / 2
    assert np.all(err[inner] <= width[inner] ** 2 / 4)
    assert np.all(err <= width ** 2 / 2)


def test_regression_of_independent_values():
    rng = np.random.default_rng(2)
    x, v = rng.normal(size=50_000), rng.normal(3.0, 1.0, size=50_000)
    fit = regress_conditional(v, x, build_basis(x, 1))
    assert abs(fit.mean() - 3.0) <= 3 / np.sqrt(5e4)


def test_basis_ties_share_bins():
    x = np.repeat(np.arange(5.0), 40)
    basis = build_basis(x, 20)
    for v in range(5):
        assert np.unique(basis.index[x == v]).size == 1
    assert default_bins(100_000) == 47


@settings(max_examples=30, deadline=None)
@given(st.integers(50, 3000), st.integers(1, 60), st.integers(0, 2 ** 32))
def test_bins_have_minimum_size(m, K, seed):
    x = np.random.default_rng(seed).normal(size=m)
    basis = build_basis(x, K)
    counts = np.bincount(basis.index, minlength=basis.K)
    assert basis.K == 1 or counts.min() >= 10
    fit = regress_conditional(3 * x - 2, x, basis)
    np.testing.assert_allclose(fit, 3 * x - 2, atol=1e-8)


def test_lsmc_martingale():
    ts = TerminalSpec(identity(), 1.0)
    b = simulate_paths(4, 20_000, TimeGrid(1.0, 20))
    s = lsmc_solve(GeneratorSpec.zero(), ts, None, b)
    assert abs(s.y0()) <= 3 * s.meta["y0_stderr"] + 1e-12
    err = np.abs(s.Y[10] - b.W[10])
    assert err.mean() < 0.01 and err.max() < 0.2
    assert np.max(np.abs(s.Z[:-1].mean(axis=1) - 1.0)) < 0.05


def test_lsmc_entropic():
    ts = TerminalSpec(identity(), 1.0)
    b = simulate_paths(8, 100_000, TimeGrid(1.0, 50))
    s = lsmc_solve(GeneratorSpec.from_terms(f_zsq(Constant(0.5))), ts, None, b)
    assert s.y0() == pytest.approx(0.5, abs=2e-2)
    assert s.clamp_fraction == 0.0


def test_lsmc_horizon_mismatch():
    with pytest.raises(ConfigError):
        lsmc_solve(GeneratorSpec.zero(), TerminalSpec(identity(), 2.0), None,
                   simulate_paths(0, 100, TimeGrid(1.0, 4)))


def test_surface_interpolation_and_csv(tmp_path):
    t = np.array([0.0, 1.0])
    x = np.array([-1.0, 0.0, 1.0])
    Y = np.array([x + 1, 2 * x])
    s = SolutionSurface("state_indexed", t, Y, np.zeros_like(Y), states=x)
    assert s.y0() == 1.0
    assert s.interpolate(0.5, 0.5) == pytest.approx(0.5 * 1.5 + 0.5 * 1.0)
    s.to_csv(tmp_path / "s.csv")
    lines = (tmp_path / "s.csv").read_text().splitlines()
    assert lines[0] == "t,x,Y,Z" and len(lines) == 7
    with pytest.raises(ConfigError):
        SolutionSurface("path_indexed", t, Y, Y)


def test_lsmc_zero_generator_matches_quadrature():
    from qbsde.closed_form import solve_zero_generator
    from qbsde.function_model import cosine

    ts = TerminalSpec(cosine(), 1.0)
    s = lsmc_solve(GeneratorSpec.zero(), ts, None, simulate_paths(21, 50_000, TimeGrid(1.0, 20)))
    exact = solve_zero_generator(ts, 0.0, 0.0)[0]
    assert abs(s.y0() - exact) <= 3 * s.meta["y0_stderr"]


def test_lsmc_comparison_with_shared_paths():
    ts = TerminalSpec(identity(), 1.0)
    bundle = simulate_paths(22, 50_000, TimeGrid(1.0, 20))
    lo = lsmc_solve(GeneratorSpec.from_terms(f_zsq(Constant(0.2))), ts, None, bundle)
    hi = lsmc_solve(GeneratorSpec.from_terms(f_zsq(Constant(0.5))), ts, None, bundle)
    se = np.hypot(lo.meta["y0_stderr"], hi.meta["y0_stderr"])
    assert lo.y0() <= hi.y0() + 3 * se
