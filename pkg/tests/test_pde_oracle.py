import numpy as np
import pytest

from qbsde.errors import ConfigError, StabilityError
from qbsde.function_model import Constant, Polynomial, cosine, identity
from qbsde.pde_oracle import (PdeGrid, compare, convergence_study, solve_pde,
                              write_convergence_csv)
from qbsde.scenario import GeneratorSpec, f_zsq, theta_abs_z

ZERO = GeneratorSpec.zero()
ENTROPIC = GeneratorSpec.from_terms(f_zsq(Constant(0.5)))


def test_heat_equation_cos():
    grid = PdeGrid.build(ZERO, cosine(), 1.0, nx=401)
    assert solve_pde(ZERO, cosine(), grid).y0() == pytest.approx(np.exp(-0.5), abs=1e-3)


def test_entropic_identity():
    grid = PdeGrid.build(ENTROPIC, identity(), 1.0, nx=401)
    s = solve_pde(ENTROPIC, identity(), grid)
    assert s.y0() == pytest.approx(0.5, abs=1e-3)
    assert s.z0() == pytest.approx(1.0, abs=1e-3)


def test_theta_linear_shift():
    H = GeneratorSpec.from_terms(theta_abs_z(0.5))
    g = Polynomial((5.0, 1.0))
    assert solve_pde(H, g, PdeGrid.build(H, g, 1.0)).y0() == pytest.approx(5.5, abs=1e-2)


def test_stability_guard():
    with pytest.raises(StabilityError) as info:
        PdeGrid.build(ZERO, cosine(), 1.0, nx=401, nt=10)
    assert info.value.suggested_nt > 10
    grid = PdeGrid(1.0, 10.0, 401, 10)
    with pytest.raises(StabilityError):
        solve_pde(ZERO, cosine(), grid)


def test_step_count_avoids_one_third():
    nt = PdeGrid.min_steps(1.0, 0.1, 0.0)
    lam = (1.0 / nt) / 0.01
    assert abs(lam - 1 / 3) >= 0.02
    assert lam <= 0.9


def test_grid_validation():
    with pytest.raises(ConfigError):
        PdeGrid(1.0, 1.0, 3, 10)
    with pytest.raises(ConfigError):
        PdeGrid(1.0, 1.0, 11, 10, boundary="periodic")
    with pytest.raises(ConfigError):
        solve_pde(ZERO, cosine(), PdeGrid(1.0, 1.0, 11, 100, boundary="dirichlet_from_envelope"))


def test_compare_norms():
    grid = PdeGrid.build(ZERO, cosine(), 1.0, nx=201)
    a = solve_pde(ZERO, cosine(), grid, store_every=10)
    assert compare(a, a).error == 0.0
    assert compare(a, a, "sup_lattice").error == 0.0
    b = solve_pde(ZERO, cosine(), PdeGrid.build(ZERO, cosine(), 1.0, nx=401), store_every=20)
    # stay away from the artificial boundary
    rep = compare(a, b, "sup_lattice", tol=1e-3, lattice=(np.linspace(0, 1, 11), np.linspace(-3, 3, 31)))
    assert rep.interpolated and rep.passed
    with pytest.raises(ConfigError):
        compare(a, b, "l2")


def test_convergence_second_order(tmp_path):
    rows, ratios = convergence_study(cosine(), np.exp(-0.5), 1.0)
    assert len(rows) == 3
    for r in ratios:
        assert 3.2 <= r <= 4.8
    write_convergence_csv(tmp_path / "c.csv", rows)
    assert (tmp_path / "c.csv").read_text().startswith("nx,nt,error\n")


def test_quadratic_terminal_zero_generator():
    g = Polynomial((0.0, 0.0, 1.0))
    s = solve_pde(ZERO, g, PdeGrid.build(ZERO, g, 1.0, nx=401))
    assert s.y0() == pytest.approx(1.0, abs=1e-3)
    assert s.z0() == pytest.approx(0.0, abs=1e-3)


def test_envelope_box_activity_is_reported():
    from qbsde.closed_form import envelope_bounds
    from qbsde.scenario import TerminalSpec

    ts = TerminalSpec(identity(), 1.0)
    b = envelope_bounds(Constant(0.5), 0.0, 0.0, ts, np.linspace(0, 1, 21), np.linspace(-11, 11, 441))
    grid = PdeGrid.build(ENTROPIC, identity(), 1.0, X=10.0, boundary="dirichlet_from_envelope", C=0.5)
    s = solve_pde(ENTROPIC, identity(), grid, bounds=b)
    assert 0.0 <= s.meta["box_active_fraction"] <= 1.0
    assert s.y0() == pytest.approx(0.5, abs=1e-3)
