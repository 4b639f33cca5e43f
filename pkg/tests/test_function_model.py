import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from qbsde.errors import ConfigError
from qbsde.function_model import (AbsArg, Constant, DeterministicProcessSpec, ExpAffine,
                                  IndicatorHalfline, LogGrowth, Max, Min, Polynomial, Scale,
                                  Sinusoid, Sum, Tabulated, check_flags, cosine, evaluate,
                                  from_dict, identity, increasing_majorant, integrate_abs,
                                  is_monotone, process_from)


def test_evaluate_constant():
    assert evaluate(Constant(0.5), 3.0) == 0.5


def test_evaluate_indicator():
    f = IndicatorHalfline(0.0, 0.0, 1.0)
    assert evaluate(f, -1.0) == 0.0
    assert evaluate(f, 2.0) == 1.0
    assert evaluate(f, 0.0) == 1.0


def test_log_growth_at_zero_uses_convention():
    assert evaluate(LogGrowth(1.0, 2.0, 3.0), 0.0) == 1.0


def test_log_growth_value():
    y = np.e
    assert LogGrowth(1.0, 2.0, 3.0)(y) == pytest.approx(1 + 2 * y + 3 * y)


def test_scalar_in_scalar_out_and_array_in_array_out():
    f = Sinusoid(2.0, 1.0, 0.0)
    assert isinstance(f(0.3), float)
    out = f(np.array([0.0, np.pi / 2]))
    np.testing.assert_allclose(out, [0.0, 2.0], atol=1e-15)


def test_cosine_helper():
    assert cosine()(0.0) == pytest.approx(1.0)


def test_integrate_abs_examples():
    assert integrate_abs(Constant(0.5), 2.0) == pytest.approx(2.0, abs=1e-10)
    assert integrate_abs(IndicatorHalfline(0.0, 0.0, 1.0), 3.0) == pytest.approx(3.0, abs=1e-10)
    assert integrate_abs(ExpAffine(1.0, 1.0), 1.0) == pytest.approx(np.e - 1 / np.e, abs=1e-10)


def test_integrate_abs_sign_change():
    # |sin| over [-pi, pi] is 4
    assert integrate_abs(Sinusoid(), np.pi) == pytest.approx(4.0, abs=1e-9)


def test_majorant_of_constant():
    phi = increasing_majorant(Constant(0.7), 2.0, 101)
    np.testing.assert_allclose(phi(np.linspace(0, 2, 50)), 0.7)


def test_majorant_of_shifted_sine():
    f = Sum((Sinusoid(), Constant(1.0)))
    phi = increasing_majorant(f, np.pi, 20001)
    ys = np.linspace(0, np.pi, 400)
    expected = np.where(ys <= np.pi / 2, np.sin(ys) + 1, 2.0)
    np.testing.assert_allclose(phi(ys), expected, atol=1e-6)


def test_majorant_of_step_down():
    phi = increasing_majorant(IndicatorHalfline(1.0, 1.0, 0.0), 2.0, 201)
    np.testing.assert_allclose(phi(np.linspace(0, 2, 77)), 1.0)


def test_combinators():
    x = np.linspace(-2, 2, 9)
    a, b = Polynomial((0.0, 1.0)), Constant(0.5)
    np.testing.assert_allclose(Max((a, b))(x), np.maximum(x, 0.5))
    np.testing.assert_allclose(Min((a, b))(x), np.minimum(x, 0.5))
    np.testing.assert_allclose(Scale(3.0, a)(x), 3 * x)
    np.testing.assert_allclose(AbsArg(a)(x), np.abs(x))
    np.testing.assert_allclose((a + b)(x), x + 0.5)
    np.testing.assert_allclose((-a)(x), -x)


def test_breakpoints_propagate():
    f = Sum((IndicatorHalfline(1.0, 0.0, 1.0), AbsArg(identity())))
    assert 1.0 in f.breakpoints()
    assert 0.0 in f.breakpoints()


def test_tabulated_extends_constant():
    t = Tabulated(np.array([0.0, 1.0]), np.array([1.0, 3.0]))
    assert t(-5.0) == 1.0
    assert t(5.0) == 3.0
    assert t(0.5) == 2.0


@pytest.mark.parametrize("spec", [
    Constant(0.25), identity(), Polynomial((1.0, 0.0, 2.0)), ExpAffine(2.0, -0.5),
    IndicatorHalfline(0.3, 0.0, Constant(1.0)), LogGrowth(1.0, 0.5, 0.25),
    Sinusoid(1.5, 2.0, 0.1), Max((identity(), Constant(0.0))),
    Scale(2.0, AbsArg(Sinusoid())), Tabulated(np.array([0.0, 1.0, 2.0]), np.array([0.0, 2.0, 1.0])),
])
def test_json_round_trip(spec):
    again = from_dict(json.loads(json.dumps(spec.to_dict())))
    x = np.linspace(-3, 3, 61)
    np.testing.assert_array_equal(again(x), spec(x))


def test_from_dict_errors():
    with pytest.raises(ConfigError):
        from_dict({"kind": "nope"})
    with pytest.raises(ConfigError):
        from_dict({"kind": "constant"})
    with pytest.raises(ConfigError):
        from_dict("constant")


def test_check_flags_detects_false_claims():
    ok = Constant(1.0, continuity_flag=True, monotone_flag="increasing")
    assert check_flags(ok, 3.0) == {"continuity": True, "monotone": True}
    bad = IndicatorHalfline(0.0, 1.0, 0.0, continuity_flag=True, monotone_flag="increasing")
    assert check_flags(bad, 3.0) == {"continuity": False, "monotone": False}
    assert check_flags(Constant(1.0), 3.0) == {"continuity": None, "monotone": None}


def test_is_monotone():
    assert is_monotone(ExpAffine(), -2, 2)
    assert not is_monotone(Sinusoid(), -2, 2)
    assert is_monotone(ExpAffine(1.0, -1.0), -2, 2, "decreasing")


def test_process_integral_and_values():
    p = DeterministicProcessSpec(np.array([0.0, 0.5]), np.array([1.0, 3.0]))
    assert p(0.25) == 1.0
    assert p(0.75) == 3.0
    assert p.integral(0.0, 1.0) == pytest.approx(0.5 + 1.5)
    assert p.integral(0.25, 0.75) == pytest.approx(0.25 + 0.75)
    assert not p.is_zero()
    assert process_from(0.0).is_zero()
    assert process_from(p.to_dict()).integral(0, 1) == pytest.approx(2.0)


def test_process_rejects_negative():
    with pytest.raises(ConfigError):
        DeterministicProcessSpec(np.array([0.0]), np.array([-1.0]))
    with pytest.raises(ConfigError):
        DeterministicProcessSpec(np.array([0.1]), np.array([1.0]))


@settings(max_examples=50, deadline=None)
@given(st.floats(-5, 5), st.floats(-5, 5), st.floats(-10, 10))
def test_majorant_dominates_and_increases(c0, c1, shift):
    f = Sum((Polynomial((c0, c1, -0.3)), Sinusoid(1.0, 3.0, shift)))
    phi = increasing_majorant(f, 4.0, 801)
    ys = np.linspace(0, 4, 801)
    assert np.all(phi(ys) >= f(ys) - 1e-12)
    assert np.all(np.diff(phi(ys)) >= 0)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(0, 5), min_size=1, max_size=5), st.floats(0, 3), st.floats(0, 3))
def test_process_integral_additive(vals, s, t):
    bp = np.arange(len(vals)) * 0.4
    p = DeterministicProcessSpec(bp, np.array(vals))
    m = 0.5 * (s + t)
    assert p.integral(s, t) == pytest.approx(p.integral(s, m) + p.integral(m, t), abs=1e-12)
    if s <= t:
        assert p.integral(s, t) >= -1e-15
