"""Scalar functions and deterministic time coefficients.

Every quantity the solvers are parameterised by is one of two things: a real
function of the state (the quadratic coefficient ``f``, its majorant, the
terminal map ``g``, growth functions) or a non-negative, piecewise-constant
function of time (``alpha``, ``beta``, ``theta``).  Both are immutable.

Function specs form a small expression tree; each node knows how to evaluate
itself on numpy arrays, where its kinks/jumps are, and how to serialise to the
tagged-record form used in experiment configs, e.g. ``{"kind": "constant", "c": 0.5}``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import ConfigError, DomainError, PreconditionError
from .quadrature import adaptive_simpson

MONOTONE_FLAGS = ("increasing", "decreasing", "none")


def _as_float(y, out):
    return float(out) if np.ndim(y) == 0 else out


@dataclass(frozen=True)
class FunctionSpec:
    """Base class of the function expression tree.

    ``continuity_flag`` / ``monotone_flag`` are optional claims made by the
    caller; :func:`check_flags` verifies them by sampling.
    """

    continuity_flag: bool | None = field(default=None, kw_only=True)
    monotone_flag: str | None = field(default=None, kw_only=True)

    def __post_init__(self):
        if self.monotone_flag is not None and self.monotone_flag not in MONOTONE_FLAGS:
            raise ConfigError(f"monotone_flag must be one of {MONOTONE_FLAGS}")

    def __call__(self, y):
        arr = np.asarray(y, dtype=float)
        return _as_float(y, self._eval(arr))

    def _eval(self, y: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def breakpoints(self) -> tuple[float, ...]:
        """Locations of jumps or kinks (sorted, unique)."""
        return ()

    def to_dict(self) -> dict:
        raise NotImplementedError

    def __add__(self, other):
        if isinstance(other, (int, float)):
            other = Constant(float(other))
        return Sum((self, other))

    __radd__ = __add__

    def __mul__(self, k):
        return Scale(float(k), self)

    __rmul__ = __mul__

    def __neg__(self):
        return Scale(-1.0, self)


ScalarFunctionSpec = FunctionSpec


@dataclass(frozen=True)
class Constant(FunctionSpec):
    c: float

    def _eval(self, y):
        return np.full_like(y, self.c, dtype=float)

    def to_dict(self):
        return {"kind": "constant", "c": self.c}


@dataclass(frozen=True)
class Polynomial(FunctionSpec):
    """``sum_k coeffs[k] * y**k`` (ascending powers)."""

    coeffs: tuple[float, ...]

    def _eval(self, y):
        return np.polynomial.polynomial.polyval(y, np.asarray(self.coeffs, dtype=float))

    def to_dict(self):
        return {"kind": "polynomial", "coeffs": list(self.coeffs)}


def identity() -> Polynomial:
    return Polynomial((0.0, 1.0), continuity_flag=True, monotone_flag="increasing")


@dataclass(frozen=True)
class ExpAffine(FunctionSpec):
    """``a * exp(b * y)``."""

    a: float = 1.0
    b: float = 1.0

    def _eval(self, y):
        with np.errstate(over="ignore"):
            return self.a * np.exp(self.b * y)

    def to_dict(self):
        return {"kind": "exp_affine", "a": self.a, "b": self.b}


@dataclass(frozen=True)
class IndicatorHalfline(FunctionSpec):
    """``left(y)`` for ``y < threshold`` and ``right(y)`` for ``y >= threshold``."""

    threshold: float
    left: FunctionSpec
    right: FunctionSpec

    def __init__(self, threshold, left, right, **flags):
        object.__setattr__(self, "threshold", float(threshold))
        object.__setattr__(self, "left", _coerce(left))
        object.__setattr__(self, "right", _coerce(right))
        object.__setattr__(self, "continuity_flag", flags.get("continuity_flag"))
        object.__setattr__(self, "monotone_flag", flags.get("monotone_flag"))
        self.__post_init__()

    def _eval(self, y):
        return np.where(y >= self.threshold, self.right._eval(y), self.left._eval(y))

    def breakpoints(self):
        return _merge((self.threshold,), self.left.breakpoints(), self.right.breakpoints())

    def to_dict(self):
        return {"kind": "indicator_halfline", "threshold": self.threshold,
                "left": self.left.to_dict(), "right": self.right.to_dict()}


@dataclass(frozen=True)
class LogGrowth(FunctionSpec):
    """``a + b|y| + c|y||ln|y||`` with ``0 * |ln 0| = 0``."""

    a: float
    b: float
    c: float

    def _eval(self, y):
        ay = np.abs(y)
        with np.errstate(divide="ignore", invalid="ignore"):
            ylog = np.where(ay > 0.0, ay * np.abs(np.log(np.where(ay > 0.0, ay, 1.0))), 0.0)
        return self.a + self.b * ay + self.c * ylog

    def breakpoints(self):
        return (-1.0, 0.0, 1.0)

    def to_dict(self):
        return {"kind": "log_growth", "a": self.a, "b": self.b, "c": self.c}


@dataclass(frozen=True)
class Sinusoid(FunctionSpec):
    """``amplitude * sin(frequency * y + phase)``; ``cos`` is phase pi/2."""

    amplitude: float = 1.0
    frequency: float = 1.0
    phase: float = 0.0

    def _eval(self, y):
        return self.amplitude * np.sin(self.frequency * y + self.phase)

    def to_dict(self):
        return {"kind": "sinusoid", "amplitude": self.amplitude,
                "frequency": self.frequency, "phase": self.phase}


def cosine() -> Sinusoid:
    return Sinusoid(1.0, 1.0, np.pi / 2)


@dataclass(frozen=True)
class _Combination(FunctionSpec):
    terms: tuple[FunctionSpec, ...]

    def __init__(self, terms, **flags):
        terms = tuple(_coerce(t) for t in terms)
        if not terms:
            raise ConfigError(f"{type(self).__name__} needs at least one term")
        object.__setattr__(self, "terms", terms)
        object.__setattr__(self, "continuity_flag", flags.get("continuity_flag"))
        object.__setattr__(self, "monotone_flag", flags.get("monotone_flag"))
        self.__post_init__()

    def breakpoints(self):
        return _merge(*(t.breakpoints() for t in self.terms))

    def to_dict(self):
        return {"kind": self._kind, "terms": [t.to_dict() for t in self.terms]}


class Sum(_Combination):
    _kind = "sum"

    def _eval(self, y):
        out = np.zeros_like(y, dtype=float)
        for t in self.terms:
            out = out + t._eval(y)
        return out


class Max(_Combination):
    _kind = "max"

    def _eval(self, y):
        return np.maximum.reduce([t._eval(y) for t in self.terms])


class Min(_Combination):
    _kind = "min"

    def _eval(self, y):
        return np.minimum.reduce([t._eval(y) for t in self.terms])


@dataclass(frozen=True)
class Scale(FunctionSpec):
    factor: float
    of: FunctionSpec

    def _eval(self, y):
        return self.factor * self.of._eval(y)

    def breakpoints(self):
        return self.of.breakpoints()

    def to_dict(self):
        return {"kind": "scale", "factor": self.factor, "of": self.of.to_dict()}


@dataclass(frozen=True)
class AbsArg(FunctionSpec):
    """``of(|y|)``."""

    of: FunctionSpec

    def _eval(self, y):
        return self.of._eval(np.abs(y))

    def breakpoints(self):
        inner = [b for b in self.of.breakpoints() if b >= 0.0]
        return _merge((0.0,), inner, [-b for b in inner])

    def to_dict(self):
        return {"kind": "abs_arg", "of": self.of.to_dict()}


@dataclass(frozen=True, eq=False)
class Tabulated(FunctionSpec):
    """Piecewise-linear interpolant through ``(x, y)``; constant beyond the ends."""

    x: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        super().__post_init__()
        x = np.asarray(self.x, dtype=float)
        y = np.asarray(self.y, dtype=float)
        if x.ndim != 1 or x.shape != y.shape or x.size < 2 or np.any(np.diff(x) <= 0):
            raise ConfigError("tabulated function needs >= 2 strictly increasing nodes")
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "y", y)

    def _eval(self, y):
        return np.interp(y, self.x, self.y)

    def breakpoints(self):
        # only nodes where the slope actually changes
        slopes = np.diff(self.y) / np.diff(self.x)
        kinks = self.x[1:-1][~np.isclose(slopes[1:], slopes[:-1], rtol=1e-12, atol=1e-14)]
        ends = [self.x[0], self.x[-1]]
        return _merge(kinks, ends)

    def to_dict(self):
        return {"kind": "tabulated", "x": self.x.tolist(), "y": self.y.tolist()}


def _merge(*groups) -> tuple[float, ...]:
    vals = [float(v) for g in groups for v in g]
    return tuple(sorted(set(vals)))


def _coerce(obj) -> FunctionSpec:
    if isinstance(obj, FunctionSpec):
        return obj
    if isinstance(obj, (int, float)):
        return Constant(float(obj))
    if isinstance(obj, dict):
        return from_dict(obj)
    raise ConfigError(f"cannot interpret {obj!r} as a function spec")


def from_dict(d: dict) -> FunctionSpec:
    """Build a spec from its tagged-record form."""
    if isinstance(d, (int, float)):
        return Constant(float(d))
    if not isinstance(d, dict) or "kind" not in d:
        raise ConfigError(f"function spec must be a number or a record with 'kind': {d!r}")
    flags = {k: d[k] for k in ("continuity_flag", "monotone_flag") if k in d}
    kind = d["kind"]
    try:
        if kind == "constant":
            return Constant(float(d["c"]), **flags)
        if kind == "identity":
            return Polynomial((0.0, 1.0), **flags)
        if kind == "polynomial":
            return Polynomial(tuple(float(c) for c in d["coeffs"]), **flags)
        if kind == "exp_affine":
            return ExpAffine(float(d.get("a", 1.0)), float(d.get("b", 1.0)), **flags)
        if kind == "indicator_halfline":
            return IndicatorHalfline(d["threshold"], d["left"], d["right"], **flags)
        if kind == "log_growth":
            return LogGrowth(float(d["a"]), float(d["b"]), float(d["c"]), **flags)
        if kind == "sinusoid":
            return Sinusoid(float(d.get("amplitude", 1.0)), float(d.get("frequency", 1.0)),
                            float(d.get("phase", 0.0)), **flags)
        if kind == "cos":
            return Sinusoid(1.0, 1.0, np.pi / 2, **flags)
        if kind in ("sum", "max", "min"):
            cls = {"sum": Sum, "max": Max, "min": Min}[kind]
            return cls(d["terms"], **flags)
        if kind == "scale":
            return Scale(float(d["factor"]), _coerce(d["of"]), **flags)
        if kind == "abs_arg":
            return AbsArg(_coerce(d["of"]), **flags)
        if kind == "tabulated":
            return Tabulated(np.asarray(d["x"]), np.asarray(d["y"]), **flags)
    except KeyError as exc:
        raise ConfigError(f"function spec of kind {kind!r} is missing field {exc}") from None
    raise ConfigError(f"unknown function kind {kind!r}")


def evaluate(spec: FunctionSpec, y):
    """Evaluate ``spec`` at ``y`` (scalar or array)."""
    return spec(y)


def integrate_abs(spec: FunctionSpec, R: float) -> float:
    """``int_{-R}^{R} |f(r)| dr`` by adaptive Simpson split at the breakpoints."""
    if R <= 0:
        raise PreconditionError("R must be positive")
    return adaptive_simpson(lambda r: abs(spec(r)), -R, R, rtol=1e-11,
                            breakpoints=spec.breakpoints())


def increasing_majorant(spec: FunctionSpec, R: float, n: int) -> Tabulated:
    """Running maximum ``phi(y) = sup_{0 <= x <= y} f(x)`` tabulated on ``[0, R]``."""
    if n < 2:
        raise PreconditionError("need at least 2 grid points")
    xs = np.linspace(0.0, R, n)
    # keep breakpoints as nodes so steps are resolved exactly
    extra = [b for b in spec.breakpoints() if 0.0 < b < R]
    if extra:
        xs = np.unique(np.concatenate([xs, extra]))
    vals = np.asarray(spec(xs), dtype=float)
    if not np.all(np.isfinite(vals)):
        raise DomainError("function is not finite on [0, R]")
    return Tabulated(xs, np.maximum.accumulate(vals), continuity_flag=True,
                     monotone_flag="increasing")


def is_monotone(spec: FunctionSpec, lo: float, hi: float, direction: str = "increasing",
                n: int = 10_000) -> bool:
    xs = np.linspace(lo, hi, n)
    d = np.diff(np.asarray(spec(xs), dtype=float))
    scale = 1e-12 * max(1.0, float(np.max(np.abs(spec(xs)))))
    if direction == "increasing":
        return bool(np.all(d >= -scale))
    return bool(np.all(d <= scale))


def _largest_jump(spec: FunctionSpec, lo: float, hi: float, n: int, candidates: int = 20) -> float:
    xs = np.linspace(lo, hi, n)
    v = np.asarray(spec(xs), dtype=float)
    d = np.abs(np.diff(v))
    worst = 0.0
    for i in np.argsort(d)[::-1][:candidates]:
        a, b = xs[i], xs[i + 1]
        fa, fb = float(spec(a)), float(spec(b))
        for _ in range(60):
            m = 0.5 * (a + b)
            fm = float(spec(m))
            if abs(fm - fa) >= abs(fb - fm):
                b, fb = m, fm
            else:
                a, fa = m, fm
        worst = max(worst, abs(fb - fa))
    return worst


def check_flags(spec: FunctionSpec, R: float, n: int = 10_000) -> dict:
    """Verify the claimed flags of ``spec`` on a 10^4-point grid of ``[-R, R]``.

    Returns ``{"continuity": bool | None, "monotone": bool | None}`` where None
    means no claim was made.
    """
    out = {"continuity": None, "monotone": None}
    if spec.continuity_flag is not None:
        jump = _largest_jump(spec, -R, R, n)
        scale = max(1.0, float(np.max(np.abs(spec(np.linspace(-R, R, 101))))))
        continuous = jump <= 1e-6 * scale
        out["continuity"] = continuous == bool(spec.continuity_flag)
    if spec.monotone_flag in ("increasing", "decreasing"):
        out["monotone"] = is_monotone(spec, -R, R, spec.monotone_flag, n)
    return out


@dataclass(frozen=True, eq=False)
class DeterministicProcessSpec:
    """Non-negative piecewise-constant function of time.

    ``values[k]`` holds on ``[breakpoints[k], breakpoints[k+1])``; the last
    value extends to +inf.
    """

    breakpoints: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        bp = np.asarray(self.breakpoints, dtype=float)
        vals = np.asarray(self.values, dtype=float)
        if bp.ndim != 1 or bp.shape != vals.shape or bp.size == 0:
            raise ConfigError("breakpoints and values must be 1-d of equal length")
        if bp[0] != 0.0 or np.any(np.diff(bp) <= 0):
            raise ConfigError("breakpoints must start at 0 and increase strictly")
        if np.any(vals < 0) or not np.all(np.isfinite(vals)):
            raise ConfigError("process values must be finite and non-negative")
        cum = np.concatenate([[0.0], np.cumsum(vals[:-1] * np.diff(bp))])
        object.__setattr__(self, "breakpoints", bp)
        object.__setattr__(self, "values", vals)
        object.__setattr__(self, "_cum", cum)

    @classmethod
    def constant(cls, v: float) -> "DeterministicProcessSpec":
        return cls(np.array([0.0]), np.array([float(v)]))

    def is_zero(self) -> bool:
        return bool(np.all(self.values == 0.0))

    def __call__(self, t):
        t_arr = np.asarray(t, dtype=float)
        idx = np.clip(np.searchsorted(self.breakpoints, t_arr, side="right") - 1, 0, None)
        return _as_float(t, self.values[idx])

    def antiderivative(self, t):
        """``int_0^t`` of the process."""
        t_arr = np.asarray(t, dtype=float)
        idx = np.clip(np.searchsorted(self.breakpoints, t_arr, side="right") - 1, 0, None)
        out = self._cum[idx] + self.values[idx] * (t_arr - self.breakpoints[idx])
        return _as_float(t, out)

    def integral(self, s, t):
        """``int_s^t`` of the process (sum of rectangle areas)."""
        return self.antiderivative(t) - self.antiderivative(s)

    def scaled(self, k: float) -> "DeterministicProcessSpec":
        if k < 0:
            raise ConfigError("processes are non-negative; scale factor must be >= 0")
        return DeterministicProcessSpec(self.breakpoints, self.values * k)

    def to_dict(self):
        if self.values.size == 1:
            return float(self.values[0])
        return {"breakpoints": self.breakpoints.tolist(), "values": self.values.tolist()}


def process_from(obj) -> DeterministicProcessSpec:
    """Accept a number, a ``{"breakpoints": [...], "values": [...]}`` record, or a spec."""
    if isinstance(obj, DeterministicProcessSpec):
        return obj
    if obj is None:
        return DeterministicProcessSpec.constant(0.0)
    if isinstance(obj, (int, float)):
        return DeterministicProcessSpec.constant(float(obj))
    if isinstance(obj, dict):
        try:
            return DeterministicProcessSpec(np.asarray(obj["breakpoints"]), np.asarray(obj["values"]))
        except KeyError as exc:
            raise ConfigError(f"process record is missing {exc}") from None
    if isinstance(obj, Sequence):
        raise ConfigError("processes are given as a number or a breakpoints/values record")
    raise ConfigError(f"cannot interpret {obj!r} as a deterministic process")
