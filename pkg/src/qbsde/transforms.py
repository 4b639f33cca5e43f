"""Zvonkin-type transforms that remove an ``f(y)|z|^2`` drift.

For a locally integrable ``f`` write ``F(x) = int_0^x f``.  Three functions are
tabulated on a grid of ``[-R, R]``:

* ``u(y) = int_0^y exp(2F)``, solving ``u''/2 - f u' = 0``,
* ``v(x) = int_0^x K exp(2F)`` with ``K(y) = int_0^y exp(-2F)``, solving
  ``v''/2 - f v' = 1/2``,
* ``w(x) = int_0^x G exp(2F)`` with ``G(y) = int_0^y f exp(-2F)``, solving
  ``w''/2 - f w' = f/2``.

Grid nodes always include 0 and every breakpoint of ``f`` inside the range, so
inside each panel ``f`` is smooth and fixed-order Gauss-Legendre is accurate
to round-off.  Nested rules give ``F``, ``K`` and ``G`` at arbitrary interior
points, which makes ``u'``, ``v'`` and ``w'`` available exactly (not just at
nodes).  Values of ``u`` between nodes use the cubic Hermite interpolant with
the exact node slopes.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .errors import DomainError, PreconditionError, RangeError
from .function_model import FunctionSpec, integrate_abs
from .quadrature import gauss_legendre

_ORDER = 8
_EXP_LIMIT = 350.0


def _gl_points(a, b, m=_ORDER):
    nodes, weights = gauss_legendre(m)
    half = 0.5 * (b - a)
    mid = 0.5 * (b + a)
    return mid[..., None] + half[..., None] * nodes, half[..., None] * weights


def _cumulate(panel_vals: np.ndarray, i0: int) -> np.ndarray:
    """Node values of an antiderivative vanishing at node ``i0``."""
    out = np.zeros(panel_vals.size + 1)
    out[i0 + 1:] = np.cumsum(panel_vals[i0:])
    if i0 > 0:
        out[:i0] = -np.cumsum(panel_vals[:i0][::-1])[::-1]
    return out


def transform_grid(f: FunctionSpec, R: float, n: int) -> np.ndarray:
    xs = np.linspace(-R, R, n)
    extra = [0.0] + [b for b in f.breakpoints() if -R < b < R]
    xs = np.unique(np.concatenate([xs, extra]))
    # drop slivers created by a breakpoint landing next to a uniform node
    keep = np.concatenate([[True], np.diff(xs) > 1e-9 * max(1.0, R)])
    forced = np.isin(xs, extra)
    xs = xs[keep | forced]
    return np.unique(xs)


class _Calculus:
    """Panel-wise antiderivatives of ``f`` and the integrands built on it."""

    def __init__(self, f: FunctionSpec, nodes: np.ndarray):
        self.f = f
        self.nodes = nodes
        self.P = nodes.size - 1
        self.i0 = int(np.searchsorted(nodes, 0.0))
        if nodes[self.i0] != 0.0:
            raise PreconditionError("grid must contain 0")
        k = np.arange(self.P)
        self.F = _cumulate(self._from_start(lambda r, kk: self._f(r), k, nodes[1:]), self.i0)
        if np.max(np.abs(self.F)) > _EXP_LIMIT:
            raise DomainError(
                f"|int_0^x f| reaches {np.max(np.abs(self.F)):.3g}; exp(2F) overflows on this range")
        self._K = None
        self._G = None

    def _f(self, r):
        with np.errstate(all="ignore"):
            v = np.asarray(self.f(r), dtype=float)
        if not np.all(np.isfinite(v)):
            raise DomainError("f is not finite on the transform range")
        return v

    def panel_of(self, x):
        return np.clip(np.searchsorted(self.nodes, x, side="right") - 1, 0, self.P - 1)

    def _from_start(self, g, k, x):
        """``int_{nodes[k]}^{x} g(r, k) dr`` elementwise."""
        k = np.asarray(k)
        x = np.asarray(x, dtype=float)
        k, x = np.broadcast_arrays(k, x)
        r, w = _gl_points(self.nodes[k], x)
        return np.sum(g(r, k[..., None]) * w, axis=-1)

    # values at arbitrary points, given their panel index
    def F_at(self, x, k):
        return self.F[k] + self._from_start(lambda r, kk: self._f(r), k, x)

    def K_at(self, x, k):
        return self.K[k] + self._from_start(lambda r, kk: np.exp(-2.0 * self.F_at(r, kk)), k, x)

    def G_at(self, x, k):
        return self.G[k] + self._from_start(
            lambda r, kk: self._f(r) * np.exp(-2.0 * self.F_at(r, kk)), k, x)

    @property
    def K(self):
        if self._K is None:
            k = np.arange(self.P)
            self._K = _cumulate(self._from_start(
                lambda r, kk: np.exp(-2.0 * self.F_at(r, kk)), k, self.nodes[1:]), self.i0)
        return self._K

    @property
    def G(self):
        if self._G is None:
            k = np.arange(self.P)
            self._G = _cumulate(self._from_start(
                lambda r, kk: self._f(r) * np.exp(-2.0 * self.F_at(r, kk)), k, self.nodes[1:]), self.i0)
        return self._G

    def integrate_nodes(self, g):
        """Node values of ``int_0^x g(r, k) dr``."""
        k = np.arange(self.P)
        return _cumulate(self._from_start(g, k, self.nodes[1:]), self.i0)


def _hermite(nodes, vals, slopes, k, x):
    h = nodes[k + 1] - nodes[k]
    t = (x - nodes[k]) / h
    y0, y1 = vals[k], vals[k + 1]
    m0, m1 = slopes[k] * h, slopes[k + 1] * h
    t2 = t * t
    t3 = t2 * t
    p = (2 * t3 - 3 * t2 + 1) * y0 + (t3 - 2 * t2 + t) * m0 + (-2 * t3 + 3 * t2) * y1 + (t3 - t2) * m1
    dp = ((6 * t2 - 6 * t) * (y0 - y1) + (3 * t2 - 4 * t + 1) * m0 + (3 * t2 - 2 * t) * m1) / h
    return p, dp


def _check_range(x, lo, hi, what):
    x = np.asarray(x, dtype=float)
    tol = 1e-12 * max(1.0, abs(lo), abs(hi))
    if np.any(~np.isfinite(x)) or np.any(x < lo - tol) or np.any(x > hi + tol):
        bad = x[(x < lo - tol) | (x > hi + tol) | ~np.isfinite(x)]
        raise RangeError(f"{what} query {bad.flat[0]:.6g} outside [{lo:.6g}, {hi:.6g}]",
                         valid_interval=(lo, hi))
    return np.clip(x, lo, hi)


class _Tabulated:
    nodes: np.ndarray

    @property
    def R(self) -> float:
        return float(self.nodes[-1])

    def _values(self, x, vals, slopes):
        scalar = np.ndim(x) == 0
        x = _check_range(x, self.nodes[0], self.nodes[-1], "transform")
        k = self._calc.panel_of(x)
        p, _ = _hermite(self.nodes, vals, slopes, k, x)
        return float(p) if scalar else p


@dataclass(frozen=True, eq=False)
class ZvonkinTransform(_Tabulated):
    """Tabulated ``u_f`` on ``[-R, R]`` with derivative, inverse and lower limit ``c``."""

    f: FunctionSpec
    nodes: np.ndarray
    u_values: np.ndarray
    u_prime_values: np.ndarray
    lower_limit_c: float
    _calc: _Calculus = field(repr=False)

    @property
    def valid_interval(self) -> tuple[float, float]:
        return float(self.u_values[0]), float(self.u_values[-1])

    def u(self, x):
        return self._values(x, self.u_values, self.u_prime_values)

    def u_prime(self, x):
        scalar = np.ndim(x) == 0
        x = _check_range(x, self.nodes[0], self.nodes[-1], "transform")
        k = self._calc.panel_of(x)
        out = np.exp(2.0 * self._calc.F_at(x, k))
        return float(out) if scalar else out

    def inverse(self, y):
        scalar = np.ndim(y) == 0
        lo_v, hi_v = self.valid_interval
        try:
            y = _check_range(y, lo_v, hi_v, "inverse transform")
        except RangeError as exc:
            raise RangeError(str(exc), valid_interval=exc.valid_interval,
                             suggested_radius=2.0 * self.R) from None
        nodes, vals, slopes = self.nodes, self.u_values, self.u_prime_values
        k = np.clip(np.searchsorted(vals, y, side="right") - 1, 0, nodes.size - 2)
        lo = nodes[k].copy()
        hi = nodes[k + 1].copy()
        frac = (y - vals[k]) / (vals[k + 1] - vals[k])
        x = lo + frac * (hi - lo)
        scale = np.maximum(1.0, np.abs(y))
        for _ in range(200):
            p, dp = _hermite(nodes, vals, slopes, k, x)
            r = p - y
            done = (np.abs(r) <= 1e-13 * scale) | (hi - lo <= 1e-15 * np.maximum(1.0, np.abs(x)))
            if np.all(done):
                break
            hi = np.where(r > 0, x, hi)
            lo = np.where(r < 0, x, lo)
            with np.errstate(divide="ignore", invalid="ignore"):
                step = x - r / dp
            ok = (dp > 0) & (step > lo) & (step < hi)
            x = np.where(done, x, np.where(ok, step, 0.5 * (lo + hi)))
        return float(x) if scalar else x

    def ubar(self, x):
        """``u - c`` (positive when the lower limit is finite)."""
        if not np.isfinite(self.lower_limit_c):
            raise PreconditionError("u_f(R) = R: there is no finite lower limit c")
        return self.u(x) - self.lower_limit_c

    def to_csv(self, path) -> None:
        _write_columns(path, ("x", "u", "du"), (self.nodes, self.u_values, self.u_prime_values))


@dataclass(frozen=True, eq=False)
class AuxiliaryV(_Tabulated):
    f: FunctionSpec
    nodes: np.ndarray
    v_values: np.ndarray
    v_prime_values: np.ndarray
    K_values: np.ndarray
    _calc: _Calculus = field(repr=False)

    def v(self, x):
        return self._values(x, self.v_values, self.v_prime_values)

    def v_prime(self, x):
        x = _check_range(x, self.nodes[0], self.nodes[-1], "transform")
        k = self._calc.panel_of(x)
        return self._calc.K_at(x, k) * np.exp(2.0 * self._calc.F_at(x, k))


@dataclass(frozen=True, eq=False)
class AuxiliaryW(_Tabulated):
    f: FunctionSpec
    nodes: np.ndarray
    w_values: np.ndarray
    w_prime_values: np.ndarray
    G_values: np.ndarray
    _calc: _Calculus = field(repr=False)

    def w(self, x):
        return self._values(x, self.w_values, self.w_prime_values)

    def w_prime(self, x):
        x = _check_range(x, self.nodes[0], self.nodes[-1], "transform")
        k = self._calc.panel_of(x)
        return self._calc.G_at(x, k) * np.exp(2.0 * self._calc.F_at(x, k))


def _write_columns(path, header, cols) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(header)
        for row in zip(*cols):
            wr.writerow([repr(float(v)) for v in row])


def _validate(R, n):
    if not R > 0:
        raise PreconditionError("R must be positive")
    if n < 16:
        raise PreconditionError("n must be at least 16")


def _u_at_left(f: FunctionSpec, L: float, n: int) -> float:
    """``u(-L)`` by direct panel quadrature on ``[-L, 0]``."""
    xs = np.linspace(-L, 0.0, n)
    extra = [b for b in f.breakpoints() if -L < b < 0.0]
    calc = _Calculus(f, np.unique(np.concatenate([xs, extra])))
    return float(calc.integrate_nodes(lambda r, k: np.exp(2.0 * calc.F_at(r, k)))[0])


def detect_lower_limit(f: FunctionSpec, R: float, n: int = 2048, max_doublings: int = 10) -> float:
    """``lim_{y -> -inf} u_f(y)`` when it looks finite, else ``-inf``.

    Only attempted for ``f >= 0`` (sampled on ``[-4R, R]``).  The values
    ``u(-R), u(-2R), u(-4R)`` are compared: if the successive differences
    shrink by a factor of at least 4 the limit is declared finite, the
    doubling is continued until the increments stall, and the remaining
    geometric tail is added.
    """
    probe = np.asarray(f(np.linspace(-4.0 * R, R, 10_000)), dtype=float)
    if not np.all(np.isfinite(probe)) or np.any(probe < 0.0):
        return -np.inf
    try:
        vals = [_u_at_left(f, R * 2 ** j, n) for j in range(3)]
        d1, d2 = vals[0] - vals[1], vals[1] - vals[2]
        if d1 <= 0.0 or d2 > d1 / 4.0:
            return -np.inf
        prev, last = d1, d2
        for j in range(3, 3 + max_doublings):
            if last <= 1e-14 * max(1.0, abs(vals[-1])):
                break
            vals.append(_u_at_left(f, R * 2 ** j, n))
            prev, last = last, vals[-2] - vals[-1]
    except DomainError:
        return -np.inf
    ratio = last / prev if prev > 0 else 0.0
    tail = last * ratio / (1.0 - ratio) if 0.0 <= ratio < 1.0 else 0.0
    return float(vals[-1] - tail)


def build_u(f: FunctionSpec, R: float, n: int = 2048, detect_c: bool = True) -> ZvonkinTransform:
    """Tabulate ``u_f`` on ``[-R, R]`` with about ``n`` nodes."""
    _validate(R, n)
    calc = _Calculus(f, transform_grid(f, R, n))
    u = calc.integrate_nodes(lambda r, k: np.exp(2.0 * calc.F_at(r, k)))
    du = np.exp(2.0 * calc.F)
    if not (np.all(np.isfinite(u)) and np.all(np.diff(u) > 0)):
        raise DomainError("tabulated u is not strictly increasing; f too large for this range")
    c = detect_lower_limit(f, R, n) if detect_c else -np.inf
    return ZvonkinTransform(f, calc.nodes, u, du, c, calc)


def build_v(f: FunctionSpec, R: float, n: int = 2048) -> AuxiliaryV:
    _validate(R, n)
    calc = _Calculus(f, transform_grid(f, R, n))
    v = calc.integrate_nodes(lambda r, k: calc.K_at(r, k) * np.exp(2.0 * calc.F_at(r, k)))
    dv = calc.K * np.exp(2.0 * calc.F)
    return AuxiliaryV(f, calc.nodes, v, dv, calc.K, calc)


def build_w(f: FunctionSpec, R: float, n: int = 2048) -> AuxiliaryW:
    _validate(R, n)
    calc = _Calculus(f, transform_grid(f, R, n))
    w = calc.integrate_nodes(lambda r, k: calc.G_at(r, k) * np.exp(2.0 * calc.F_at(r, k)))
    dw = calc.G * np.exp(2.0 * calc.F)
    return AuxiliaryW(f, calc.nodes, w, dw, calc.G, calc)


def eval_u(t: ZvonkinTransform, x):
    return t.u(x)


def eval_u_prime(t: ZvonkinTransform, x):
    return t.u_prime(x)


def eval_u_inverse(t: ZvonkinTransform, y):
    return t.inverse(y)


def _residual_points(t, delta):
    nodes = t.nodes
    interior = nodes[1:-1]
    interior = interior[(interior - delta > nodes[0]) & (interior + delta < nodes[-1])]
    bps = np.asarray(t.f.breakpoints(), dtype=float)
    if bps.size:
        h = float(np.max(np.diff(nodes)))
        dist = np.min(np.abs(interior[:, None] - bps[None, :]), axis=1)
        interior = interior[dist > max(h, 4.0 * delta)]
    return interior


def ode_residual(t, f: FunctionSpec | None = None, delta: float = 1e-5) -> float:
    """Max relative residual of the transform's ODE at interior nodes.

    ``u''`` is the centered difference (step ``delta``) of the exact
    derivative; each residual is scaled by ``max(1, |u'|)`` because ``u'`` can
    span many orders of magnitude.  Nodes within one grid spacing of a
    breakpoint of ``f`` are skipped.
    """
    f = t.f if f is None else f
    x = _residual_points(t, delta)
    if x.size == 0:
        return 0.0
    if isinstance(t, ZvonkinTransform):
        d1, rhs = t.u_prime, lambda x: 0.0
    elif isinstance(t, AuxiliaryV):
        d1, rhs = t.v_prime, lambda x: 0.5
    elif isinstance(t, AuxiliaryW):
        d1, rhs = t.w_prime, lambda x: 0.5 * np.asarray(f(x))
    else:
        raise TypeError("expected a tabulated transform")
    dp = d1(x)
    second = (d1(x + delta) - d1(x - delta)) / (2.0 * delta)
    res = np.abs(0.5 * second - np.asarray(f(x)) * dp - rhs(x))
    return float(np.max(res / np.maximum(1.0, np.abs(dp))))


def lipschitz_bounds(t: ZvonkinTransform) -> tuple[float, float]:
    """``(exp(-2||f||_1), exp(2||f||_1))`` with the L1 norm over ``[-R, R]``."""
    l1 = integrate_abs(t.f, t.R)
    return float(np.exp(-2.0 * l1)), float(np.exp(2.0 * l1))


def check_lipschitz_sandwich(t: ZvonkinTransform, rtol: float = 1e-10) -> bool:
    lo, hi = lipschitz_bounds(t)
    du = t.u_prime_values
    return bool(np.all(du >= lo * (1 - rtol)) and np.all(du <= hi * (1 + rtol)))
