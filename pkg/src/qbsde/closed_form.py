"""Quadrature solvers for the tractable equations and the envelope bounds.

Everything here reduces to Gaussian conditional expectations
``E[phi(x + sqrt(T - t) S)]`` computed by :func:`quadrature.gaussian_expectation`:

* zero driver: ``Y = E[g]``,
* ``f(|y|)|z|^2``-type driver: ``Y = u^{-1}(E[u(g)])``,
* envelope bounds ``[L, U]`` from the transformed positive/negative parts.

The ``theta|z|`` driver is handled by a Girsanov control family (Monte Carlo),
and the exponential / ``ln(1 + y)`` changes of variable map surfaces between
the quadratic and logarithmic forms.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DomainError, IntegrabilityError, PreconditionError
from .function_model import FunctionSpec, process_from
from .mc_engine import SolutionSurface, TimeGrid, simulate_paths
from .pde_oracle import PdeGrid, solve_pde
from .quadrature import gaussian_expectation, preimages
from .scenario import (GeneratorSpec, GirsanovControl, TerminalSpec, default_control_family,
                       girsanov_weights, theta_abs_z)
from .transforms import ZvonkinTransform, build_u

__all__ = [
    "EnvelopeBounds", "GirsanovControl", "solve_zero_generator", "solve_pure_quadratic",
    "pure_quadratic_surface", "envelope_bounds", "solve_theta_linear", "quadratic_log_map",
    "log_bsde_residual", "log_transform_ln1p", "scalar_log_bound_violations", "comparison_check",
    "moment_bound",
]

# quadrature window (12 standard deviations) plus the decay probes beyond it
HALF_WIDTH = 14.0


def _sigma(ts: TerminalSpec, t: float) -> float:
    if t < 0 or t > ts.T + 1e-12:
        raise ConfigError(f"time {t} outside [0, {ts.T}]")
    return float(np.sqrt(max(ts.T - t, 0.0)))


def _window(x, sigma):
    x = np.atleast_1d(np.asarray(x, dtype=float))
    return float(np.min(x)) - HALF_WIDTH * sigma, float(np.max(x)) + HALF_WIDTH * sigma


def _kinks(g: FunctionSpec, lo: float, hi: float, levels=()) -> np.ndarray:
    """Breakpoints of ``g`` plus the points where ``g`` crosses any of ``levels``."""
    pts = [b for b in g.breakpoints() if lo < b < hi]
    for lev in levels:
        pts.extend(preimages(g, lev, lo, hi))
    return np.unique(np.asarray(pts, dtype=float))


def _jumps(f: FunctionSpec, lo: float, hi: float) -> list:
    """Breakpoints of ``f`` in ``(lo, hi)`` where it actually jumps.

    Kinks of a continuous ``f`` leave ``u_f`` twice differentiable, so only
    jumps need to become quadrature panel edges.
    """
    bp = np.asarray([b for b in f.breakpoints() if lo < b < hi], dtype=float)
    if bp.size == 0:
        return []
    eps = 1e-9 * np.maximum(1.0, np.abs(bp))
    left, right = np.asarray(f(bp - eps), dtype=float), np.asarray(f(bp + eps), dtype=float)
    return list(bp[np.abs(right - left) > 1e-6 * np.maximum(1.0, np.abs(left))])


def _out(y, z, scalar):
    if scalar:
        return float(y[0]), float(z[0])
    return y, z


def solve_zero_generator(ts: TerminalSpec, t: float, x, order: int = 12):
    """``(Y, Z) = (E[g(x + W_{T-t})], d/dx of it)``."""
    scalar = np.ndim(x) == 0
    sigma = _sigma(ts, t)
    lo, hi = _window(x, sigma)
    y, z = gaussian_expectation(ts.g, x, sigma, _kinks(ts.g, lo, hi), order=order,
                                with_z=True, assumption="integrability of xi")
    return _out(np.atleast_1d(y), np.atleast_1d(z), scalar)


def transform_for(f: FunctionSpec, magnitude: float, detect_c: bool = False,
                  assumption: str = "(A2)") -> ZvonkinTransform:
    """``u_f`` on ``[-R, R]`` with ``R = 1.2 * magnitude`` (at least 1)."""
    R = max(1.0, 1.2 * float(magnitude))
    n = int(np.clip(2.0 * R / 0.005, 2048, 200_000))
    try:
        return build_u(f, R, n, detect_c=detect_c)
    except DomainError as exc:
        raise IntegrabilityError(f"u_f overflows on the range needed by the terminal value ({exc})",
                                 assumption) from None


def _range_of(fn, lo, hi, n=20_001):
    v = np.asarray(fn(np.linspace(lo, hi, n)), dtype=float)
    return float(np.min(v)), float(np.max(v))


def _pure_quadratic_at(u: ZvonkinTransform, f, ts, t, x, breaks, order=12):
    sigma = _sigma(ts, t)
    x = np.atleast_1d(np.asarray(x, dtype=float))
    if sigma == 0.0:
        y = np.asarray(ts.g(x), dtype=float)
        eps = 1e-6 * np.maximum(1.0, np.abs(x))
        z = (np.asarray(ts.g(x + eps)) - np.asarray(ts.g(x - eps))) / (2 * eps)
        return y, z
    ybar, zbar = gaussian_expectation(lambda s: u.u(ts.g(s)), x, sigma, breaks, order=order,
                                      with_z=True, assumption="(A2)")
    y = u.inverse(ybar)
    return y, zbar / u.u_prime(y)


def solve_pure_quadratic(f: FunctionSpec, ts: TerminalSpec, t: float, x, order: int = 12):
    """Solution of the driver ``f(y)|z|^2`` through ``Y = u_f^{-1}(E[u_f(xi)])``, ``Z = Zbar / u_f'(Y)``."""
    scalar = np.ndim(x) == 0
    sigma = _sigma(ts, t)
    lo, hi = _window(x, sigma)
    gmin, gmax = _range_of(ts.g, lo, hi)
    u = transform_for(f, max(abs(gmin), abs(gmax)))
    breaks = _kinks(ts.g, lo, hi, _jumps(f, -u.R, u.R))
    y, z = _pure_quadratic_at(u, f, ts, t, x, breaks, order)
    return _out(np.atleast_1d(y), np.atleast_1d(z), scalar)


def pure_quadratic_surface(f: FunctionSpec, ts: TerminalSpec, times, states,
                           order: int = 12) -> SolutionSurface:
    """``solve_pure_quadratic`` on a ``(times, states)`` lattice with one shared transform."""
    times = np.asarray(times, dtype=float)
    states = np.asarray(states, dtype=float)
    lo, hi = _window(states, _sigma(ts, float(np.min(times))))
    gmin, gmax = _range_of(ts.g, lo, hi)
    u = transform_for(f, max(abs(gmin), abs(gmax)))
    breaks = _kinks(ts.g, lo, hi, _jumps(f, -u.R, u.R))
    Y = np.empty((times.size, states.size))
    Z = np.empty_like(Y)
    for i, t in enumerate(times):
        Y[i], Z[i] = _pure_quadratic_at(u, f, ts, t, states, breaks, order)
    return SolutionSurface("state_indexed", times, Y, Z, states=states)


@dataclass(frozen=True, eq=False)
class EnvelopeBounds:
    """Lower/upper solution bounds on a ``(times, states)`` lattice.

    At the horizon the bounds are exactly ``-xi^-`` and ``xi^+`` at any state.
    """

    times: np.ndarray
    states: np.ndarray
    L: np.ndarray
    U: np.ndarray
    terminal: TerminalSpec | None = None

    def __post_init__(self):
        if np.any(self.L > self.U + 1e-12 * np.maximum(1.0, np.abs(self.U))):
            raise DomainError("envelope bounds are not ordered")

    @property
    def state_range(self) -> tuple[float, float]:
        return float(self.states[0]), float(self.states[-1])

    def at(self, t: float, x):
        """``(L, U)`` at time ``t`` and states ``x`` (linear interpolation)."""
        x = np.asarray(x, dtype=float)
        if self.terminal is not None and t >= self.terminal.T - 1e-14:
            return -self.terminal.xi_minus(x), self.terminal.xi_plus(x)
        i = int(np.clip(np.searchsorted(self.times, t, side="right") - 1, 0, self.times.size - 1))
        if i < self.times.size - 1 and not np.isclose(self.times[i], t, rtol=0, atol=1e-13):
            a = (t - self.times[i]) / (self.times[i + 1] - self.times[i])
            L = (1 - a) * np.interp(x, self.states, self.L[i]) + a * np.interp(x, self.states, self.L[i + 1])
            U = (1 - a) * np.interp(x, self.states, self.U[i]) + a * np.interp(x, self.states, self.U[i + 1])
            return L, U
        return np.interp(x, self.states, self.L[i]), np.interp(x, self.states, self.U[i])


def envelope_bounds(f: FunctionSpec, a, b, ts: TerminalSpec, times, states) -> EnvelopeBounds:
    """``U = u^{-1}(E[u(xi+_ab) | x]) e^{-B_t} - A_t`` and ``L = A_t - u^{-1}(E[u(xi-_ab) | x]) e^{-B_t}``.

    ``A_t``, ``B_t`` are the running integrals of ``alpha``, ``beta``; ``f``
    should be the increasing coefficient of the dominating generator.
    """
    a, b = process_from(a), process_from(b)
    times = np.asarray(times, dtype=float)
    states = np.asarray(states, dtype=float)
    AT, BT = a.integral(0.0, ts.T), b.integral(0.0, ts.T)
    eBT = np.exp(BT)
    plus = lambda s: (ts.xi_plus(s) + AT) * eBT
    minus = lambda s: (ts.xi_minus(s) + AT) * eBT
    lo, hi = _window(states, _sigma(ts, float(np.min(times))))
    top = max(_range_of(plus, lo, hi)[1], _range_of(minus, lo, hi)[1])
    u = transform_for(f, top)
    levels = [0.0]
    for bp in _jumps(f, -1e-12, u.R):
        lev = max(bp, 0.0) / eBT - AT
        levels.extend([lev, -lev])
    breaks = _kinks(ts.g, lo, hi, levels)
    L = np.empty((times.size, states.size))
    U = np.empty_like(L)
    for i, t in enumerate(times):
        sigma = _sigma(ts, t)
        if sigma == 0.0:
            L[i], U[i] = -ts.xi_minus(states), ts.xi_plus(states)
            continue
        At, Bt = a.antiderivative(t), b.antiderivative(t)
        Ep = gaussian_expectation(lambda s: u.u(plus(s)), states, sigma, breaks, assumption="(A2)")
        Em = gaussian_expectation(lambda s: u.u(minus(s)), states, sigma, breaks, assumption="(A2)")
        U[i] = u.inverse(Ep) * np.exp(-Bt) - At
        L[i] = At - u.inverse(Em) * np.exp(-Bt)
    return EnvelopeBounds(times, states, L, U, ts)


# tolerated share of sampled paths with a negative terminal value (deep-tail
# excursions of an otherwise positive shifted terminal value)
NEGATIVE_FRACTION = 1e-5


@dataclass
class ThetaLinearResult:
    y0: float
    stderr: float
    best: str
    expectation: float
    pde_value: float | None
    table: list = field(default_factory=list)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh, lineterminator="\n")
            wr.writerow(["control_id", "pattern", "estimate", "stderr"])
            for cid, pattern, est, se in self.table:
                wr.writerow([cid, pattern, repr(float(est)), repr(float(se))])


def solve_theta_linear(th, ts: TerminalSpec, family=None, M: int = 200_000, seed: int = 0,
                       bundle=None, steps_per_piece: int = 4, pde: bool = True,
                       workers: int = 1) -> ThetaLinearResult:
    """Family maximum of ``E[Gamma^pi zeta]`` for the driver ``theta|z|``.

    A lower bound of the minimal solution's initial value; the control ``pi = 0``
    is always included so the result is at least the Monte Carlo ``E[zeta]``.
    Antithetic pairs are averaged before the standard error is taken.
    """
    th = process_from(th)
    family = default_control_family() if family is None else list(family)
    if not any(all(v == 0 for v in c.pattern) for c in family):
        family = [GirsanovControl((0,) * len(family[0].pattern))] + family
    pieces = len(family[0].pattern)
    if bundle is None:
        M += M % 2
        bundle = simulate_paths(seed, M, TimeGrid(ts.T, pieces * steps_per_piece),
                                workers=workers, antithetic=True)
    zeta = np.asarray(ts.g(bundle.W[-1]), dtype=float)
    negative = np.count_nonzero(zeta < 0)
    if negative > NEGATIVE_FRACTION * zeta.size:
        raise PreconditionError(
            f"the terminal value is negative on {negative} of {zeta.size} sampled paths")
    paired = bundle.antithetic and bundle.M % 2 == 0
    table = []
    for cid, ctrl in enumerate(family):
        v = girsanov_weights(th, ctrl, bundle) * zeta
        if paired:
            v = 0.5 * (v[0::2] + v[1::2])
        table.append((cid, ctrl.label, float(np.mean(v)), float(np.std(v, ddof=1) / np.sqrt(v.size))))
    best = max(table, key=lambda r: r[2])
    expectation = next(r[2] for r in table if set(r[1]) == {"0"})
    pde_value = None
    if pde:
        H = GeneratorSpec.from_terms(theta_abs_z(th))
        surf = solve_pde(H, ts.g, PdeGrid.build(H, ts.g, ts.T, nx=401), store_every=10**9)
        pde_value = surf.y0()
    return ThetaLinearResult(best[2], best[3], best[1], expectation, pde_value, table)


def quadratic_log_map(surface: SolutionSurface, gamma: float, direction: str = "forward") -> SolutionSurface:
    """``(Y, Z) -> (e^{gamma Y}, gamma e^{gamma Y} Z)`` and its inverse."""
    if not gamma > 0:
        raise DomainError("gamma must be positive")
    Y, Z = surface.Y, surface.Z
    if direction == "forward":
        with np.errstate(over="raise"):
            try:
                Yb = np.exp(gamma * Y)
            except FloatingPointError:
                raise DomainError("exp(gamma Y) overflows") from None
        Zb = gamma * Yb * Z
    elif direction == "inverse":
        if np.any(Y <= 0):
            raise DomainError("inverse map needs a strictly positive surface")
        Yb = np.log(Y) / gamma
        Zb = Z / (gamma * Y)
    else:
        raise ConfigError("direction must be 'forward' or 'inverse'")
    return SolutionSurface(surface.kind, surface.times, Yb, Zb, states=surface.states,
                           W=surface.W, seed=surface.seed, clamp_fraction=surface.clamp_fraction)


def log_driver(gamma: float, a, b):
    """Driver of the exponentiated equation: ``gamma alpha_t y + beta_t y |ln y|``.

    It corresponds to the quadratic driver ``alpha_t + beta_t |y| + (gamma / 2) z^2``.
    """
    a, b = process_from(a), process_from(b)

    def H(t, y, z):
        y = np.asarray(y, dtype=float)
        with np.errstate(divide="ignore", invalid="ignore"):
            ylog = np.where(y > 0, y * np.abs(np.log(np.where(y > 0, y, 1.0))), 0.0)
        return gamma * a(t) * y + b(t) * ylog

    return H


def log_bsde_residual(surface: SolutionSurface, gamma: float, a, b, interior: float = 0.5) -> float:
    """Discrete residual of the logarithmic equation on a mapped state-indexed surface.

    At each stored step ``(Ybar^{n+1} - Ybar^n)/dt + D2 Ybar^{n+1}/2 + Hbar(Ybar^{n+1})``
    and ``Zbar - D1 Ybar`` are formed on the central ``interior`` fraction of
    the state grid; the maximum is scaled by ``max(1, |Ybar|)``.
    """
    if surface.kind != "state_indexed":
        raise ConfigError("residual needs a state-indexed surface")
    Hb = log_driver(gamma, a, b)
    x, t = surface.states, surface.times
    dx = x[1] - x[0]
    Y, Z = surface.Y, surface.Z
    sel = np.abs(x[1:-1]) <= interior * np.max(np.abs(x))
    worst = 0.0
    for n in range(t.size - 1):
        dt = t[n + 1] - t[n]
        y1 = Y[n + 1]
        uxx = (y1[2:] - 2 * y1[1:-1] + y1[:-2]) / (dx * dx)
        ux = (y1[2:] - y1[:-2]) / (2 * dx)
        r = (y1[1:-1] - Y[n, 1:-1]) / dt + 0.5 * uxx + Hb(t[n + 1], y1[1:-1], ux)
        rz = Z[n + 1, 1:-1] - ux
        scale = np.maximum(1.0, np.abs(y1[1:-1]))
        worst = max(worst, float(np.max((np.abs(r) + np.abs(rz))[sel] / scale[sel])))
    return worst


def hbar(a: float, b: float, c: float):
    """``Hbar(y, z) = [a + b x + c x |ln x|] e^{-y} + z^2/2`` with ``x = e^y - 1``, for ``y >= 0``."""

    def H(y, z):
        y = np.asarray(y, dtype=float)
        xv = np.expm1(y)
        with np.errstate(divide="ignore", invalid="ignore"):
            xlog = np.where(xv > 0, xv * np.abs(np.log(np.where(xv > 0, xv, 1.0))), 0.0)
        return (a + b * xv + c * xlog) * np.exp(-y) + 0.5 * np.asarray(z) ** 2

    return H


@dataclass
class Ln1pResult:
    surface: SolutionSurface
    Hbar: object
    violations: int
    samples: int


def log_transform_ln1p(surface: SolutionSurface, a: float, b: float, c: float,
                       n: int = 10_000, seed: int = 0) -> Ln1pResult:
    """``(ln(1 + Y), Z / (1 + Y))`` plus a sampled check of ``0 <= Hbar <= a + b + c + c y + z^2/2``."""
    if min(a, b, c) < 0:
        raise PreconditionError("a, b, c must be non-negative")
    if np.any(surface.Y < 0):
        raise DomainError("the ln(1 + y) transform applies to non-negative solutions")
    Yb = np.log1p(surface.Y)
    Zb = surface.Z / (1.0 + surface.Y)
    out = SolutionSurface(surface.kind, surface.times, Yb, Zb, states=surface.states,
                          W=surface.W, seed=surface.seed, clamp_fraction=surface.clamp_fraction)
    H = hbar(a, b, c)
    rng = np.random.default_rng(seed)
    top = max(20.0, float(np.max(Yb)))
    y = np.concatenate([[0.0], rng.uniform(0.0, top, n - 1)])
    z = rng.uniform(-10.0, 10.0, n)
    v = H(y, z)
    upper = a + b + c + c * y + 0.5 * z * z
    tol = 1e-12 * np.maximum(1.0, upper)
    violations = int(np.count_nonzero((v < -tol) | (v > upper + tol)))
    return Ln1pResult(out, H, violations, n)


def scalar_log_bound_violations(n: int = 100_000, top: float = 1e3) -> int:
    """Count of ``x |ln x| / (1 + x) > 1 + |ln(1 + x)|`` on a log-spaced grid of ``(0, top]``."""
    x = np.concatenate([np.geomspace(1e-12, top, n // 2), np.linspace(top / n, top, n - n // 2)])
    lhs = x * np.abs(np.log(x)) / (1.0 + x)
    rhs = 1.0 + np.abs(np.log1p(x))
    return int(np.count_nonzero(lhs > rhs))


@dataclass
class ComparisonReport:
    max_excess: float
    lower: SolutionSurface
    upper: SolutionSurface

    def lattice_rows(self):
        """Rows ``t, x, Y1, Y2``."""
        s1, s2 = self.lower, self.upper
        for i, t in enumerate(s1.times):
            for k, x in enumerate(s1.states):
                yield t, x, s1.Y[i, k], s2.Y[i, k]


def comparison_check(f1: FunctionSpec, f2: FunctionSpec, ts1: TerminalSpec, ts2: TerminalSpec,
                     times, states) -> ComparisonReport:
    """Max of ``(Y^1 - Y^2)^+`` over the lattice for ``f1 <= f2`` and ``g1 <= g2``."""
    if ts1.T != ts2.T:
        raise PreconditionError("both scenarios need the same horizon")
    lo, hi = _window(states, _sigma(ts1, float(np.min(times))))
    xs = np.linspace(lo, hi, 20_001)
    if np.any(np.asarray(ts1.g(xs)) > np.asarray(ts2.g(xs)) + 1e-14):
        raise PreconditionError("comparison needs g1 <= g2")
    g_top = max(np.max(np.abs(ts1.g(xs))), np.max(np.abs(ts2.g(xs))))
    R = max(1.0, 1.2 * g_top)
    ys = np.linspace(-R, R, 20_001)
    if np.any(np.asarray(f1(ys)) > np.asarray(f2(ys)) + 1e-14):
        raise PreconditionError("comparison needs f1 <= f2")
    s1 = pure_quadratic_surface(f1, ts1, times, states)
    s2 = pure_quadratic_surface(f2, ts2, times, states)
    return ComparisonReport(float(np.max(np.maximum(s1.Y - s2.Y, 0.0))), s1, s2)


@dataclass(frozen=True)
class MomentBound:
    """``lhs = max_t E[u_f((|Y_t| + A_t) e^{B_t})^p]`` against ``rhs = E[u_f(xi_ab)^p]``."""

    lhs: float
    rhs: float
    per_time: tuple
    p: float

    def holds(self, rtol: float = 1e-2) -> bool:
        return self.lhs <= self.rhs * (1.0 + rtol)


def moment_bound(f: FunctionSpec, ts: TerminalSpec, surface: SolutionSurface, a=0.0, b=0.0,
                 p: float = 2.0) -> MomentBound:
    """Both sides of the ``p``-th moment bound, by Gaussian quadrature.

    ``surface`` is a state-indexed solution; at each stored time ``t`` the
    state ``W_t ~ N(0, t)`` is integrated out against the state interpolant.
    """
    if not p > 1:
        raise PreconditionError("moment exponent p must exceed 1")
    if surface.kind != "state_indexed":
        raise ConfigError("moment bound needs a state-indexed surface")
    a, b = process_from(a), process_from(b)
    AT, BT = a.integral(0.0, ts.T), b.integral(0.0, ts.T)
    sig_T = np.sqrt(ts.T)
    lo, hi = _window(0.0, sig_T)
    xi = lambda s: (np.abs(ts.g(s)) + AT) * np.exp(BT)
    top = max(_range_of(xi, lo, hi)[1],
              (float(np.max(np.abs(surface.Y))) + AT) * np.exp(BT))
    u = transform_for(f, top)
    breaks = _kinks(ts.g, lo, hi, [0.0])
    rhs = float(gaussian_expectation(lambda s: u.u(xi(s)) ** p, 0.0, sig_T, breaks)[0])
    per_time = []
    x = surface.states
    for i, t in enumerate(surface.times):
        At, Bt = a.antiderivative(t), b.antiderivative(t)
        level = lambda s, row=surface.Y[i]: u.u((np.abs(np.interp(s, x, row)) + At) * np.exp(Bt)) ** p
        val = gaussian_expectation(level, 0.0, float(np.sqrt(t)))[0]
        per_time.append((float(t), float(val)))
    lhs = max(v for _, v in per_time)
    return MomentBound(lhs, rhs, tuple(per_time), float(p))
