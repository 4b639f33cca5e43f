"""Low-level quadrature used across the package.

Three tools live here:

* fixed-order Gauss-Legendre on batches of panels (vectorised),
* adaptive Simpson with forced splits at known breakpoints,
* Gaussian conditional expectations ``E[phi(x + sigma * S)]``, ``S ~ N(0, 1)``,
  computed with composite Gauss-Legendre against the normal density, with the
  panel edges split at the (mapped) kinks of ``phi`` and a tail test that
  detects non-integrable integrands.
"""

from __future__ import annotations

from functools import lru_cache

import numpy as np
from scipy.optimize import brentq

from .errors import DomainError, IntegrabilityError

_SQRT_2PI = np.sqrt(2.0 * np.pi)


@lru_cache(maxsize=None)
def gauss_legendre(m: int) -> tuple[np.ndarray, np.ndarray]:
    """Nodes and weights of the m-point Gauss-Legendre rule on [-1, 1]."""
    nodes, weights = np.polynomial.legendre.leggauss(m)
    nodes.setflags(write=False)
    weights.setflags(write=False)
    return nodes, weights


def panel_integral(fn, a, b, m: int = 8) -> np.ndarray:
    """Integrate ``fn`` over each panel ``[a_i, b_i]`` with an m-point rule.

    ``a`` and ``b`` broadcast against each other; ``fn`` must accept an array
    with one extra trailing axis of length m.
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    nodes, weights = gauss_legendre(m)
    half = 0.5 * (b - a)
    mid = 0.5 * (b + a)
    pts = mid[..., None] + half[..., None] * nodes
    return half * np.sum(np.asarray(fn(pts), dtype=float) * weights, axis=-1)


def adaptive_simpson(fn, a: float, b: float, rtol: float = 1e-11,
                     breakpoints=(), max_depth: int = 48) -> float:
    """Adaptive Simpson quadrature of a scalar function on [a, b].

    The interval is first cut at every breakpoint strictly inside (a, b), so
    jump discontinuities never sit inside a Simpson panel.
    """
    if b < a:
        return -adaptive_simpson(fn, b, a, rtol, breakpoints, max_depth)
    if b == a:
        return 0.0
    cuts = sorted({a, b, *(float(p) for p in breakpoints if a < p < b)})

    def f(x):
        v = float(fn(x))
        if not np.isfinite(v):
            raise DomainError(f"non-finite integrand value {v} at x={x}")
        return v

    # scale estimate for the absolute tolerance
    probe = np.linspace(a, b, 33)
    scale = max(np.mean([abs(f(x)) for x in probe]) * (b - a), 1e-300)
    total = 0.0
    for lo, hi in zip(cuts[:-1], cuts[1:]):
        tol = rtol * scale * (hi - lo) / (b - a)
        flo, fhi = f(lo), f(hi)
        mid = 0.5 * (lo + hi)
        fmid = f(mid)
        whole = (hi - lo) / 6.0 * (flo + 4.0 * fmid + fhi)
        stack = [(lo, hi, flo, fmid, fhi, whole, tol, 0)]
        while stack:
            x0, x1, f0, fm, f1, s, eps, depth = stack.pop()
            xm = 0.5 * (x0 + x1)
            xl, xr = 0.5 * (x0 + xm), 0.5 * (xm + x1)
            fl, fr = f(xl), f(xr)
            left = (xm - x0) / 6.0 * (f0 + 4.0 * fl + fm)
            right = (x1 - xm) / 6.0 * (fm + 4.0 * fr + f1)
            delta = left + right - s
            if depth >= max_depth or abs(delta) <= 15.0 * eps:
                total += left + right + delta / 15.0
            else:
                stack.append((x0, xm, f0, fl, fm, left, 0.5 * eps, depth + 1))
                stack.append((xm, x1, fm, fr, f1, right, 0.5 * eps, depth + 1))
    return total


def preimages(g, level: float, lo: float, hi: float, n: int = 4001) -> np.ndarray:
    """Points in [lo, hi] where ``g(x) == level``, located by sign change + Brent."""
    xs = np.linspace(lo, hi, n)
    d = np.asarray(g(xs), dtype=float) - level
    found = list(xs[d == 0.0])
    idx = np.nonzero(d[:-1] * d[1:] < 0.0)[0]
    for i in idx:
        found.append(brentq(lambda x: float(g(np.array([x]))[0]) - level,
                            xs[i], xs[i + 1], xtol=1e-14, rtol=1e-15))
    return np.unique(np.asarray(found, dtype=float))


def gaussian_expectation(phi, x, sigma: float, breaks=(), *, half_width: float = 12.0,
                         panel: float = 0.5, order: int = 12, with_z: bool = False,
                         tail_rtol: float = 1e-8, assumption: str = "(A2)"):
    """Return ``E[phi(x + sigma S)]`` (and optionally its x-derivative).

    ``breaks`` are kink/jump locations of ``phi`` in state space; they become
    panel edges after the map ``s = (b - x) / sigma``.  The derivative uses the
    Gaussian integration-by-parts identity
    ``d/dx E[phi(x + sigma S)] = E[phi(x + sigma S) S] / sigma``, so no
    derivative of ``phi`` is needed.

    Raises IntegrabilityError when the integrand overflows, or when the outer
    third of the truncated range carries more than ``tail_rtol`` of the total
    absolute mass while the weighted integrand fails to decay just beyond the
    window.
    """
    x = np.atleast_1d(np.asarray(x, dtype=float))
    if sigma < 0:
        raise DomainError("sigma must be non-negative")
    if sigma == 0.0:
        y = np.asarray(phi(x), dtype=float)
        if not np.all(np.isfinite(y)):
            raise IntegrabilityError("terminal functional is not finite", assumption)
        if not with_z:
            return y
        eps = 1e-6 * np.maximum(1.0, np.abs(x))
        z = (np.asarray(phi(x + eps)) - np.asarray(phi(x - eps))) / (2.0 * eps)
        return y, z

    L = half_width
    base = np.linspace(-L, L, int(round(2 * L / panel)) + 1)
    k = x.size
    br = np.asarray(list(breaks), dtype=float)
    if br.size:
        sb = np.clip((br[None, :] - x[:, None]) / sigma, -L, L)
        edges = np.sort(np.concatenate([np.broadcast_to(base, (k, base.size)), sb], axis=1), axis=1)
    else:
        edges = np.broadcast_to(base, (k, base.size))
    a, b = edges[:, :-1], edges[:, 1:]
    nodes, weights = gauss_legendre(order)
    half = 0.5 * (b - a)
    s = (0.5 * (a + b))[..., None] + half[..., None] * nodes
    w = half[..., None] * weights * np.exp(-0.5 * s * s) / _SQRT_2PI
    with np.errstate(over="ignore", invalid="ignore"):
        vals = np.asarray(phi(x[:, None, None] + sigma * s), dtype=float)
    if not np.all(np.isfinite(vals)):
        raise IntegrabilityError(
            "integrand overflows inside the Gaussian window; the conditional "
            "expectation is numerically infinite", assumption)
    contrib = vals * w
    y = contrib.sum(axis=(1, 2))
    mass = np.abs(contrib)
    total = mass.sum(axis=(1, 2))
    tail = np.where(np.abs(s) > 2.0 * L / 3.0, mass, 0.0).sum(axis=(1, 2))
    # growth test, probed just outside the window so that a kink sitting at
    # the window edge cannot mimic growth: the weighted integrand must decay
    probe = np.array([-(L + 2.0), -(L + 1.0), L + 1.0, L + 2.0])
    try:
        with np.errstate(over="ignore", invalid="ignore"):
            pv = np.abs(np.asarray(phi(x[:, None] + sigma * probe), dtype=float))
    except ValueError:
        # phi is not defined beyond the window; fall back to the mass test alone
        pv = np.full((k, 4), np.inf)
    with np.errstate(over="ignore", invalid="ignore"):
        pw = pv * np.exp(-0.5 * probe * probe)
    growing = ((pw[:, 1] > 0) & ~(pw[:, 0] <= 0.5 * pw[:, 1])) | \
              ((pw[:, 2] > 0) & ~(pw[:, 3] <= 0.5 * pw[:, 2]))
    bad = (tail > tail_rtol * np.maximum(total, 1e-300)) & growing & (total > 0)
    if np.any(bad):
        i = int(np.argmax(bad))
        raise IntegrabilityError(
            f"Gaussian tail carries {tail[i] / total[i]:.3g} of the mass at x={x[i]:.4g} and "
            "does not decay; terminal functional looks non-integrable", assumption)
    if not with_z:
        return y
    z = (contrib * s).sum(axis=(1, 2)) / sigma
    return y, z
