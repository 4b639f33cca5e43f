"""Explicit finite differences for ``u_t + u_xx/2 + H(t, u, u_x) = 0``, ``u(T) = g``.

The scheme marches backward from ``T`` with centered differences:

    u^n = u^{n+1} + dt * (D2 u^{n+1} / 2 + H(t_{n+1}, u^{n+1}, D1 u^{n+1})).

Stability needs ``dt <= dx^2 / (1 + b dx)`` where ``b`` bounds ``|dH/dz|`` on
the working range (the first-order part of the scheme then stays monotone).
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, StabilityError
from .mc_engine import SolutionSurface

BOUNDARY_MODES = ("linear_extrapolation", "dirichlet_from_envelope")
SAFETY = 0.9


def _slope_bound(H, T, y_range, z_max, times=None) -> tuple[float, float]:
    """Numerical bounds on ``|dH/dz|`` and ``|dH/dy|`` over a sample box."""
    ts = np.linspace(0.0, T, 9) if times is None else np.asarray(times)
    y = np.linspace(y_range[0], y_range[1], 21)[:, None]
    z = np.linspace(-z_max, z_max, 41)[None, :]
    dz, dy = 1e-6 * max(1.0, z_max), 1e-6 * max(1.0, np.max(np.abs(y_range)))
    bz = by = 0.0
    for t in ts:
        gz = (H(t, y, z + dz) - H(t, y, z - dz)) / (2 * dz)
        gy = (H(t, y + dy, z) - H(t, y - dy, z)) / (2 * dy)
        bz = max(bz, float(np.max(np.abs(gz))))
        by = max(by, float(np.max(np.abs(gy))))
    return bz, by


@dataclass(frozen=True)
class PdeGrid:
    """Uniform grid on ``[-X, X] x [0, T]``.

    ``C`` is the quadratic constant of a domination pair; when given it adds
    ``2 C max|u_x|`` to the numerically estimated drift bound.
    """

    T: float
    X: float
    nx: int
    nt: int
    boundary: str = "linear_extrapolation"
    C: float | None = None
    drift_bound: float = 0.0

    def __post_init__(self):
        if self.boundary not in BOUNDARY_MODES:
            raise ConfigError(f"boundary mode must be one of {BOUNDARY_MODES}")
        if not (self.T > 0 and self.X > 0 and self.nx >= 5 and self.nt >= 1):
            raise ConfigError("PDE grid needs T, X > 0, nx >= 5, nt >= 1")

    @property
    def x(self) -> np.ndarray:
        return np.linspace(-self.X, self.X, self.nx)

    @property
    def dx(self) -> float:
        return 2.0 * self.X / (self.nx - 1)

    @property
    def dt(self) -> float:
        return self.T / self.nt

    @staticmethod
    def min_steps(T, dx, drift, lipschitz_y=0.0) -> int:
        dt_max = SAFETY * dx * dx / (1.0 + drift * dx)
        if lipschitz_y > 0:
            dt_max = min(dt_max, 0.5 / lipschitz_y)
        nt = int(np.ceil(T / dt_max))
        # lambda = 1/3 cancels the leading truncation term; stay clear of it so
        # that observed convergence reflects the generic second-order error
        lam = (T / nt) / (dx * dx)
        if abs(lam - 1.0 / 3.0) < 0.02:
            nt = int(np.ceil(T / (0.3 * dx * dx)))
        return nt

    @classmethod
    def build(cls, H, g, T: float, X: float | None = None, nx: int = 401, nt: int | None = None,
              boundary: str = "linear_extrapolation", C: float | None = None) -> "PdeGrid":
        """Grid with the stability bound enforced (``nt`` chosen when omitted)."""
        X = 8.0 * np.sqrt(T) + 2.0 if X is None else float(X)
        x = np.linspace(-X, X, nx)
        dx = x[1] - x[0]
        gx = np.asarray(g(x), dtype=float)
        slope = float(np.max(np.abs(np.diff(gx)))) / dx
        z_max = 1.5 * slope + 1.0
        pad = 1.0 + 0.5 * (np.max(gx) - np.min(gx))
        drift, lip_y = _slope_bound(H, T, (np.min(gx) - pad, np.max(gx) + pad), z_max)
        if C is not None:
            drift = max(drift, 2.0 * C * z_max)
        need = cls.min_steps(T, dx, drift, lip_y)
        if nt is None:
            nt = need
        elif nt < need:
            raise StabilityError(f"nt={nt} violates the explicit stability bound; need nt >= {need}",
                                 suggested_nt=need)
        return cls(T, X, nx, int(nt), boundary, C, drift)


def solve_pde(H, g, grid: PdeGrid, bounds=None, store_every: int = 1) -> SolutionSurface:
    """Backward explicit solve; returns a state-indexed surface ``Y = u``, ``Z = u_x``."""
    if grid.boundary == "dirichlet_from_envelope" and bounds is None:
        raise ConfigError("dirichlet_from_envelope needs envelope bounds")
    x = grid.x
    dx, dt, nt = grid.dx, grid.dt, grid.nt
    if bounds is not None:
        lo, hi = bounds.state_range
        if x[0] < lo - 1e-12 or x[-1] > hi + 1e-12:
            raise ConfigError("envelope bounds do not cover the PDE domain")
    u = np.asarray(g(x), dtype=float).copy()
    scale = max(1.0, float(np.max(np.abs(u))))
    times = np.arange(nt + 1) * dt
    keep = list(range(0, nt + 1, store_every))
    if keep[-1] != nt:
        keep.append(nt)
    keep_set = set(keep)
    Ys, Zs = {}, {}

    def gradient(v):
        d = np.empty_like(v)
        d[1:-1] = (v[2:] - v[:-2]) / (2 * dx)
        d[0] = (v[1] - v[0]) / dx
        d[-1] = (v[-1] - v[-2]) / dx
        return d

    Ys[nt], Zs[nt] = u.copy(), gradient(u)
    box_hits = 0
    inv_dx2 = 1.0 / (dx * dx)
    for n in range(nt - 1, -1, -1):
        t_next = times[n + 1]
        ux = (u[2:] - u[:-2]) / (2 * dx)
        uxx = (u[2:] - 2 * u[1:-1] + u[:-2]) * inv_dx2
        new = np.empty_like(u)
        new[1:-1] = u[1:-1] + dt * (0.5 * uxx + np.asarray(H(t_next, u[1:-1], ux), dtype=float))
        new[0] = 2 * new[1] - new[2]
        new[-1] = 2 * new[-2] - new[-3]
        if grid.boundary == "dirichlet_from_envelope":
            L, U = bounds.at(times[n], x)
            clipped = np.minimum(np.maximum(new, L), U)
            box_hits += int(np.count_nonzero(clipped != new))
            new = clipped
        u = new
        if not np.all(np.isfinite(u)) or np.max(np.abs(u)) > 1e6 * scale:
            raise StabilityError(f"explicit scheme blew up at t={times[n]:.4g}", suggested_nt=2 * nt)
        if n in keep_set:
            Ys[n], Zs[n] = u.copy(), gradient(u)
    keep = sorted(keep)
    surf = SolutionSurface("state_indexed", times[keep], np.array([Ys[k] for k in keep]),
                           np.array([Zs[k] for k in keep]), states=x)
    # share of (node, step) values moved onto the envelope box
    surf.meta.update(nx=grid.nx, nt=nt, dx=dx, dt=dt, boundary=grid.boundary,
                     box_active_fraction=box_hits / (nt * grid.nx))
    return surf


@dataclass(frozen=True)
class CompareReport:
    norm: str
    error: float
    tol: float | None
    interpolated: bool

    @property
    def passed(self) -> bool | None:
        return None if self.tol is None else self.error <= self.tol


def compare(A: SolutionSurface, B: SolutionSurface, norm: str = "sup_at_origin",
            tol: float | None = None, lattice=None) -> CompareReport:
    """Error between two surfaces at the origin or over a ``(times, states)`` lattice."""
    if norm == "sup_at_origin":
        interp = not (A.kind == B.kind == "state_indexed" and np.any(A.states == 0.0)
                      and np.any(B.states == 0.0))
        return CompareReport(norm, abs(A.y0() - B.y0()), tol, interp)
    if norm != "sup_lattice":
        raise ConfigError(f"unknown norm {norm!r}")
    if A.kind != "state_indexed" or B.kind != "state_indexed":
        raise ConfigError("lattice comparison needs state-indexed surfaces")
    same = (A.times.shape == B.times.shape and A.states.shape == B.states.shape
            and np.array_equal(A.times, B.times) and np.array_equal(A.states, B.states))
    if lattice is None and same:
        return CompareReport(norm, float(np.max(np.abs(A.Y - B.Y))), tol, False)
    if lattice is None:
        lo = max(A.states[0], B.states[0])
        hi = min(A.states[-1], B.states[-1])
        lattice = (A.times, A.states[(A.states >= lo) & (A.states <= hi)])
    tt, xx = np.meshgrid(lattice[0], lattice[1], indexing="ij")
    err = np.max(np.abs(A.interpolate(tt, xx) - B.interpolate(tt, xx)))
    return CompareReport(norm, float(err), tol, True)


def convergence_study(g, exact: float, T: float = 1.0, H=None, base_nx: int = 101,
                      levels: int = 3, X: float | None = None, lam: float = 0.8):
    """Origin errors for ``nx = (base_nx - 1) 2^k + 1`` with ``dt / dx^2`` held fixed.

    Returns ``(rows, ratios)`` with rows ``(nx, nt, error)``.
    """
    H = (lambda t, y, z: 0.0 * z) if H is None else H
    X = 8.0 * np.sqrt(T) if X is None else X
    rows = []
    dx0 = 2.0 * X / (base_nx - 1)
    nt0 = int(np.ceil(T / (lam * dx0 * dx0)))
    for k in range(levels):
        nx = (base_nx - 1) * 2 ** k + 1
        nt = nt0 * 4 ** k
        grid = PdeGrid.build(H, g, T, X=X, nx=nx, nt=nt)
        err = abs(solve_pde(H, g, grid, store_every=nt).y0() - exact)
        rows.append((nx, nt, err))
    ratios = [rows[i][2] / rows[i + 1][2] for i in range(len(rows) - 1)]
    return rows, ratios


def write_convergence_csv(path, rows) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["nx", "nt", "error"])
        for nx, nt, err in rows:
            wr.writerow([nx, nt, repr(float(err))])
