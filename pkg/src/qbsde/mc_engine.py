"""Brownian paths, binned regression and the clamped backward scheme.

Random numbers come from a counter-based generator: the normal draw for
``(seed, path, step)`` is a pure function of those three integers (a
SplitMix64-style mix followed by the inverse normal CDF).  Any split of the
paths over workers therefore yields the same bundle bit for bit.
"""

from __future__ import annotations

import csv
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.special import ndtri

from .errors import ConfigError, DomainError

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_STEP_KEY = np.uint64(0xD1B54A32D192ED03)
MIN_BIN = 10


@dataclass(frozen=True)
class TimeGrid:
    T: float
    N: int

    def __post_init__(self):
        if not (self.T > 0 and self.N >= 1):
            raise ConfigError("time grid needs T > 0 and N >= 1")

    @property
    def h(self) -> float:
        return self.T / self.N

    @property
    def nodes(self) -> np.ndarray:
        return np.arange(self.N + 1) * self.h


def _mix(z: np.ndarray) -> np.ndarray:
    z = (z ^ (z >> np.uint64(30))) * _M1
    z = (z ^ (z >> np.uint64(27))) * _M2
    return z ^ (z >> np.uint64(31))


def counter_normals(seed: int, paths: np.ndarray, steps: np.ndarray) -> np.ndarray:
    """Standard normals indexed by ``(seed, path, step)``; shape ``(len(steps), len(paths))``."""
    with np.errstate(over="ignore"):
        s = np.uint64(int(seed) & 0xFFFFFFFFFFFFFFFF)
        key = _mix(s + _GOLDEN * (paths.astype(np.uint64) + np.uint64(1)))
        z = _mix(key[None, :] ^ (_STEP_KEY * (steps.astype(np.uint64)[:, None] + np.uint64(1))))
        z = _mix(z + _GOLDEN)
    u = ((z >> np.uint64(11)).astype(np.float64) + 0.5) * (1.0 / 9007199254740992.0)
    return ndtri(u)


@dataclass(frozen=True, eq=False)
class PathBundle:
    """``M`` Brownian paths on ``grid``; arrays are time-major (``dW[i, j]`` is step i of path j)."""

    grid: TimeGrid
    dW: np.ndarray
    seed: int
    antithetic: bool = False

    @property
    def M(self) -> int:
        return self.dW.shape[1]

    @property
    def W(self) -> np.ndarray:
        out = np.zeros((self.grid.N + 1, self.M))
        np.cumsum(self.dW, axis=0, out=out[1:])
        return out


def simulate_paths(seed: int, M: int, grid: TimeGrid, workers: int = 1,
                   antithetic: bool = False, chunk: int = 65_536) -> PathBundle:
    """Brownian increments for ``M`` paths, independent of ``workers``.

    With ``antithetic`` the paths come in pairs ``(2j, 2j+1)`` driven by
    opposite increments.
    """
    if M < 1:
        raise ConfigError("need at least one path")
    steps = np.arange(grid.N)
    sqrt_h = np.sqrt(grid.h)
    dW = np.empty((grid.N, M))

    def fill(lo):
        hi = min(M, lo + chunk)
        idx = np.arange(lo, hi)
        if antithetic:
            z = counter_normals(seed, idx // 2, steps)
            z *= np.where(idx % 2 == 0, 1.0, -1.0)
        else:
            z = counter_normals(seed, idx, steps)
        dW[:, lo:hi] = z * sqrt_h

    starts = range(0, M, chunk)
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            list(pool.map(fill, starts))
    else:
        for lo in starts:
            fill(lo)
    return PathBundle(grid, dW, int(seed), antithetic)


@dataclass(frozen=True, eq=False)
class RegressionBasis:
    """Equiprobable bins over a state sample; tied states always share a bin."""

    edges: np.ndarray
    index: np.ndarray

    @property
    def K(self) -> int:
        return self.edges.size + 1


def default_bins(M: int) -> int:
    return int(np.ceil(M ** (1.0 / 3.0) - 1e-9))


def build_basis(state: np.ndarray, K: int | None = None) -> RegressionBasis:
    state = np.asarray(state, dtype=float)
    K = default_bins(state.size) if K is None else int(K)
    if K < 1:
        raise ConfigError("bin count must be positive")
    inner = np.quantile(state, np.linspace(0.0, 1.0, K + 1)[1:-1]) if K > 1 else np.empty(0)
    edges = np.unique(inner)
    while edges.size:
        index = np.searchsorted(edges, state, side="right")
        counts = np.bincount(index, minlength=edges.size + 1)
        small = np.nonzero(counts < MIN_BIN)[0]
        if small.size == 0:
            break
        b = int(small[np.argmin(counts[small])])
        # merge with the smaller neighbour by dropping the shared edge
        if b == 0:
            drop = 0
        elif b == edges.size:
            drop = edges.size - 1
        else:
            drop = b - 1 if counts[b - 1] <= counts[b + 1] else b
        edges = np.delete(edges, drop)
    index = np.searchsorted(edges, state, side="right")
    return RegressionBasis(edges, index)


def regress_conditional(values: np.ndarray, state: np.ndarray,
                        basis: RegressionBasis | None = None) -> np.ndarray:
    """Per-bin least-squares affine fit of ``values`` on ``state``, evaluated per path."""
    values = np.asarray(values, dtype=float)
    state = np.asarray(state, dtype=float)
    if values.shape != state.shape:
        raise ConfigError("values and state must have equal length")
    basis = build_basis(state) if basis is None else basis
    idx, K = basis.index, basis.K
    n = np.bincount(idx, minlength=K).astype(float)
    n_safe = np.maximum(n, 1.0)
    mx = np.bincount(idx, state, minlength=K) / n_safe
    my = np.bincount(idx, values, minlength=K) / n_safe
    dx = state - mx[idx]
    dy = values - my[idx]
    sxx = np.bincount(idx, dx * dx, minlength=K)
    sxy = np.bincount(idx, dx * dy, minlength=K)
    width = np.bincount(idx, np.abs(dx), minlength=K) / n_safe
    degenerate = sxx <= 1e-24 * n_safe * np.maximum(1.0, width) ** 2
    slope = np.where(degenerate, 0.0, sxy / np.where(degenerate, 1.0, sxx))
    return my[idx] + slope[idx] * dx


@dataclass(frozen=True, eq=False)
class SolutionSurface:
    """Discrete ``(Y, Z)`` on a time grid, time-major.

    ``kind == "path_indexed"``: ``Y[i, j]`` for path j, with states ``W[i, j]``.
    ``kind == "state_indexed"``: ``Y[i, k]`` at ``states[k]``.
    """

    kind: str
    times: np.ndarray
    Y: np.ndarray
    Z: np.ndarray
    states: np.ndarray | None = None
    W: np.ndarray | None = None
    seed: int | None = None
    clamp_fraction: float | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in ("path_indexed", "state_indexed"):
            raise ConfigError(f"unknown surface kind {self.kind!r}")
        if self.Y.shape != self.Z.shape or self.Y.shape[0] != self.times.size:
            raise ConfigError("Y, Z and times have inconsistent shapes")
        if self.kind == "path_indexed" and (self.W is None or self.seed is None):
            raise ConfigError("path-indexed surfaces carry their states and seed")
        if self.kind == "state_indexed" and self.states is None:
            raise ConfigError("state-indexed surfaces carry their state grid")
        if not (np.all(np.isfinite(self.Y)) and np.all(np.isfinite(self.Z))):
            raise DomainError("solution surface contains non-finite values")

    def y0(self) -> float:
        """Value at ``(t, x) = (0, 0)``."""
        if self.kind == "path_indexed":
            return float(np.mean(self.Y[0]))
        return float(np.interp(0.0, self.states, self.Y[0]))

    def z0(self) -> float:
        if self.kind == "path_indexed":
            return float(np.mean(self.Z[0]))
        return float(np.interp(0.0, self.states, self.Z[0]))

    def interpolate(self, t, x, which: str = "Y"):
        """Bilinear interpolation of a state-indexed surface."""
        if self.kind != "state_indexed":
            raise ConfigError("interpolation needs a state-indexed surface")
        data = self.Y if which == "Y" else self.Z
        t = np.asarray(t, dtype=float)
        x = np.asarray(x, dtype=float)
        t, x = np.broadcast_arrays(t, x)
        i = np.clip(np.searchsorted(self.times, t, side="right") - 1, 0, self.times.size - 2)
        t0, t1 = self.times[i], self.times[i + 1]
        a = np.clip((t - t0) / (t1 - t0), 0.0, 1.0)
        k = np.clip(np.searchsorted(self.states, x, side="right") - 1, 0, self.states.size - 2)
        x0, x1 = self.states[k], self.states[k + 1]
        b = np.clip((x - x0) / (x1 - x0), 0.0, 1.0)
        return ((1 - a) * ((1 - b) * data[i, k] + b * data[i, k + 1])
                + a * ((1 - b) * data[i + 1, k] + b * data[i + 1, k + 1]))

    def to_csv(self, path, max_paths: int = 1000) -> None:
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh, lineterminator="\n")
            if self.kind == "path_indexed":
                wr.writerow(["t", "path", "W", "Y", "Z"])
                m = min(max_paths, self.Y.shape[1])
                for i, t in enumerate(self.times):
                    for j in range(m):
                        wr.writerow([repr(float(t)), j, repr(float(self.W[i, j])),
                                     repr(float(self.Y[i, j])), repr(float(self.Z[i, j]))])
            else:
                wr.writerow(["t", "x", "Y", "Z"])
                for i, t in enumerate(self.times):
                    for k, x in enumerate(self.states):
                        wr.writerow([repr(float(t)), repr(float(x)),
                                     repr(float(self.Y[i, k])), repr(float(self.Z[i, k]))])


def lsmc_solve(H, ts, bounds, bundle: PathBundle, K: int | None = None) -> SolutionSurface:
    """Explicit regression scheme, clamped to the envelope bounds.

    ``H`` is any callable ``H(t, y, z)``; ``ts`` supplies ``g`` and ``T``;
    ``bounds`` (or None for an unclamped run) supplies ``bounds.at(t, x) ->
    (L, U)`` on its state range.  Step i uses

        E_i = E[Y_{i+1} | W_i],   Z_i = E[(Y_{i+1} - E_i) dW_i | W_i] / h,
        Y_i = clamp(E_i + h H(t_i, E_i, Z_i), L_i, U_i).

    Subtracting ``E_i`` before the covariation regression leaves the
    conditional mean unchanged and removes most of its noise.
    """
    grid = bundle.grid
    if abs(grid.T - ts.T) > 1e-12 * ts.T:
        raise ConfigError("path bundle horizon differs from the terminal horizon")
    W = bundle.W
    N, M, h = grid.N, bundle.M, grid.h
    times = grid.nodes
    Y = np.empty((N + 1, M))
    Z = np.empty((N + 1, M))
    Y[N] = np.asarray(ts.g(W[N]), dtype=float)
    clamped = 0
    drive = np.zeros(M)
    if bounds is not None:
        lo, hi = bounds.state_range
        if W.min() < lo or W.max() > hi:
            raise ConfigError(
                f"paths reach [{W.min():.3g}, {W.max():.3g}] outside the envelope grid [{lo:.3g}, {hi:.3g}]")
        L, U = bounds.at(times[N], W[N])
        tol = 1e-9 * np.maximum(1.0, np.abs(Y[N]))
        if np.any(Y[N] < L - tol) or np.any(Y[N] > U + tol):
            raise ConfigError("terminal data lies outside the envelope bounds")
    for i in range(N - 1, -1, -1):
        state = W[i]
        basis = build_basis(state, K if K is not None else default_bins(M))
        E = regress_conditional(Y[i + 1], state, basis)
        Z[i] = regress_conditional((Y[i + 1] - E) * bundle.dW[i], state, basis) / h
        Hi = np.asarray(H(times[i], E, Z[i]), dtype=float)
        drive += h * Hi
        raw = E + h * Hi
        if bounds is not None:
            L, U = bounds.at(times[i], state)
            Y[i] = np.minimum(np.maximum(raw, L), U)
            clamped += int(np.count_nonzero(Y[i] != raw))
        else:
            Y[i] = raw
    Z[N] = Z[N - 1]
    surf = SolutionSurface("path_indexed", times, Y, Z, W=W, seed=bundle.seed,
                           clamp_fraction=clamped / (N * M))
    # standard error of Y_0 from the pathwise representation xi + sum h H
    surf.meta["y0_stderr"] = float(np.std(Y[N] + drive) / np.sqrt(M))
    return surf
