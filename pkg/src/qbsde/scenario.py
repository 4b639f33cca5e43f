"""BSDE instances: generators, terminal data, domination checks and assumption audits.

A generator is a sum of terms evaluated on numpy arrays, for example

    GeneratorSpec.from_terms(alpha(1.0), beta_abs_y(2.0), f_zsq(Constant(0.5)))

is ``H(t, y, z) = 1 + 2|y| + 0.5 z^2``.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import ConfigError, DomainError, PreconditionError, RangeError
from .function_model import (DeterministicProcessSpec, FunctionSpec, Tabulated, from_dict,
                             is_monotone, process_from)
from .mc_engine import TimeGrid, simulate_paths
from .transforms import build_u

# named smooth expressions usable as generator terms; (t, y, z) -> value
CUSTOM_EXPRESSIONS: dict[str, Callable] = {
    "y_abs_z": lambda t, y, z: y * np.abs(z),
    "y_log_abs_y": lambda t, y, z: y * np.abs(np.log(np.where(y != 0.0, np.abs(y), 1.0))),
    "linear_y": lambda t, y, z: y,
    "zsq": lambda t, y, z: z * z,
    "sin_y_zsq": lambda t, y, z: np.sin(y) * z * z,
}

TERM_KINDS = ("alpha", "beta_abs_y", "beta_y", "theta_abs_z", "f_zsq", "g_zp", "custom")


@dataclass(frozen=True, eq=False)
class Term:
    """One additive piece of a generator.

    ``proc`` carries the time coefficient for ``alpha``/``beta_abs_y``/
    ``beta_y``/``theta_abs_z``; ``fn`` the state function for ``f_zsq``
    (``sign * f(|y|) z^2``, or ``f(y)`` when ``abs_y`` is False) and ``g_zp``
    (``sign * g(y) |z|^p``); ``tag`` names a custom expression scaled by ``coef``.
    """

    kind: str
    proc: DeterministicProcessSpec | None = None
    fn: FunctionSpec | None = None
    sign: float = 1.0
    p: float = 2.0
    abs_y: bool = True
    tag: str | None = None
    coef: float = 1.0
    expr: Callable | None = None

    def __post_init__(self):
        if self.kind not in TERM_KINDS:
            raise ConfigError(f"unknown generator term {self.kind!r}")
        if self.kind in ("alpha", "beta_abs_y", "beta_y", "theta_abs_z") and self.proc is None:
            raise ConfigError(f"term {self.kind} needs a time coefficient")
        if self.kind in ("f_zsq", "g_zp") and self.fn is None:
            raise ConfigError(f"term {self.kind} needs a state function")
        if self.kind == "g_zp" and not (0.0 <= self.p < 2.0):
            raise ConfigError("g_zp exponent p must lie in [0, 2)")
        if self.kind == "custom":
            if self.expr is None and self.tag not in CUSTOM_EXPRESSIONS:
                raise ConfigError(f"unknown custom expression {self.tag!r}")

    def __call__(self, t, y, z):
        k = self.kind
        if k == "alpha":
            return self.proc(t) + 0.0 * y
        if k == "beta_abs_y":
            return self.proc(t) * np.abs(y)
        if k == "beta_y":
            return self.proc(t) * y
        if k == "theta_abs_z":
            return self.proc(t) * np.abs(z)
        if k == "f_zsq":
            arg = np.abs(y) if self.abs_y else y
            return self.sign * self.fn(arg) * z * z
        if k == "g_zp":
            return self.sign * self.fn(y) * np.abs(z) ** self.p
        expr = self.expr if self.expr is not None else CUSTOM_EXPRESSIONS[self.tag]
        return self.coef * expr(t, y, z)

    def to_dict(self) -> dict:
        d = {"kind": self.kind}
        if self.proc is not None:
            d["coef"] = self.proc.to_dict()
        if self.fn is not None:
            d["f"] = self.fn.to_dict()
        if self.kind in ("f_zsq", "g_zp"):
            d["sign"] = self.sign
        if self.kind == "f_zsq":
            d["abs_y"] = self.abs_y
        if self.kind == "g_zp":
            d["p"] = self.p
        if self.kind == "custom":
            if self.tag is None:
                raise ConfigError("callable custom terms cannot be serialised")
            d["tag"] = self.tag
            d["coef"] = self.coef
        return d


def alpha(proc) -> Term:
    return Term("alpha", proc=process_from(proc))


def beta_abs_y(proc) -> Term:
    return Term("beta_abs_y", proc=process_from(proc))


def beta_y(proc) -> Term:
    return Term("beta_y", proc=process_from(proc))


def theta_abs_z(proc) -> Term:
    return Term("theta_abs_z", proc=process_from(proc))


def f_zsq(f: FunctionSpec, sign: float = 1.0, abs_y: bool = True) -> Term:
    return Term("f_zsq", fn=f, sign=float(sign), abs_y=abs_y)


def g_zp(g: FunctionSpec, p: float, sign: float = 1.0) -> Term:
    return Term("g_zp", fn=g, p=float(p), sign=float(sign))


def custom(tag_or_fn, coef: float = 1.0) -> Term:
    if callable(tag_or_fn):
        return Term("custom", expr=tag_or_fn, coef=float(coef))
    return Term("custom", tag=str(tag_or_fn), coef=float(coef))


@dataclass(frozen=True, eq=False)
class GeneratorSpec:
    """``H(t, y, z) = scale * sum(terms)``; continuous in ``(y, z)`` by construction."""

    terms: tuple[Term, ...] = ()
    scale: float = 1.0

    @classmethod
    def from_terms(cls, *terms: Term) -> "GeneratorSpec":
        return cls(tuple(terms))

    @classmethod
    def zero(cls) -> "GeneratorSpec":
        return cls(())

    def __call__(self, t, y, z):
        y = np.asarray(y, dtype=float)
        z = np.asarray(z, dtype=float)
        out = np.zeros(np.broadcast(y, z).shape)
        for term in self.terms:
            out = out + term(t, y, z)
        return self.scale * out

    def __neg__(self):
        return GeneratorSpec(self.terms, -self.scale)

    def scaled(self, k: float) -> "GeneratorSpec":
        return GeneratorSpec(self.terms, self.scale * k)

    def __add__(self, other: "GeneratorSpec") -> "GeneratorSpec":
        if self.scale != 1.0 or other.scale != 1.0:
            raise ConfigError("only unscaled generators can be added")
        return GeneratorSpec(self.terms + other.terms)

    def time_breakpoints(self) -> np.ndarray:
        bps = [t.proc.breakpoints for t in self.terms if t.proc is not None]
        return np.unique(np.concatenate(bps)) if bps else np.array([0.0])

    def to_dict(self):
        d = {"terms": [t.to_dict() for t in self.terms]}
        if self.scale != 1.0:
            d["scale"] = self.scale
        return d

    @classmethod
    def from_dict(cls, d) -> "GeneratorSpec":
        if isinstance(d, list):
            d = {"terms": d}
        if not isinstance(d, dict) or "terms" not in d:
            raise ConfigError("generator must be a list of terms or a record with 'terms'")
        try:
            terms = [cls._term_from_dict(rec) for rec in d["terms"]]
        except (KeyError, TypeError, AttributeError) as exc:
            raise ConfigError(f"malformed generator term: {exc!r}") from None
        return cls(tuple(terms), float(d.get("scale", 1.0)))

    @staticmethod
    def _term_from_dict(rec) -> Term:
        kind = rec.get("kind")
        if kind in ("alpha", "beta_abs_y", "beta_y", "theta_abs_z"):
            return Term(kind, proc=process_from(rec.get("coef", 0.0)))
        if kind == "f_zsq":
            return f_zsq(from_dict(rec["f"]), rec.get("sign", 1.0), rec.get("abs_y", True))
        if kind == "g_zp":
            return g_zp(from_dict(rec["f"]), rec["p"], rec.get("sign", 1.0))
        if kind == "custom":
            return custom(rec["tag"], rec.get("coef", 1.0))
        raise ConfigError(f"unknown generator term {kind!r}")


@dataclass(frozen=True)
class TerminalSpec:
    """``xi = g(W_T)``."""

    g: FunctionSpec
    T: float = 1.0

    def __post_init__(self):
        if not self.T > 0:
            raise ConfigError("horizon T must be positive")

    def xi(self, w):
        return self.g(w)

    def xi_plus(self, w):
        return np.maximum(self.g(w), 0.0)

    def xi_minus(self, w):
        return np.maximum(-np.asarray(self.g(w)), 0.0)


def xi_alpha_beta(ts: TerminalSpec, a, b, w_T, variant: str = "abs"):
    """``(|xi| + int_0^T alpha) exp(int_0^T beta)``; ``variant`` in {abs, plus, minus}."""
    a, b = process_from(a), process_from(b)
    if variant == "abs":
        base = np.abs(ts.xi(w_T))
    elif variant == "plus":
        base = ts.xi_plus(w_T)
    elif variant == "minus":
        base = ts.xi_minus(w_T)
    else:
        raise ConfigError(f"unknown variant {variant!r}")
    out = (base + a.integral(0.0, ts.T)) * np.exp(b.integral(0.0, ts.T))
    return float(out) if np.ndim(out) == 0 else out


def combine_processes(fn, *procs: DeterministicProcessSpec) -> DeterministicProcessSpec:
    """Pointwise ``fn`` of piecewise-constant processes, on the union of breakpoints."""
    bp = np.unique(np.concatenate([p.breakpoints for p in procs]))
    vals = fn(*[np.asarray(p(bp)) for p in procs])
    return DeterministicProcessSpec(bp, np.asarray(vals, dtype=float))


def _require_increasing(f: FunctionSpec, R: float) -> None:
    if f.monotone_flag == "increasing":
        return
    if not is_monotone(f, 0.0, R, "increasing"):
        raise PreconditionError(
            "envelope generators need an increasing f on [0, R]; pass increasing_majorant(f, R, n)")


def dominating_coefficient(f: FunctionSpec, R: float, n: int = 4001) -> FunctionSpec:
    """Increasing ``phi`` on ``[0, R]`` with ``|f(y)| <= phi(|y|)`` for ``|y| <= R``."""
    if f.monotone_flag == "increasing" and is_monotone(f, -R, R, "increasing") \
            and float(f(-R)) >= 0.0:
        return f
    r = np.linspace(0.0, R, n)
    extra = [abs(b) for b in f.breakpoints() if abs(b) < R]
    r = np.unique(np.concatenate([r, extra]))
    vals = np.maximum(np.abs(f(r)), np.abs(f(-r)))
    # look one node ahead and add a curvature margin so the linear interpolant
    # also covers the function between nodes
    ahead = np.maximum(vals, np.append(vals[1:], vals[-1]))
    curv = np.abs(np.diff(vals, 2))
    curv = np.concatenate([curv[:1], curv, curv[-1:]])
    margin = np.maximum(curv, np.append(curv[1:], curv[-1]))
    upper = np.maximum.accumulate(ahead + margin)
    return Tabulated(r, upper, continuity_flag=True, monotone_flag="increasing")


def build_envelope_generators(a, b, th, f: FunctionSpec, R: float = 10.0):
    """``g = alpha + beta|y| + f(|y|) z^2`` and ``h = g + theta|z|``."""
    _require_increasing(f, R)
    a, b, th = process_from(a), process_from(b), process_from(th)
    base = (Term("alpha", proc=a), Term("beta_abs_y", proc=b), f_zsq(f))
    return GeneratorSpec(base), GeneratorSpec(base + (Term("theta_abs_z", proc=th),))


@dataclass(frozen=True, eq=False)
class DominationPair:
    """``H1 <= H <= H2`` with the growth bound ``|H| <= eta_t + C z^2``."""

    H1: GeneratorSpec
    H2: GeneratorSpec
    eta: DeterministicProcessSpec
    C: float


def envelope_pair(a, b, th, f: FunctionSpec, y_bound: float) -> DominationPair:
    """Pair ``(-h, h)`` with ``(eta, C)`` valid on ``|y| <= y_bound``.

    ``theta|z| <= theta^2/2 + z^2/2`` folds the linear term into the bound.
    """
    a, b, th = process_from(a), process_from(b), process_from(th)
    _, h = build_envelope_generators(a, b, th, f, max(y_bound, 1e-12))
    eta = combine_processes(lambda av, bv, tv: av + bv * y_bound + 0.5 * tv * tv, a, b, th)
    C = float(f(y_bound)) + (0.5 if np.any(th.values > 0) else 0.0)
    return DominationPair(-h, h, eta, C)


@dataclass(frozen=True)
class DominationReport:
    lower_excess: float
    upper_excess: float
    growth_excess: float
    n: int
    tol: float = 1e-12

    @property
    def passed(self) -> bool:
        return max(self.lower_excess, self.upper_excess, self.growth_excess) <= self.tol


def _box_points(box, n: int):
    """Tensor grid (odd count per axis, endpoints included) with at least n points."""
    m = max(3, int(np.ceil(n ** (1.0 / 3.0))))
    m += (m + 1) % 2
    axes = [np.linspace(lo, hi, m) for lo, hi in box]
    t, y, z = np.meshgrid(*axes, indexing="ij")
    return t.ravel(), y.ravel(), z.ravel()


def _eval_by_time(H, t, y, z):
    out = np.empty_like(y)
    for tv in np.unique(t):
        sel = t == tv
        out[sel] = H(float(tv), y[sel], z[sel])
    return out


def check_domination(H, pair: DominationPair, box, n: int = 1000) -> DominationReport:
    """Sampled check of ``H1 <= H <= H2`` and ``|H| <= eta + C z^2`` on ``box``.

    ``box`` is ``((t0, t1), (y0, y1), (z0, z1))``.
    """
    if n < 1000:
        raise PreconditionError("use at least 10^3 sample points")
    t, y, z = _box_points(box, n)
    h = _eval_by_time(H, t, y, z)
    h1 = _eval_by_time(pair.H1, t, y, z)
    h2 = _eval_by_time(pair.H2, t, y, z)
    bound = np.asarray(pair.eta(t)) + pair.C * z * z
    lower = float(np.max(np.maximum(h1 - h, 0.0)))
    upper = float(np.max(np.maximum(h - h2, 0.0)))
    growth = float(np.max(np.maximum(np.abs(h) - bound, 0.0)))
    return DominationReport(lower, upper, growth, t.size)


def _growth_check(H, bound_gen, box, n):
    t, y, z = _box_points(box, n)
    excess = np.abs(_eval_by_time(H, t, y, z)) - _eval_by_time(bound_gen, t, y, z)
    worst = float(np.max(excess))
    return worst <= 1e-12, max(worst, 0.0)


def check_A1(H, f: FunctionSpec, a, b, box, n: int = 1000):
    """``|H| <= alpha + beta|y| + f(|y|) z^2`` on the box; returns ``(ok, worst excess)``."""
    bound = GeneratorSpec((Term("alpha", proc=process_from(a)),
                           Term("beta_abs_y", proc=process_from(b)), f_zsq(f)))
    return _growth_check(H, bound, box, n)


def check_A3(H, f: FunctionSpec, a, b, th, box, n: int = 1000):
    """As ``check_A1`` with an extra ``theta|z|`` allowance."""
    bound = GeneratorSpec((Term("alpha", proc=process_from(a)),
                           Term("beta_abs_y", proc=process_from(b)),
                           Term("theta_abs_z", proc=process_from(th)), f_zsq(f)))
    return _growth_check(H, bound, box, n)


@dataclass(frozen=True)
class GirsanovControl:
    """Control with values in {-1, 0, 1} on equal sub-intervals of ``[0, T]``."""

    pattern: tuple[int, ...]

    def __post_init__(self):
        if not self.pattern or any(v not in (-1, 0, 1) for v in self.pattern):
            raise ConfigError("control values must lie in {-1, 0, 1}")

    @property
    def label(self) -> str:
        return "".join({-1: "-", 0: "0", 1: "+"}[v] for v in self.pattern)

    def on_grid(self, grid: TimeGrid) -> np.ndarray:
        k = len(self.pattern)
        idx = np.minimum((np.arange(grid.N) * k) // grid.N, k - 1)
        return np.asarray(self.pattern, dtype=float)[idx]


def default_control_family(pieces: int = 4) -> list[GirsanovControl]:
    return [GirsanovControl(p) for p in itertools.product((-1, 0, 1), repeat=pieces)]


def girsanov_weights(th, control: GirsanovControl, bundle) -> np.ndarray:
    """``exp(sum theta pi dW - 0.5 sum theta^2 pi^2 h)`` per path (theta at left step ends)."""
    grid = bundle.grid
    thv = np.asarray(process_from(th)(grid.nodes[:-1]), dtype=float)
    c = thv * control.on_grid(grid)
    return np.exp(c @ bundle.dW - 0.5 * grid.h * float(np.sum(c * c)))


@dataclass(frozen=True)
class MomentEstimate:
    mean: float
    stderr: float
    n: int
    divergence_flag: bool = False
    label: str = ""


@dataclass
class AssumptionReport:
    a1_ok: bool | None = None
    a1_worst: float | None = None
    a3_ok: bool | None = None
    a3_worst: float | None = None
    a2_estimate: MomentEstimate | None = None
    a4_estimate: MomentEstimate | None = None
    p: float | None = None
    p_moment: MomentEstimate | None = None
    a4_table: list = field(default_factory=list)
    notes: list = field(default_factory=list)

    @property
    def divergence_flag(self) -> bool:
        return any(e is not None and e.divergence_flag for e in (self.a2_estimate, self.a4_estimate))

    def csv_row(self) -> dict:
        row = {"a1_ok": self.a1_ok, "a1_worst": self.a1_worst,
               "a3_ok": self.a3_ok, "a3_worst": self.a3_worst}
        for name, est in (("a2", self.a2_estimate), ("a4", self.a4_estimate), ("p_moment", self.p_moment)):
            row[f"{name}_mean"] = None if est is None else est.mean
            row[f"{name}_stderr"] = None if est is None else est.stderr
            row[f"{name}_n"] = None if est is None else est.n
        row["a4_control"] = None if self.a4_estimate is None else self.a4_estimate.label
        row["p"] = self.p
        row["divergence_flag"] = self.divergence_flag
        return row

    def text(self) -> str:
        lines = ["assumption report"]
        if self.a1_ok is not None:
            lines.append(f"  (A1) growth bound: {'ok' if self.a1_ok else 'VIOLATED'} (worst excess {self.a1_worst:.3g})")
        if self.a3_ok is not None:
            lines.append(f"  (A3) growth bound: {'ok' if self.a3_ok else 'VIOLATED'} (worst excess {self.a3_worst:.3g})")
        if self.a2_estimate is not None:
            e = self.a2_estimate
            lines.append(f"  (A2) E u_f(xi_ab) ~ {e.mean:.6g} +/- {e.stderr:.2g} (n={e.n}, estimate_A2)"
                         f"{'  divergence suspected' if e.divergence_flag else ''}")
        if self.a4_estimate is not None:
            e = self.a4_estimate
            lines.append(f"  (A4) max over controls of E[Gamma u_f(xi_ab)] >= {e.mean:.6g} +/- {e.stderr:.2g}"
                         f" (n={e.n}, best control {e.label}, lower bound, estimate_A4)"
                         f"{'  divergence suspected' if e.divergence_flag else ''}")
        if self.p_moment is not None:
            e = self.p_moment
            lines.append(f"  E u_f(xi_ab)^p with p={self.p:g}: {e.mean:.6g} +/- {e.stderr:.2g}")
        lines.append(f"  divergence_flag={str(self.divergence_flag).lower()}")
        lines.extend(f"  note: {n}" for n in self.notes)
        return "\n".join(lines)


def doubling_divergence(samples: np.ndarray, m0: int = 128, factor: float = 2.0, trips: int = 2) -> bool:
    """Flag growth of the running mean over doubling sample sizes.

    Means are taken over the first ``m0, 2 m0, 4 m0, ...`` samples.  Each time
    the mean reaches ``factor`` times the reference level a growth event is
    counted and the reference moves up to the current mean; ``trips`` events
    raise the flag.
    """
    s = np.asarray(samples, dtype=float)
    if not np.all(np.isfinite(s)):
        return True
    sizes = []
    k = m0
    while k < s.size:
        sizes.append(k)
        k *= 2
    sizes.append(s.size)
    csum = np.cumsum(s)
    means = [csum[k - 1] / k for k in sizes]
    ref, events = means[0], 0
    for mval in means[1:]:
        if ref > 0 and mval >= factor * ref:
            events += 1
            ref = mval
    return events >= trips


def _summarize(samples: np.ndarray, label: str = "") -> MomentEstimate:
    n = samples.size
    if not np.all(np.isfinite(samples)):
        return MomentEstimate(float("inf"), float("inf"), n, True, label)
    mean = float(np.mean(samples))
    se = float(np.std(samples, ddof=1) / np.sqrt(n)) if n > 1 else float("inf")
    return MomentEstimate(mean, se, n, doubling_divergence(samples), label)


def _audit_bundle(seed: int, m: int, T: float, pieces: int = 4, steps_per_piece: int = 16):
    return simulate_paths(seed, m, TimeGrid(T, pieces * steps_per_piece))


def _transform_values(f: FunctionSpec, values: np.ndarray) -> np.ndarray:
    """``u_f`` at non-negative sample values; overflow becomes +inf."""
    top = float(np.max(values)) if values.size else 0.0
    R = max(1.0, 1.2 * top)
    n = int(np.clip(2.0 * R / 0.005, 2048, 200_000))
    try:
        t = build_u(f, R, n, detect_c=False)
    except DomainError:
        return np.full(values.shape, np.inf)
    try:
        return np.asarray(t.u(values), dtype=float)
    except RangeError as exc:
        raise RangeError(str(exc), valid_interval=exc.valid_interval, suggested_radius=2 * R) from None


def estimate_A2(f: FunctionSpec, ts: TerminalSpec, a, b, m: int = 100_000, seed: int = 0,
                p: float | None = None) -> AssumptionReport:
    """Monte Carlo estimate of ``E u_f(xi_ab)`` with the doubling divergence heuristic."""
    if m < 1000:
        raise PreconditionError("use at least 10^3 samples")
    bundle = _audit_bundle(seed, m, ts.T)
    vals = _transform_values(f, xi_alpha_beta(ts, a, b, bundle.W[-1]))
    rep = AssumptionReport(a2_estimate=_summarize(vals))
    if p is not None:
        if not p > 1:
            raise PreconditionError("moment exponent p must exceed 1")
        with np.errstate(over="ignore"):
            rep.p_moment = _summarize(np.abs(vals) ** p)
        rep.p = float(p)
    return rep


def estimate_A4(f: FunctionSpec, ts: TerminalSpec, a, b, th, family=None,
                m: int = 100_000, seed: int = 0) -> AssumptionReport:
    """Largest controlled mean ``E[Gamma^pi u_f(xi_ab)]`` over a finite family.

    The result is a lower bound of the supremum over all admissible controls.
    With the same seed the paths coincide with :func:`estimate_A2`.
    """
    if m < 1000:
        raise PreconditionError("use at least 10^3 samples")
    family = default_control_family() if family is None else list(family)
    bundle = _audit_bundle(seed, m, ts.T)
    vals = _transform_values(f, xi_alpha_beta(ts, a, b, bundle.W[-1]))
    table = [_summarize(girsanov_weights(th, ctrl, bundle) * vals, ctrl.label) for ctrl in family]
    best = max(table, key=lambda e: e.mean)
    rep = AssumptionReport(a4_estimate=best, a4_table=table)
    rep.notes.append(f"(A4) supremum approximated over {len(family)} piecewise-constant controls")
    return rep
