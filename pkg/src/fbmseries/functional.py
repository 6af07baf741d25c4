"""Symbolic functionals of a fractional Brownian path and their calculus.

An Expr is an immutable tree built from samples B_t, Wiener integrals
int f dB, time integrals int B ds and int B^2 ds, and the closure of those
under sums, products, integer powers, exp, and Hermite polynomials.  Three
operations drive everything else:

  * malliavin:   the fractional pathwise derivative D_u with a free variable
                 u; D_u B_t = 1_{[0,t]}(u), D_u int_a^b f dB = f(u) 1_{[a,b]}(u),
                 D_u int_a^b B ds = (b - max(a, u))^+, plus product, power,
                 and chain rules.
  * directional: the grid-time derivative at tau, which differentiates with
                 respect to every sample at a time >= tau (the derivative
                 direction is the indicator 1_{[0, t]} evaluated just left
                 of each sample).
  * freeze:      composition with the path stopped at r (B_s -> B_{min(s,r)});
                 time integrals split into their observed part on [a, min(b,r)]
                 plus B_{min(b,r)} times the remaining length.

Deterministic helper nodes (indicators, polynomials of a free variable,
ramps max(0, b - max(args)), deferred kernel moments) appear as derivative
output and as partially integrated kernel terms.  Evaluation on a path is
strict: sampling or integrating at a time that is not a grid point is an
error, never an interpolation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Union

import numpy as np

from .kernel import Interval, PiecewisePoly, phi, phi_poly_moment
from .special import hermite_eval


class EvalError(RuntimeError):
    pass


class OffGridTimeError(EvalError):
    """A sample or integral endpoint does not lie on the path grid."""


class UnboundVariableError(EvalError):
    """A free variable had no binding at evaluation time."""


class UnsupportedNodeError(RuntimeError):
    """The requested operation is not defined for this node kind."""


# ---------------------------------------------------------------------------
# node kinds


@dataclass(frozen=True)
class Const:
    value: float


@dataclass(frozen=True)
class FbmSample:
    """B_t for a fixed time t > 0 (t = 0 folds to the constant 0)."""

    t: float


@dataclass(frozen=True)
class FreeVar:
    name: str


@dataclass(frozen=True)
class WienerInt:
    """int_lo^hi f(s) dB_s with a deterministic piecewise-polynomial f."""

    weight: PiecewisePoly
    lo: float
    hi: float


@dataclass(frozen=True)
class TimeIntB:
    """int_{max(lower)}^{upper} B_s ds; lower mixes constants and variable names."""

    lower: tuple
    upper: float


@dataclass(frozen=True)
class TimeIntBSq:
    """int_lo^hi B_s^2 ds."""

    lo: float
    hi: float


@dataclass(frozen=True)
class RampMax:
    """max(0, cap - max(args)); args mix constants and variable names."""

    cap: float
    args: tuple


@dataclass(frozen=True)
class Indicator:
    """1_{[lo, hi]}(var)."""

    var: str
    lo: float
    hi: float


@dataclass(frozen=True)
class PolyInVar:
    """Polynomial in a free variable, ascending coefficients."""

    coeffs: tuple
    var: str


@dataclass(frozen=True)
class HermitePoly:
    """h_n(arg) in the probabilists' normalization, kept unexpanded for stability."""

    degree: int
    arg: "Expr"


@dataclass(frozen=True)
class Sum:
    terms: tuple


@dataclass(frozen=True)
class Product:
    factors: tuple


@dataclass(frozen=True)
class Power:
    base: "Expr"
    exponent: int

    def __post_init__(self):
        if not isinstance(self.exponent, int) or self.exponent < 0:
            raise ValueError("Power exponent must be a nonnegative integer")


@dataclass(frozen=True)
class Exp:
    arg: "Expr"


@dataclass(frozen=True)
class PhiMoment:
    """Deferred exact kernel moment int_lo^hi w(u) phi_H(u, partner) du.

    factors are deterministic functions of the integration variable ivar
    (their breakpoints may involve other free variables); the closed form
    is produced at evaluation time once every other variable is bound.
    """

    factors: tuple
    ivar: str
    lo: float
    hi: float
    partner: str


@dataclass(frozen=True)
class UIntegral:
    """Residual int_lo^hi (prod factors)(u) phi_H(u, partner) du, numeric at eval.

    Used when the integrand is not deterministic in u, so no closed form
    applies; evaluation falls back to singularity-split Gauss panels.
    """

    factors: tuple
    ivar: str
    lo: float
    hi: float
    partner: str


Expr = Union[Const, FbmSample, FreeVar, WienerInt, TimeIntB, TimeIntBSq,
             RampMax, Indicator, PolyInVar, HermitePoly, Sum, Product,
             Power, Exp, PhiMoment, UIntegral]

ZERO = Const(0.0)
ONE = Const(1.0)


# ---------------------------------------------------------------------------
# smart constructors (constant folding only, no deeper rewriting)


def fbm_sample(t: float) -> Expr:
    t = float(t)
    if t < 0.0:
        raise ValueError("sample times must be >= 0")
    return ZERO if t == 0.0 else FbmSample(t)


def _split_args(args: Iterable) -> tuple:
    """Canonicalize a max() argument list: constants folded, names sorted."""
    consts, names = [], []
    for a in args:
        if isinstance(a, str):
            names.append(a)
        else:
            consts.append(float(a))
    out = ([max(consts)] if consts else []) + sorted(set(names))
    if not out:
        raise ValueError("empty max() argument list")
    return tuple(out)


def ramp_max(cap: float, args: Iterable) -> Expr:
    args = _split_args(args)
    cap = float(cap)
    if all(not isinstance(a, str) for a in args):
        return Const(max(0.0, cap - args[0]))
    if not isinstance(args[0], str) and args[0] >= cap:
        return ZERO
    return RampMax(cap, args)


def time_int_b(lower: Iterable, upper: float) -> Expr:
    lower = _split_args(lower)
    upper = float(upper)
    if upper <= 0.0:
        return ZERO
    if not isinstance(lower[0], str) and lower[0] >= upper:
        return ZERO
    return TimeIntB(lower, upper)


def make_sum(terms: Iterable[Expr]) -> Expr:
    flat = []
    const = 0.0
    for t in terms:
        if isinstance(t, Sum):
            inner = list(t.terms)
        else:
            inner = [t]
        for u in inner:
            if isinstance(u, Const):
                const += u.value
            else:
                flat.append(u)
    if const != 0.0 or not flat:
        flat.append(Const(const))
    return flat[0] if len(flat) == 1 else Sum(tuple(flat))


def make_product(factors: Iterable[Expr]) -> Expr:
    flat = []
    const = 1.0
    for f in factors:
        items = list(f.factors) if isinstance(f, Product) else [f]
        for u in items:
            if isinstance(u, Const):
                const *= u.value
            else:
                flat.append(u)
    if const == 0.0:
        return ZERO
    if const != 1.0:
        flat.insert(0, Const(const))
    if not flat:
        return ONE
    return flat[0] if len(flat) == 1 else Product(tuple(flat))


def make_power(base: Expr, exponent: int) -> Expr:
    exponent = int(exponent)
    if exponent == 0:
        return ONE
    if exponent == 1:
        return base
    if isinstance(base, Const):
        return Const(base.value ** exponent)
    return Power(base, exponent)


def make_exp(arg: Expr) -> Expr:
    if isinstance(arg, Const):
        return Const(math.exp(arg.value))
    return Exp(arg)


def scale(expr: Expr, c: float) -> Expr:
    return make_product([Const(float(c)), expr])


def hermite_factor(degree: int, arg: Expr) -> Expr:
    if degree == 0:
        return ONE
    if degree == 1:
        return arg
    return HermitePoly(degree, arg)


def collect_terms(expr: Expr) -> Expr:
    """Combine sum terms that agree up to a constant factor.

    Repeated differentiation of products grows sums exponentially unless
    duplicates produced by the product rule are merged; nodes are frozen
    dataclasses, so the non-constant part itself serves as the bucket key.
    """
    if not isinstance(expr, Sum):
        return expr
    buckets = {}
    for t in expr.terms:
        coeff, rest = 1.0, t
        if isinstance(t, Product) and isinstance(t.factors[0], Const):
            coeff = t.factors[0].value
            tail = t.factors[1:]
            rest = tail[0] if len(tail) == 1 else Product(tail)
        elif isinstance(t, Const):
            coeff, rest = t.value, ONE
        if rest in buckets:
            buckets[rest][0] += coeff
        else:
            buckets[rest] = [coeff]
    return make_sum([scale(r, c) for r, (c,) in buckets.items() if c != 0.0])


# ---------------------------------------------------------------------------
# structural queries


def children(expr: Expr) -> tuple:
    if isinstance(expr, Sum):
        return expr.terms
    if isinstance(expr, Product):
        return expr.factors
    if isinstance(expr, Power):
        return (expr.base,)
    if isinstance(expr, (Exp, HermitePoly)):
        return (expr.arg,)
    if isinstance(expr, (PhiMoment, UIntegral)):
        return expr.factors
    return ()


def fbm_times(expr: Expr) -> set:
    """Times of every B_t sample appearing in the tree."""
    if isinstance(expr, FbmSample):
        return {expr.t}
    out = set()
    for c in children(expr):
        out |= fbm_times(c)
    return out


def horizon(expr: Expr) -> float:
    """Largest time constant mentioned anywhere (samples and integral limits)."""
    top = 0.0
    if isinstance(expr, FbmSample):
        top = expr.t
    elif isinstance(expr, WienerInt):
        top = expr.hi
    elif isinstance(expr, TimeIntB):
        top = max([expr.upper] + [a for a in expr.lower if not isinstance(a, str)])
    elif isinstance(expr, TimeIntBSq):
        top = expr.hi
    elif isinstance(expr, (RampMax,)):
        top = max([expr.cap] + [a for a in expr.args if not isinstance(a, str)])
    for c in children(expr):
        top = max(top, horizon(c))
    return top


def is_discrete(expr: Expr) -> bool:
    """True when the only random dependence is through B_t samples."""
    if isinstance(expr, (WienerInt, TimeIntB, TimeIntBSq, UIntegral)):
        return False
    return all(is_discrete(c) for c in children(expr))


def is_deterministic(expr: Expr) -> bool:
    if isinstance(expr, (FbmSample, WienerInt, TimeIntB, TimeIntBSq)):
        return False
    return all(is_deterministic(c) for c in children(expr))


def free_vars(expr: Expr) -> set:
    out = set()
    if isinstance(expr, FreeVar):
        out.add(expr.name)
    elif isinstance(expr, Indicator):
        out.add(expr.var)
    elif isinstance(expr, PolyInVar):
        out.add(expr.var)
    elif isinstance(expr, (TimeIntB,)):
        out |= {a for a in expr.lower if isinstance(a, str)}
    elif isinstance(expr, RampMax):
        out |= {a for a in expr.args if isinstance(a, str)}
    elif isinstance(expr, (PhiMoment, UIntegral)):
        out.add(expr.partner)
        for f in expr.factors:
            out |= free_vars(f)
        out.discard(expr.ivar)
        return out
    for c in children(expr):
        out |= free_vars(c)
    return out


def depends_on_var(expr: Expr, name: str) -> bool:
    return name in free_vars(expr)


# ---------------------------------------------------------------------------
# Malliavin derivative with a free variable


def malliavin(expr: Expr, var: str) -> Expr:
    """Fractional pathwise derivative D_var, var ranging over [0, horizon]."""
    if isinstance(expr, (Const, FreeVar, RampMax, Indicator, PolyInVar, PhiMoment)):
        return ZERO
    if isinstance(expr, FbmSample):
        return Indicator(var, 0.0, expr.t)
    if isinstance(expr, WienerInt):
        terms = []
        for a, b, c in expr.weight.pieces():
            aa, bb = max(a, expr.lo), min(b, expr.hi)
            if aa < bb:
                terms.append(make_product([PolyInVar(tuple(float(x) for x in c), var),
                                           Indicator(var, aa, bb)]))
        return make_sum(terms)
    if isinstance(expr, TimeIntB):
        return ramp_max(expr.upper, expr.lower + (var,))
    if isinstance(expr, TimeIntBSq):
        return scale(time_int_b((expr.lo, var), expr.hi), 2.0)
    if isinstance(expr, HermitePoly):
        return make_product([Const(float(expr.degree)),
                             hermite_factor(expr.degree - 1, expr.arg),
                             malliavin(expr.arg, var)])
    if isinstance(expr, Sum):
        return make_sum(malliavin(t, var) for t in expr.terms)
    if isinstance(expr, Product):
        terms = []
        for i, f in enumerate(expr.factors):
            d = malliavin(f, var)
            if d != ZERO:
                rest = expr.factors[:i] + expr.factors[i + 1:]
                terms.append(make_product(list(rest) + [d]))
        return make_sum(terms)
    if isinstance(expr, Power):
        return make_product([Const(float(expr.exponent)),
                             make_power(expr.base, expr.exponent - 1),
                             malliavin(expr.base, var)])
    if isinstance(expr, Exp):
        return make_product([expr, malliavin(expr.arg, var)])
    raise UnsupportedNodeError(f"malliavin undefined for {type(expr).__name__}")


def directional(expr: Expr, tau: float) -> Expr:
    """Grid-time derivative at tau: d/dB applied to every sample at time >= tau."""
    if isinstance(expr, (Const, FreeVar, RampMax, Indicator, PolyInVar, PhiMoment)):
        return ZERO
    if isinstance(expr, FbmSample):
        return ONE if tau <= expr.t else ZERO
    if isinstance(expr, WienerInt):
        if expr.lo <= tau <= expr.hi:
            return Const(float(expr.weight(tau)))
        return ZERO
    if isinstance(expr, TimeIntB):
        return ramp_max(expr.upper, expr.lower + (float(tau),))
    if isinstance(expr, TimeIntBSq):
        return scale(time_int_b((expr.lo, float(tau)), expr.hi), 2.0)
    if isinstance(expr, HermitePoly):
        return make_product([Const(float(expr.degree)),
                             hermite_factor(expr.degree - 1, expr.arg),
                             directional(expr.arg, tau)])
    if isinstance(expr, Sum):
        return make_sum(directional(t, tau) for t in expr.terms)
    if isinstance(expr, Product):
        terms = []
        for i, f in enumerate(expr.factors):
            d = directional(f, tau)
            if d != ZERO:
                rest = expr.factors[:i] + expr.factors[i + 1:]
                terms.append(make_product(list(rest) + [d]))
        return make_sum(terms)
    if isinstance(expr, Power):
        return make_product([Const(float(expr.exponent)),
                             make_power(expr.base, expr.exponent - 1),
                             directional(expr.base, tau)])
    if isinstance(expr, Exp):
        return make_product([expr, directional(expr.arg, tau)])
    raise UnsupportedNodeError(f"directional undefined for {type(expr).__name__}")


# ---------------------------------------------------------------------------
# freezing: composition with the path stopped at r


def freeze(expr: Expr, r: float) -> Expr:
    r = float(r)
    if r < 0.0:
        raise ValueError("freeze time must be >= 0")
    if isinstance(expr, (Const, FreeVar, RampMax, Indicator, PolyInVar, PhiMoment)):
        return expr
    if isinstance(expr, FbmSample):
        return fbm_sample(min(expr.t, r))
    if isinstance(expr, WienerInt):
        hi = min(expr.hi, r)
        if hi <= expr.lo:
            return ZERO
        return WienerInt(expr.weight, expr.lo, hi)
    if isinstance(expr, TimeIntB):
        c = min(expr.upper, r)
        observed = time_int_b(expr.lower, c)
        tail = make_product([fbm_sample(c),
                             ramp_max(expr.upper, expr.lower + (c,))])
        return make_sum([observed, tail])
    if isinstance(expr, TimeIntBSq):
        c = min(expr.hi, r)
        observed = TimeIntBSq(expr.lo, c) if c > expr.lo else ZERO
        tail = make_product([make_power(fbm_sample(c), 2),
                             Const(max(0.0, expr.hi - max(expr.lo, c)))])
        return make_sum([observed, tail])
    if isinstance(expr, HermitePoly):
        return hermite_factor(expr.degree, freeze(expr.arg, r))
    if isinstance(expr, Sum):
        return make_sum(freeze(t, r) for t in expr.terms)
    if isinstance(expr, Product):
        return make_product(freeze(f, r) for f in expr.factors)
    if isinstance(expr, Power):
        return make_power(freeze(expr.base, r), expr.exponent)
    if isinstance(expr, Exp):
        return make_exp(freeze(expr.arg, r))
    if isinstance(expr, UIntegral):
        return UIntegral(tuple(freeze(f, r) for f in expr.factors),
                         expr.ivar, expr.lo, expr.hi, expr.partner)
    raise UnsupportedNodeError(f"freeze undefined for {type(expr).__name__}")


# ---------------------------------------------------------------------------
# time grids and paths


@dataclass(frozen=True)
class TimeGrid:
    """Strictly increasing times (t_0, ..., t_J) with t_0 = 0."""

    times: tuple

    def __post_init__(self):
        ts = tuple(float(t) for t in self.times)
        if len(ts) < 2 or ts[0] != 0.0:
            raise ValueError("grid must start at 0 and contain at least one cell")
        for a, b in zip(ts, ts[1:]):
            if not (a < b):
                raise ValueError("grid times must be strictly increasing")
        object.__setattr__(self, "times", ts)

    @property
    def n_cells(self) -> int:
        return len(self.times) - 1

    @property
    def final_time(self) -> float:
        return self.times[-1]

    def cell(self, i: int) -> tuple:
        """Cell i in 1-based indexing: (t_{i-1}, t_i)."""
        if not (1 <= i <= self.n_cells):
            raise IndexError(f"cell index {i} outside 1..{self.n_cells}")
        return self.times[i - 1], self.times[i]

    def locate(self, r: float) -> int:
        """1-based index of the cell whose right-closed interval contains r.

        r = 0 belongs to the first cell; interior grid points belong to the
        cell they terminate.
        """
        r = float(r)
        if r < 0.0 or r > self.final_time:
            raise ValueError(f"r = {r} outside [0, {self.final_time}]")
        if r == 0.0:
            return 1
        for i in range(1, self.n_cells + 1):
            if self.times[i - 1] < r <= self.times[i]:
                return i
        raise AssertionError("unreachable")

    def refine(self, k: int) -> "TimeGrid":
        """Subdivide every cell into k equal parts."""
        if k < 1:
            raise ValueError("refinement factor must be >= 1")
        out = [0.0]
        for a, b in zip(self.times, self.times[1:]):
            for j in range(1, k + 1):
                out.append(a + (b - a) * j / k)
        return TimeGrid(tuple(out))

    def with_times(self, extra: Iterable[float]) -> "TimeGrid":
        ts = sorted(set(self.times) | {float(t) for t in extra if float(t) > 0.0})
        return TimeGrid(tuple([0.0] + [t for t in ts if t > 0.0]))


class GridPath:
    """Path values on a fixed grid; values may be vectors (one entry per path).

    Lookup is strict: a time that is not exactly a grid time raises
    OffGridTimeError rather than interpolating.
    """

    def __init__(self, times, values):
        self.times = tuple(float(t) for t in times)
        self.values = np.asarray(values, dtype=float)
        if self.values.shape[-1] != len(self.times):
            raise ValueError("values last axis must match the number of times")
        self._index = {t: i for i, t in enumerate(self.times)}

    def index_of(self, t: float) -> int:
        i = self._index.get(float(t))
        if i is None:
            raise OffGridTimeError(f"time {t} is not on the path grid")
        return i

    def value(self, t: float):
        return self.values[..., self.index_of(t)]

    def trapezoid(self, transform, lo: float, hi: float):
        """Trapezoid rule of transform(B) between two grid times."""
        i, j = self.index_of(lo), self.index_of(hi)
        if j < i:
            raise ValueError("integral limits out of order")
        ts = np.asarray(self.times[i:j + 1])
        vals = transform(self.values[..., i:j + 1])
        return np.trapezoid(vals, ts, axis=-1)

    def stieltjes(self, weight, lo: float, hi: float):
        """Riemann-Stieltjes sum sum f(midpoint) dB over grid cells in [lo, hi]."""
        i, j = self.index_of(lo), self.index_of(hi)
        ts = np.asarray(self.times[i:j + 1])
        mids = 0.5 * (ts[:-1] + ts[1:])
        f = np.asarray([weight(m) for m in mids])
        db = np.diff(self.values[..., i:j + 1], axis=-1)
        return np.sum(f * db, axis=-1)


def path_from_dict(values: dict) -> GridPath:
    """Build a single path from a {time: value} mapping; 0 is added if missing."""
    d = {0.0: 0.0} | {float(t): float(v) for t, v in values.items()}
    ts = sorted(d)
    return GridPath(ts, [d[t] for t in ts])


# ---------------------------------------------------------------------------
# evaluation


def _resolve_args(args, bindings):
    out = []
    for a in args:
        if isinstance(a, str):
            if bindings is None or a not in bindings:
                raise UnboundVariableError(f"unbound variable '{a}'")
            out.append(float(bindings[a]))
        else:
            out.append(float(a))
    return out


def factor_to_pwpoly(factor: Expr, ivar: str, lo: float, hi: float,
                     bindings) -> "PiecewisePoly | float | None":
    """Concrete piecewise polynomial (in ivar over [lo, hi]) for one factor.

    Returns a float for factors constant in ivar and None for an identically
    zero restriction.
    """
    if isinstance(factor, Const):
        return factor.value
    if isinstance(factor, Indicator):
        if factor.var != ivar:
            v = _resolve_args([factor.var], bindings)[0]
            return 1.0 if factor.lo <= v <= factor.hi else 0.0
        aa, bb = max(factor.lo, lo), min(factor.hi, hi)
        return PiecewisePoly.indicator(aa, bb) if aa < bb else None
    if isinstance(factor, PolyInVar):
        if factor.var != ivar:
            v = _resolve_args([factor.var], bindings)[0]
            return float(np.polynomial.polynomial.polyval(v, np.asarray(factor.coeffs)))
        return PiecewisePoly.from_poly(factor.coeffs, lo, hi) if lo < hi else None
    if isinstance(factor, RampMax):
        names = [a for a in factor.args if isinstance(a, str)]
        if ivar not in names:
            vals = _resolve_args(factor.args, bindings)
            return max(0.0, factor.cap - max(vals))
        others = [a for a in factor.args if a != ivar]
        floor = max(_resolve_args(others, bindings)) if others else 0.0
        cap = factor.cap
        if floor >= cap:
            return None
        # w(u) = cap - max(floor, u): constant below floor, linear to cap, 0 after
        pieces_lo, pieces_hi = max(lo, 0.0), min(hi, cap)
        breaks, coeffs = [pieces_lo], []
        knee = min(max(floor, pieces_lo), pieces_hi)
        if knee > pieces_lo:
            breaks.append(knee)
            coeffs.append((cap - floor,))
        if pieces_hi > knee:
            breaks.append(pieces_hi)
            coeffs.append((cap, -1.0))
        if not coeffs:
            return None
        return PiecewisePoly(tuple(breaks), tuple(coeffs))
    raise UnsupportedNodeError(
        f"{type(factor).__name__} is not a deterministic factor in '{ivar}'")


def _combine_pwpoly(factors, ivar, lo, hi, bindings):
    """Product of factor polynomials; (scale, PiecewisePoly|None)."""
    scale_val = 1.0
    poly = None
    for f in factors:
        res = factor_to_pwpoly(f, ivar, lo, hi, bindings)
        if res is None:
            return 0.0, None
        if isinstance(res, float):
            scale_val *= res
            if scale_val == 0.0:
                return 0.0, None
        else:
            poly = res if poly is None else poly.mul(res)
            if poly is None:
                return 0.0, None
    if poly is None:
        poly = PiecewisePoly.indicator(lo, hi) if lo < hi else None
        if poly is None:
            return 0.0, None
    return scale_val, poly


def evaluate(expr: Expr, h=None, path: "GridPath | None" = None,
             bindings: "dict | None" = None):
    """Evaluate on a path (scalar or vectorized across an ensemble).

    h is only needed for deferred kernel nodes; bindings supply free
    variables.  Every time lookup is strict to the path grid.
    """
    if isinstance(expr, Const):
        return expr.value
    if isinstance(expr, FbmSample):
        if path is None:
            raise EvalError("path required to evaluate B_t")
        return path.value(expr.t)
    if isinstance(expr, FreeVar):
        return _resolve_args([expr.name], bindings)[0]
    if isinstance(expr, Indicator):
        v = _resolve_args([expr.var], bindings)[0]
        return 1.0 if expr.lo <= v <= expr.hi else 0.0
    if isinstance(expr, PolyInVar):
        v = _resolve_args([expr.var], bindings)[0]
        return float(np.polynomial.polynomial.polyval(v, np.asarray(expr.coeffs)))
    if isinstance(expr, RampMax):
        vals = _resolve_args(expr.args, bindings)
        return max(0.0, expr.cap - max(vals))
    if isinstance(expr, WienerInt):
        if path is None:
            raise EvalError("path required to evaluate a Wiener integral")
        return path.stieltjes(expr.weight, expr.lo, expr.hi)
    if isinstance(expr, TimeIntB):
        if path is None:
            raise EvalError("path required to evaluate a time integral")
        lo = max(_resolve_args(expr.lower, bindings))
        if lo >= expr.upper:
            return 0.0
        return path.trapezoid(lambda b: b, lo, expr.upper)
    if isinstance(expr, TimeIntBSq):
        if path is None:
            raise EvalError("path required to evaluate a time integral")
        return path.trapezoid(lambda b: b * b, expr.lo, expr.hi)
    if isinstance(expr, HermitePoly):
        return hermite_eval(expr.degree, evaluate(expr.arg, h, path, bindings))
    if isinstance(expr, Sum):
        acc = 0.0
        for t in expr.terms:
            acc = acc + evaluate(t, h, path, bindings)
        return acc
    if isinstance(expr, Product):
        acc = 1.0
        for f in expr.factors:
            acc = acc * evaluate(f, h, path, bindings)
        return acc
    if isinstance(expr, Power):
        return evaluate(expr.base, h, path, bindings) ** expr.exponent
    if isinstance(expr, Exp):
        return np.exp(evaluate(expr.arg, h, path, bindings))
    if isinstance(expr, PhiMoment):
        if h is None:
            raise EvalError("Hurst index required to evaluate a kernel moment")
        v = _resolve_args([expr.partner], bindings)[0]
        scale_val, poly = _combine_pwpoly(expr.factors, expr.ivar,
                                          expr.lo, expr.hi, bindings)
        if poly is None or scale_val == 0.0:
            return 0.0
        return scale_val * phi_poly_moment(poly, Interval(expr.lo, expr.hi), v, h)
    if isinstance(expr, UIntegral):
        if h is None:
            raise EvalError("Hurst index required to evaluate a kernel integral")
        return _eval_u_integral(expr, h, path, bindings)
    raise UnsupportedNodeError(f"evaluate undefined for {type(expr).__name__}")


def _eval_u_integral(node: UIntegral, h, path, bindings):
    """Singularity-absorbing quadrature for a residual u-integral."""
    from .quadrature import phi_weighted_integral

    v = _resolve_args([node.partner], bindings)[0]
    integrand = make_product(list(node.factors))

    def f(us):
        out = []
        for u in np.atleast_1d(us):
            b2 = dict(bindings or {})
            b2[node.ivar] = float(u)
            out.append(np.asarray(evaluate(integrand, h, path, b2), dtype=float))
        return np.stack(out, axis=-1)

    # kinks sit where ramp/indicator breakpoints fall inside the range
    breaks = set()
    for fac in node.factors:
        if isinstance(fac, Indicator):
            breaks |= {fac.lo, fac.hi}
        elif isinstance(fac, RampMax):
            breaks.add(fac.cap)
            breaks |= {_resolve_args([a], bindings)[0]
                       for a in fac.args if a != node.ivar}
    return phi_weighted_integral(f, node.lo, node.hi, v, _hcheck(h),
                                 breaks=sorted(breaks), rel_tol=1e-10)


def _hcheck(h) -> float:
    from .kernel import _hval
    return _hval(h)


# ---------------------------------------------------------------------------
# expansion into a flat sum of products


def expand(expr: Expr) -> list:
    """Distribute products over sums; returns the flat list of product terms."""
    if isinstance(expr, Sum):
        out = []
        for t in expr.terms:
            out.extend(expand(t))
        return out
    if isinstance(expr, Product):
        parts = [expand(f) for f in expr.factors]
        terms = [ONE]
        for alternatives in parts:
            terms = [make_product([acc, alt]) for acc in terms for alt in alternatives]
        return terms
    return [expr]


def product_factors(term: Expr) -> tuple:
    return term.factors if isinstance(term, Product) else (term,)


# ---------------------------------------------------------------------------
# canonical S-expression serialization (golden-test format)


def _fmt(x: float) -> str:
    return repr(float(x))


def _name(n, rename) -> str:
    return rename.get(n, n) if rename else n


def to_sexpr(expr: Expr, rename: "dict | None" = None) -> str:
    """Canonical S-expression text; rename maps variable names (for matching)."""
    if isinstance(expr, Const):
        return _fmt(expr.value)
    if isinstance(expr, FbmSample):
        return f"(B {_fmt(expr.t)})"
    if isinstance(expr, FreeVar):
        return f"(var {_name(expr.name, rename)})"
    if isinstance(expr, WienerInt):
        pieces = " ".join(
            f"({_fmt(a)} {_fmt(b)} {' '.join(_fmt(c) for c in cs)})"
            for a, b, cs in expr.weight.pieces())
        return f"(WI ({pieces}) {_fmt(expr.lo)} {_fmt(expr.hi)})"
    if isinstance(expr, TimeIntB):
        args = " ".join(_name(a, rename) if isinstance(a, str) else _fmt(a)
                        for a in expr.lower)
        return f"(IB (max {args}) {_fmt(expr.upper)})"
    if isinstance(expr, TimeIntBSq):
        return f"(IB2 {_fmt(expr.lo)} {_fmt(expr.hi)})"
    if isinstance(expr, RampMax):
        args = " ".join(_name(a, rename) if isinstance(a, str) else _fmt(a)
                        for a in expr.args)
        return f"(ramp {_fmt(expr.cap)} (max {args}))"
    if isinstance(expr, Indicator):
        return f"(ind {_name(expr.var, rename)} {_fmt(expr.lo)} {_fmt(expr.hi)})"
    if isinstance(expr, PolyInVar):
        cs = " ".join(_fmt(c) for c in expr.coeffs)
        return f"(poly {_name(expr.var, rename)} {cs})"
    if isinstance(expr, HermitePoly):
        return f"(hermite {expr.degree} {to_sexpr(expr.arg, rename)})"
    if isinstance(expr, Sum):
        return "(+ " + " ".join(to_sexpr(t, rename) for t in expr.terms) + ")"
    if isinstance(expr, Product):
        return "(* " + " ".join(to_sexpr(f, rename) for f in expr.factors) + ")"
    if isinstance(expr, Power):
        return f"(^ {to_sexpr(expr.base, rename)} {expr.exponent})"
    if isinstance(expr, Exp):
        return f"(exp {to_sexpr(expr.arg, rename)})"
    if isinstance(expr, PhiMoment):
        inner = " ".join(to_sexpr(f, rename) for f in expr.factors)
        return (f"(phimom {_name(expr.partner, rename)} {_name(expr.ivar, rename)} "
                f"{_fmt(expr.lo)} {_fmt(expr.hi)} ({inner}))")
    if isinstance(expr, UIntegral):
        inner = " ".join(to_sexpr(f, rename) for f in expr.factors)
        return (f"(uint {_name(expr.partner, rename)} {_name(expr.ivar, rename)} "
                f"{_fmt(expr.lo)} {_fmt(expr.hi)} ({inner}))")
    raise UnsupportedNodeError(f"to_sexpr undefined for {type(expr).__name__}")


# ---------------------------------------------------------------------------
# grid partial derivatives


def grid_partials(expr: Expr, grid: TimeGrid, q: tuple) -> Expr:
    """Iterated grid-time derivative D^q = D_{t_1}^{q_1} ... D_{t_J}^{q_J}.

    Requires a discrete functional whose sample times lie on the grid; each
    D_{t_i} differentiates with respect to every sample at time >= t_i.
    """
    if not is_discrete(expr):
        raise UnsupportedNodeError("grid partials require a discrete functional")
    stray = fbm_times(expr) - set(grid.times)
    if stray:
        raise ValueError(f"sample times {sorted(stray)} are not grid times")
    if len(q) != grid.n_cells:
        raise ValueError("multi-index length must equal the number of grid cells")
    out = expr
    for i, qi in enumerate(q):
        tau = grid.times[i + 1]
        for _ in range(int(qi)):
            out = directional(out, tau)
            if out == ZERO:
                return ZERO
    return out
