"""Conditional expectations by iterated second-order kernel integration.

For a functional F of the path on [0, T] and a conditioning time r, the
conditional expectation admits the series

    E~[F | F_r] = sum_{i >= 0} int_{r <= v_1 <= ... <= v_i <= T}
                  (A_{v_i} ... A_{v_1} F)(gamma^r)  dv_1 ... dv_i

where gamma^r is the path frozen at r (samples and integrals truncated to
what is observed by r) and each application of

    A_v(X) = 1/2 ( int_0^T du + int_0^r du )  D_u D_v X  phi_H(u, v)

removes two Malliavin derivatives.  The u-integrals commute with the
outstanding derivatives and with freezing, so level i needs only the frozen
2i-th derivative D_{u_i} D_{v_i} ... D_{u_1} D_{v_1} F (gamma^r): each u_k
is integrated against phi_H(u_k, v_k) over the averaged range and the v's
over the ordered simplex.  Three routes are tried per product term:

  * exact      - one v variable with piecewise-polynomial u and v factors:
                 closed-form double kernel moments;
  * factorized - the term splits into i identical single-level clusters g,
                 so the symmetric simplex integral collapses to
                 (int g dv)^i / i!;
  * quadrature - nested adaptive panels over the simplex (dimension <= 3);
                 residual u-integrals use exact kernel moments when the u
                 factors are piecewise polynomial and singularity-absorbing
                 panels otherwise.

Terms outside all three routes raise EngineError.
"""

from __future__ import annotations

import math

import numpy as np

from .functional import (
    Const,
    Expr,
    GridPath,
    Indicator,
    PhiMoment,
    PolyInVar,
    RampMax,
    Sum,
    TimeIntB,
    UIntegral,
    ZERO,
    _combine_pwpoly,
    children,
    collect_terms,
    evaluate,
    expand,
    free_vars,
    freeze,
    horizon,
    is_deterministic,
    make_product,
    make_sum,
    malliavin,
    product_factors,
    scale,
    to_sexpr,
)
from .kernel import _hval, poly_rect_integral
from .quadrature import adaptive_panels, gauss_nodes, graded_points, nested_simplex
from .results import SeriesResult


class EngineError(RuntimeError):
    """A level integrand falls outside every implemented integration route."""


# factor kinds with an exact piecewise-polynomial restriction in one variable
_PW_FACTORS = (Const, Indicator, PolyInVar, RampMax)

_MAX_SIMPLEX_DIM = 3


def _vname(k: int) -> str:
    return f"_v{k}"


def _uname(k: int) -> str:
    return f"_u{k}"


def second_derivative(x: Expr, k: int) -> Expr:
    """D_{u_k} D_{v_k} x with the level-k variable names."""
    d = collect_terms(malliavin(x, _vname(k)))
    return collect_terms(malliavin(d, _uname(k)))


def derivative_levels(f: Expr, order: int) -> list:
    """[F, D_{u_1}D_{v_1}F, ..., D_{u_order}D_{v_order} ... F], unfrozen."""
    out = [f]
    for k in range(1, order + 1):
        out.append(second_derivative(out[-1], k))
    return out


def _term_split(term: Expr, i: int):
    """Sort a product term's factors by the level variables they mention.

    Returns (s_facs, per_level, coupled): factors free of every level
    variable, per level-k the triple (u only, v only, u and v mixed), and
    factors tying several levels together.
    """
    s_facs, coupled = [], []
    per_level = [([], [], []) for _ in range(i)]
    for fac in product_factors(term):
        names = free_vars(fac)
        if not names:
            s_facs.append(fac)
            continue
        levels = {int(n[2:]) for n in names}
        if len(levels) > 1:
            coupled.append(fac)
            continue
        k = levels.pop()
        kinds = {n[1] for n in names}
        slot = 2 if kinds == {"u", "v"} else (0 if kinds == {"u"} else 1)
        per_level[k - 1][slot].append(fac)
    return s_facs, per_level, coupled


def _cluster_value(u_facs, v_facs, k, r, big_t, hh):
    """Exact 1/2 (int_0^T + int_0^r) du int_r^T dv of one separable cluster.

    None signals a factor without a piecewise-polynomial form, in which
    case the caller must fall back to quadrature.
    """
    if not all(isinstance(f, _PW_FACTORS) for f in u_facs + v_facs):
        return None
    su, wu = _combine_pwpoly(u_facs, _uname(k), 0.0, big_t, None)
    sv, wv = _combine_pwpoly(v_facs, _vname(k), r, big_t, None)
    if wu is None or wv is None:
        return 0.0
    val = 0.5 * poly_rect_integral(wu, wv, hh)
    if r > 0.0:
        wur = wu.restrict(0.0, r)
        if wur is not None:
            val += 0.5 * poly_rect_integral(wur, wv, hh)
    return su * sv * val


def _canonical_cluster(u_facs, v_facs, uv_facs, k) -> tuple:
    """Level-independent fingerprint used to recognize identical clusters."""
    ren = {_uname(k): "u", _vname(k): "v"}
    return tuple(sorted(to_sexpr(f, ren) for f in u_facs + v_facs + uv_facs))


def _u_pair(facs, k, r, big_t) -> Expr:
    """Replace the u_k factors by the averaged phi_H(u_k, v_k) integral."""
    node = PhiMoment if all(isinstance(f, _PW_FACTORS) for f in facs) else UIntegral
    halves = [scale(node(tuple(facs), _uname(k), 0.0, big_t, _vname(k)), 0.5)]
    if r > 0.0:
        halves.append(scale(node(tuple(facs), _uname(k), 0.0, r, _vname(k)), 0.5))
    return make_sum(halves)


def _kinks(expr: Expr) -> set:
    """Constants where a level integrand can lose smoothness."""
    out = set()
    if isinstance(expr, Indicator):
        out |= {expr.lo, expr.hi}
    elif isinstance(expr, RampMax):
        out |= {expr.cap, *[a for a in expr.args if not isinstance(a, str)]}
    elif isinstance(expr, (PhiMoment, UIntegral)):
        out |= {expr.lo, expr.hi}
    elif isinstance(expr, TimeIntB):
        out |= {expr.upper, *[a for a in expr.lower if not isinstance(a, str)]}
    for c in children(expr):
        out |= _kinks(c)
    return out


def _attach(s_expr, integral, path, hh):
    """Multiply the variable-free prefactor by a computed v-integral."""
    if path is None:
        return scale(s_expr, integral)
    return integral * evaluate(s_expr, hh, path)


def _quadrature_value(term, i, r, big_t, hh, path, rel_tol):
    if i > _MAX_SIMPLEX_DIM:
        raise EngineError(
            f"level {i} falls back to simplex quadrature, implemented only "
            f"up to dimension {_MAX_SIMPLEX_DIM}")
    s_facs = [f for f in product_factors(term) if not free_vars(f)]
    facs = [f for f in product_factors(term) if free_vars(f)]
    for k in range(1, i + 1):
        ivar = _uname(k)
        uf = [f for f in facs if ivar in free_vars(f)]
        if not uf:
            raise EngineError(f"level-{i} term carries no {ivar} dependence")
        facs = [f for f in facs if ivar not in free_vars(f)]
        facs.append(_u_pair(uf, k, r, big_t))
    g_expr = make_product(facs)
    if not is_deterministic(g_expr):
        if path is None:
            raise EngineError(
                "stochastic simplex integrand has no symbolic route; supply a path")
        if np.ndim(path.values) > 1:
            raise EngineError(
                "stochastic simplex integrand supports single paths only")
    breaks = sorted(c for c in _kinks(g_expr) if r < c < big_t)

    def g(vs):
        b = {_vname(k + 1): float(vs[k]) for k in range(i)}
        return float(evaluate(g_expr, hh, path, b))

    val = nested_simplex(g, r, big_t, i, breaks=breaks, rel_tol=rel_tol)
    return _attach(make_product(s_facs), val, path, hh), "quadrature"


def _term_value(term, i, r, big_t, hh, path, rel_tol):
    """(value, route) for one frozen product term at level i >= 1."""
    s_facs, per_level, coupled = _term_split(term, i)
    if not coupled and all(not uv for _, _, uv in per_level):
        # identical clusters are the common case, so key before integrating
        keys, cache = [], {}
        for k, (u, v, _) in enumerate(per_level):
            key = _canonical_cluster(u, v, [], k + 1)
            if key not in cache:
                cache[key] = _cluster_value(u, v, k + 1, r, big_t, hh)
            keys.append(key)
        clusters = [cache[key] for key in keys]
        if all(c is not None for c in clusters):
            s_expr = make_product(s_facs)
            if i == 1:
                return _attach(s_expr, clusters[0], path, hh), "exact"
            if len(set(keys)) == 1:
                val = clusters[0] ** i / math.factorial(i)
                return _attach(s_expr, val, path, hh), "factorized"
    return _quadrature_value(term, i, r, big_t, hh, path, rel_tol)


def _level_value(prods, i, r, big_t, hh, path, rel_tol):
    if i == 0:
        expr = collect_terms(make_sum(prods))
        return (expr if path is None else evaluate(expr, hh, path)), "evaluate"
    if not prods:
        return (ZERO if path is None else 0.0), "vanishes"
    vals, routes = [], set()
    for t in prods:
        v, route = _term_value(t, i, r, big_t, hh, path, rel_tol)
        vals.append(v)
        routes.add(route)
    if path is None:
        return collect_terms(make_sum(vals)), "+".join(sorted(routes))
    total = vals[0]
    for v in vals[1:]:
        total = total + v
    return total, "+".join(sorted(routes))


def exp_series(f: Expr, r: float, big_t: float, h, order: int,
               path: "GridPath | None" = None,
               rel_tol: float = 1e-9) -> SeriesResult:
    """Truncated conditional-expectation series for F given the path up to r.

    big_t is the declared horizon; every sample and integral in f must stay
    inside [0, big_t].  Exact routes are preferred term by term and rel_tol
    only governs quadrature fallbacks.  Without a path the terms come back
    as expressions in the observed samples (stochastic simplex integrands
    then raise EngineError).  diagnostics[i] records the routes taken and
    the number of product terms at level i.
    """
    hh = _hval(h)
    r, big_t = float(r), float(big_t)
    if not 0.0 <= r <= big_t:
        raise ValueError(f"need 0 <= r <= horizon, got r={r}, horizon={big_t}")
    if order < 0:
        raise ValueError("series order must be >= 0")
    if free_vars(f):
        raise ValueError("functional must not contain free variables")
    if horizon(f) > big_t * (1.0 + 1e-12):
        raise ValueError("functional looks beyond the declared horizon")

    terms, sums, diags = [], [], []
    x = f
    running = None
    for i in range(order + 1):
        if i:
            x = second_derivative(x, i)
        frozen = collect_terms(make_sum(expand(freeze(x, r))))
        prods = [t for t in (frozen.terms if isinstance(frozen, Sum) else (frozen,))
                 if t != ZERO]
        val, route = _level_value(prods, i, r, big_t, hh, path, rel_tol)
        terms.append(val)
        if path is None:
            running = val if running is None else collect_terms(make_sum([running, val]))
        else:
            running = val if running is None else running + val
        sums.append(running)
        diags.append({"order": i, "route": route, "n_terms": len(prods)})
    return SeriesResult(order=order, terms=terms, partial_sums=sums,
                        diagnostics=diags)


def _beta(a: float, b: float) -> float:
    return math.exp(math.lgamma(a) + math.lgamma(b) - math.lgamma(a + b))


def cir_fourth_order_integral(big_t: float, h, method: str = "closed",
                              rel_tol: float = 1e-7) -> tuple:
    """Ordered-domain pieces of the level-2 term for F = exp(-int_0^T B^2).

    The frozen fourth derivative of F is four times a sum of three ramp
    pairings; on {u_k at or below its partner v_k, v1 <= v2} the level-2
    double kernel integral splits by the position of u2 into

        I1 over 0 <= u2 <= u1 <= v1 <= v2 <= T with
           bracket (T - u1)(T - v2) + 2 (T - v1)(T - v2),
        I2 over 0 <= u1 <= u2 <= v1 <= v2 <= T with
           bracket (T - u2)(T - v2) + 2 (T - v1)(T - v2),
        I3 over 0 <= u1 <= v1 <= u2 <= v2 <= T with
           bracket 2 (T - u2)(T - v2) + (T - v1)(T - v2),

    each against 4 phi_H(u1, v1) phi_H(u2, v2).  All three are closed-form
    in Beta functions and scale as T^(4H+2); method="quadrature" recomputes
    them with exact innermost kernel moments and adaptive panels outside,
    as an independent cross-check of the algebra.
    """
    hh = _hval(h)
    big_t = float(big_t)
    if big_t <= 0.0:
        raise ValueError("horizon must be positive")
    tp = big_t ** (4.0 * hh + 2.0)
    if method == "closed":
        b = _beta(2.0 * hh + 1.0, 2.0 * hh + 2.0)
        i1 = (2.0 * hh - 1.0) * (hh + 2.0) \
            / ((2.0 * hh + 1.0) * (4.0 * hh + 2.0) * (4.0 * hh - 1.0)) * tp
        i2 = ((8.0 * hh * hh + 14.0 * hh - 1.0)
              / (4.0 * (4.0 * hh + 1.0) * (2.0 * hh + 1.0) * (4.0 * hh - 1.0))
              - (6.0 * hh + 5.0) / (2.0 * hh + 1.0) * b) * tp
        i3 = (6.0 * hh + 4.0) / (2.0 * hh + 1.0) * b * tp
        return i1, i2, i3
    if method != "quadrature":
        raise ValueError(f"unknown method '{method}'")

    p = 2.0 * hh - 1.0
    kappa = 1.0 / p
    k2 = hh * p  # phi_H(u, v) = k2 |u - v|^(2H-2)

    # after x = (v1 - u)^(2H-1) the substituted integrands are smooth away
    # from x = 0 and the domain [0, v1^p] scales linearly, so one set of
    # unit Gauss nodes graded toward 0 serves every v1 at once
    xg, wg = gauss_nodes(20)
    cuts = graded_points(0.0, 1.0, 6, ratio=0.15)
    xs_unit, ws_unit = [], []
    for lo, hi in zip(cuts, cuts[1:]):
        mid, half = 0.5 * (lo + hi), 0.5 * (hi - lo)
        xs_unit.append(mid + half * xg)
        ws_unit.append(half * wg)
    xs_unit = np.concatenate(xs_unit)
    ws_unit = np.concatenate(ws_unit)

    def m0(a, b, v2):
        # int_a^b phi_H(u, v2) du for 0 <= a <= b <= v2
        return hh * ((v2 - a) ** p - (v2 - b) ** p)

    def m1(a, b, v2):
        # int_a^b u phi_H(u, v2) du via the elementary antiderivative
        def anti(u):
            return k2 * ((v2 - u) ** (2.0 * hh) / (2.0 * hh)
                         - v2 * (v2 - u) ** p / p)

        return anti(b) - anti(a)

    def inner1(v1s, v2):
        # innermost u2-integral exact, u1 substituted; vectorized over v1
        b = v1s ** p
        xs = b[:, None] * xs_unit[None, :]
        u1 = v1s[:, None] - xs ** kappa
        br = (big_t - u1) * (big_t - v2) \
            + (2.0 * (big_t - v2)) * (big_t - v1s)[:, None]
        g = br * (v2 ** p - (v2 - u1) ** p)
        return hh * hh * b * (g @ ws_unit)

    def inner2(v1s, v2):
        c0 = big_t * (big_t - v2) + 2.0 * (big_t - v1s) * (big_t - v2)
        c1 = -(big_t - v2)
        exact = hh * v1s ** p * (c0 * m0(0.0, v1s, v2) + c1 * m1(0.0, v1s, v2))
        # the piece carrying (v1 - u2)^(2H-1) has no closed form; substitute
        b = v1s ** p
        xs = b[:, None] * xs_unit[None, :]
        u2 = v1s[:, None] - xs ** kappa
        g = xs ** kappa * (v2 - u2) ** (2.0 * hh - 2.0) * (c0[:, None] + c1 * u2)
        return exact - hh * k2 * kappa * b * (g @ ws_unit)

    def inner3(v1s, v2):
        c0 = 2.0 * big_t * (big_t - v2) + (big_t - v1s) * (big_t - v2)
        c1 = -2.0 * (big_t - v2)
        return hh * v1s ** p * (c0 * m0(v1s, v2, v2) + c1 * m1(v1s, v2, v2))

    def outer(inner):
        def v1_level(v2):
            return adaptive_panels(
                lambda v1s: inner(np.atleast_1d(np.asarray(v1s, dtype=float)), v2),
                0.0, v2, rel_tol=rel_tol)

        def v2_level(v2s):
            return np.asarray([v1_level(float(v2))
                               for v2 in np.atleast_1d(v2s)])

        return adaptive_panels(v2_level, 0.0, big_t, rel_tol=rel_tol)

    return tuple(4.0 * outer(fn) for fn in (inner1, inner2, inner3))


def assumption_b_sequence(f: Expr, r: float, big_t: float, n_max: int, h,
                          sup_norm) -> list:
    """Summability certificate (T^2H - r^2H)^i / (2^i i!) * sup_norm(2i).

    sup_norm(m) must bound, in L2, the sup over the derivative arguments of
    the frozen m-th Malliavin derivative of f.  Absolute convergence of the
    series follows whenever these terms are summable; their decay rate is
    the practical truncation guide.
    """
    hh = _hval(h)
    base = big_t ** (2.0 * hh) - r ** (2.0 * hh)
    return [base ** i / (2.0 ** i * math.factorial(i)) * float(sup_norm(2 * i))
            for i in range(n_max + 1)]
