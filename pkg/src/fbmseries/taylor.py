"""Backward Taylor expansion of conditional expectations on a time grid.

For a discrete functional F of the path at grid times t_1 < ... < t_J, the
conditional expectation given the history up to r admits a convergent
alternating series over segment multi-indices.  Write I_r for the index of
the grid cell whose right-closed interval contains r and set

    (s_0, s_1, ..., s_K) = (r, t_{I_r}, ..., t_J)

(the leading segment is dropped when r coincides with t_{I_r}).  The order-l
contribution is

    (-1)^l sum_{|q| = l} sum_{i_k <= q_k} prod_k (-1)^{i_k}
           (s_k - s_{k-1})^{(q_k - i_k) H} / (q_k - i_k)!
        x  [ composition, innermost segment K first:
             X <- h_{q_k - i_k}( (B_{s_k} - B_{s_{k-1}}) / (s_k - s_{k-1})^H )
                  * psi_{i_k}^{(s_{k-1}, s_k)}(X) ,  starting from X = D^q F ]

where D^q applies q_k grid-time derivatives at each segment's right endpoint
and psi_k^{(a,b)} is the iterated kernel-integral operator

    psi_k^{(a,b)}(X) = sum_{|q| = k} prod_i ( R_i^{q_i} / q_i! ) D^q X,
    R_i = iint_{cell_i x [a,b]} phi_H,

with cells taken from the partition of [0, horizon] induced by X's own
sample times (rectangle additivity makes the value independent of how far
that partition is refined).  Hermite factors stay unexpanded and are
evaluated by recurrence, which keeps high orders numerically stable.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from itertools import product as iter_product

import numpy as np

from .functional import (
    Expr,
    GridPath,
    TimeGrid,
    ZERO,
    collect_terms,
    directional,
    evaluate,
    fbm_sample,
    fbm_times,
    grid_partials,
    hermite_factor,
    is_discrete,
    make_product,
    make_sum,
    scale,
)
from .kernel import Interval, _hval, rect_integral
from .results import SeriesResult


def compositions(total: int, parts: int):
    """All tuples of nonnegative ints of the given length summing to total."""
    if parts == 0:
        if total == 0:
            yield ()
        return
    for first in range(total + 1):
        for rest in compositions(total - first, parts - 1):
            yield (first,) + rest


def locate_segment(r: float, grid: TimeGrid) -> int:
    """1-based index of the grid cell whose right-closed interval contains r."""
    return grid.locate(r)


@dataclass(frozen=True)
class PsiSpec:
    """Iterated kernel integral over [r, t_j], applied k times."""

    r: float
    t_j: float
    k: int

    def __post_init__(self):
        if self.k < 0:
            raise ValueError("psi order must be >= 0")
        if not (0.0 <= self.r <= self.t_j):
            raise ValueError("need 0 <= r <= t_j")


def psi_orders(x: Expr, a: float, b: float, k_max: int, h,
               t_final: float) -> list:
    """[psi_0(x), .., psi_k_max(x)] over the partition from x's sample times.

    One recursive walk over the cells shares every derivative chain across
    the multi-indices of all orders, instead of redoing the chains per
    order and per composition.
    """
    hh = _hval(h)
    if x == ZERO or k_max == 0:
        return [x] + [ZERO] * k_max
    cuts = sorted(t for t in fbm_times(x) | {t_final} if 0.0 < t <= t_final)
    cells = list(zip([0.0] + cuts[:-1], cuts))
    rng = Interval(a, b)
    rects = [rect_integral(Interval(lo, hi), rng, hh) for lo, hi in cells]
    acc = [[] for _ in range(k_max + 1)]

    def walk(ci: int, used: int, d: Expr, coeff: float) -> None:
        if ci == len(cells):
            acc[used].append(scale(d, coeff))
            return
        walk(ci + 1, used, d, coeff)
        hi, ri = cells[ci][1], rects[ci]
        for j in range(1, k_max - used + 1):
            d = collect_terms(directional(d, hi))
            if d == ZERO:
                return
            walk(ci + 1, used + j, d, coeff * ri ** j / math.factorial(j))

    walk(0, 0, x, 1.0)
    return [collect_terms(make_sum(p)) if p else ZERO for p in acc]


def iter_kernel_integral(x: Expr, a: float, b: float, k: int, h,
                         t_final: float) -> Expr:
    """psi_k^{(a,b)} over the partition induced by x's own sample times."""
    if k < 0:
        raise ValueError("psi order must be >= 0")
    return psi_orders(x, a, b, k, h, t_final)[k]


def psi(f: Expr, spec: PsiSpec, grid: TimeGrid, h) -> Expr:
    """Public iterated-integral operator for discrete functionals on a grid."""
    if not is_discrete(f):
        raise ValueError("psi requires a discrete functional")
    stray = fbm_times(f) - set(grid.times)
    if stray:
        raise ValueError(f"sample times {sorted(stray)} are not grid times")
    return iter_kernel_integral(f, spec.r, spec.t_j, spec.k, h, grid.final_time)


def _segments(grid: TimeGrid, r: float):
    """Segment endpoints (s_0..s_K) = (r, t_{I_r}, .., t_J), degenerate head dropped."""
    i_r = grid.locate(r)
    pts = [r] + list(grid.times[i_r:])
    if len(pts) >= 2 and pts[0] == pts[1]:
        pts = pts[1:]
    return pts


def _validate(f: Expr, order: int, grid: TimeGrid) -> None:
    if order < 0:
        raise ValueError("truncation order must be >= 0")
    if not is_discrete(f):
        raise ValueError("backward Taylor expansion requires a discrete functional")
    stray = fbm_times(f) - set(grid.times)
    if stray:
        raise ValueError(f"sample times {sorted(stray)} are not grid times")


def _setup(f: Expr, r: float, grid: TimeGrid, order: int, hh):
    _validate(f, order, grid)
    pts = _segments(grid, r)
    n_seg = len(pts) - 1
    deltas = [pts[k + 1] - pts[k] for k in range(n_seg)]
    args = [scale(make_sum([fbm_sample(pts[k + 1]),
                            scale(fbm_sample(pts[k]), -1.0)]),
                  deltas[k] ** (-hh)) for k in range(n_seg)]
    return pts, deltas, args


def _package(order, term_exprs, n_counts, hh, path) -> SeriesResult:
    terms, sums, diags = [], [], []
    running = None
    for l in range(order + 1):
        if path is None:
            term = term_exprs[l]
            running = term if running is None else make_sum([running, term])
        else:
            term = evaluate(term_exprs[l], h=hh, path=path)
            running = term if running is None else running + term
        terms.append(term)
        sums.append(running)
        diags.append({"order": l, "n_terms": n_counts[l]})
    return SeriesResult(order, terms, sums, diags)


def backward_taylor(f: Expr, r: float, grid: TimeGrid, order: int, h,
                    path: "GridPath | None" = None) -> SeriesResult:
    """Truncated backward Taylor series for E[f | path up to r].

    With a path (possibly vectorized across an ensemble) the terms are
    numeric; without one they stay symbolic.  f must be a discrete
    functional sampled at grid times.

    The segment sums are folded into one linear operator per segment,

        S_k^n(X) = (-1)^n sum_{i<=n} (-1)^i d_k^{(n-i)H} / (n-i)!
                   h_{n-i}(xi_k) psi_i^{(s_{k-1}, s_k)}( D_{s_k}^n X ),

    and terms of total order l accumulate by convolving the S_k layers from
    the last segment backwards; this shares all common subchains that the
    literal enumeration over per-segment multi-indices would recompute (see
    reference_expansion, kept for cross-checks).  Folding D^{q_k} into
    segment k is exact because an earlier-time grid derivative commutes
    with later-segment kernel integrals and passes through their Hermite
    increment factors.
    """
    hh = _hval(h)
    pts, deltas, args = _setup(f, r, grid, order, hh)
    n_seg = len(pts) - 1
    t_final = grid.final_time

    layer = {0: f}
    for k in range(n_seg - 1, -1, -1):
        nxt = {}
        for used, prev in layer.items():
            d = prev
            for n in range(order - used + 1):
                if n > 0:
                    d = collect_terms(directional(d, pts[k + 1]))
                    if d == ZERO:
                        break
                psis = psi_orders(d, pts[k], pts[k + 1], n, hh, t_final)
                pieces = []
                for i, y in enumerate(psis):
                    if y == ZERO:
                        continue
                    m = n - i
                    if m > 0:
                        y = make_product([hermite_factor(m, args[k]), y])
                    pieces.append(scale(y, (-1.0) ** n * (-1.0) ** i
                                        * deltas[k] ** (m * hh)
                                        / math.factorial(m)))
                if pieces:
                    tot = used + n
                    pieces.append(nxt.get(tot, ZERO))
                    nxt[tot] = collect_terms(make_sum(pieces))
        layer = nxt

    term_exprs = [layer.get(l, ZERO) for l in range(order + 1)]
    n_counts = [len(t.terms) if hasattr(t, "terms") else (0 if t == ZERO else 1)
                for t in term_exprs]
    return _package(order, term_exprs, n_counts, hh, path)


def reference_expansion(f: Expr, r: float, grid: TimeGrid, order: int, h,
                        path: "GridPath | None" = None) -> SeriesResult:
    """Literal enumeration over per-segment multi-indices.

    Same series as backward_taylor, built term by term from the nested
    composition without sharing subchains; exponentially slower, kept as an
    independent cross-check of the layered accumulation.
    """
    hh = _hval(h)
    pts, deltas, args = _setup(f, r, grid, order, hh)
    n_seg = len(pts) - 1

    term_exprs, n_counts = [], []
    for l in range(order + 1):
        contributions = []
        n_combos = 0
        for q in compositions(l, n_seg):
            dq = f
            for k in range(n_seg):
                for _ in range(q[k]):
                    dq = collect_terms(directional(dq, pts[k + 1]))
                    if dq == ZERO:
                        break
                if dq == ZERO:
                    break
            if dq == ZERO:
                continue
            for choices in iter_product(*(range(qk + 1) for qk in q)):
                n_combos += 1
                coeff = 1.0
                x = dq
                for k in range(n_seg - 1, -1, -1):
                    ik = choices[k]
                    m = q[k] - ik
                    coeff *= (-1.0) ** ik * deltas[k] ** (m * hh) / math.factorial(m)
                    x = iter_kernel_integral(x, pts[k], pts[k + 1], ik, hh,
                                             grid.final_time)
                    if x == ZERO:
                        break
                    if m > 0:
                        x = make_product([hermite_factor(m, args[k]), x])
                if x == ZERO:
                    continue
                contributions.append(scale(x, (-1.0) ** l * coeff))
        term_exprs.append(make_sum(contributions))
        n_counts.append(n_combos)
    return _package(order, term_exprs, n_counts, hh, path)


def assumption_a_sequence(f: Expr, r: float, grid: TimeGrid, n_max: int, h,
                          sup_norm) -> list:
    """Convergence-bound sequence for the backward expansion.

    sup_norm(m) must return || sup_{|w| = m} |D^w f| ||_{L2}; the N-th bound is

        sum_{i=0}^{N} sup_norm(2N - i) C(N,i)^2 sqrt(i!) (N + J - 1)!
                      / (2^{N-i} (N!)^2)
                      (T^2H - r^2H + (T - r)^2H)^{N-i} (T - r)^{iH}

    and the expansion is justified when the sequence tends to zero.
    """
    hh = _hval(h)
    t_final = grid.final_time
    j = grid.n_cells
    base = t_final ** (2 * hh) - r ** (2 * hh) + (t_final - r) ** (2 * hh)
    out = []
    for n in range(n_max + 1):
        total = 0.0
        for i in range(n + 1):
            combinatorial = (math.comb(n, i) ** 2 * math.sqrt(math.factorial(i))
                             * math.factorial(n + j - 1)
                             / (2.0 ** (n - i) * math.factorial(n) ** 2))
            total += (sup_norm(2 * n - i) * combinatorial
                      * base ** (n - i) * (t_final - r) ** (i * hh))
        out.append(total)
    return out


def mc_sup_norm(f: Expr, grid: TimeGrid, h, ensemble):
    """Monte-Carlo estimator of m -> || sup_{|w| = m} |D^w f| ||_{L2}.

    The supremum over derivative multi-indices is taken as a maximum over
    the enumerated multi-indices of total order m (ties in the grid-time
    derivative directions make this exhaustive for discrete functionals).
    """
    path = ensemble.as_grid_path()

    def norm(m: int) -> float:
        best = None
        for w in compositions(m, grid.n_cells):
            vals = np.abs(np.asarray(evaluate(grid_partials(f, grid, w),
                                              h=h, path=path), dtype=float))
            vals = np.broadcast_to(vals, (ensemble.n_paths,))
            best = vals if best is None else np.maximum(best, vals)
        return float(np.sqrt(np.mean(best ** 2)))

    return norm
