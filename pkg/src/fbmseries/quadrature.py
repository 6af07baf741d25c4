"""Gauss-Legendre panel quadrature with breakpoint splits and refinement checks.

Integrands are vectorized over the node axis: f(nodes) must return an array
whose last axis matches nodes (leading axes, e.g. one per Monte-Carlo path,
are carried through).  Singular or kinked locations are handled by listing
them as breakpoints and, where useful, by geometric panel grading toward an
endpoint; the kernel singularities in this package are integrable, so split
panels converge quickly.
"""

from __future__ import annotations

import functools
import math

import numpy as np


class QuadratureError(RuntimeError):
    """Adaptive refinement failed to reach the requested tolerance."""

    def __init__(self, message: str, achieved: float):
        super().__init__(f"{message} (achieved tolerance {achieved:.3e})")
        self.achieved = achieved


@functools.lru_cache(maxsize=None)
def gauss_nodes(n: int):
    x, w = np.polynomial.legendre.leggauss(n)
    return x, w


def fixed_panel(f, a: float, b: float, n: int = 24):
    """n-point Gauss-Legendre approximation on [a, b]."""
    if b <= a:
        return 0.0
    x, w = gauss_nodes(n)
    mid, half = 0.5 * (a + b), 0.5 * (b - a)
    vals = np.asarray(f(mid + half * x), dtype=float)
    return half * np.sum(vals * w, axis=-1)


def _split_points(a: float, b: float, breaks) -> list:
    cuts = sorted({float(c) for c in breaks if a < float(c) < b})
    return [a] + cuts + [b]


def adaptive_panels(f, a: float, b: float, breaks=(), rel_tol: float = 1e-10,
                    n: int = 24, max_depth: int = 14, strict: bool = False):
    """Adaptive bisection with a Gauss rule per panel, split at breakpoints.

    The per-panel error estimate is |whole - split halves|; panels recurse
    until the estimate falls under the tolerance budget.  With strict=True a
    budget violation raises QuadratureError instead of returning best effort.
    """
    if b <= a:
        return 0.0
    pts = _split_points(a, b, breaks)
    total = None
    scale = max(float(np.max(np.abs(fixed_panel(f, a, b, n)))), 1e-300)
    worst = 0.0

    def recurse(lo, hi, whole, depth):
        nonlocal worst
        m = 0.5 * (lo + hi)
        left = fixed_panel(f, lo, m, n)
        right = fixed_panel(f, m, hi, n)
        err = np.max(np.abs(whole - (left + right)))
        if err <= rel_tol * scale or depth >= max_depth:
            if depth >= max_depth:
                worst = max(worst, err / scale)
            return left + right
        return recurse(lo, m, left, depth + 1) + recurse(m, hi, right, depth + 1)

    for lo, hi in zip(pts, pts[1:]):
        part = recurse(lo, hi, fixed_panel(f, lo, hi, n), 0)
        total = part if total is None else total + part
    if strict and worst > rel_tol:
        raise QuadratureError("adaptive quadrature did not converge", worst)
    return total


def phi_weighted_integral(f, lo: float, hi: float, v: float, h: float,
                          breaks=(), rel_tol: float = 1e-10, n: int = 24):
    """int_lo^hi f(u) H(2H-1)|u - v|^(2H-2) du with the singularity absorbed.

    On each side of v substitute x = |u - v|^(2H-1), which turns the singular
    weight into Lebesgue measure: the transformed integrand H * f(v +/- x^kappa)
    with kappa = 1/(2H-1) > 1 is continuous, so plain adaptive panels converge.
    Plain bisection on the original variable would need depth ~ tol^(1/(2H-1))
    and is hopeless for tight tolerances.
    """
    p = 2.0 * h - 1.0
    kappa = 1.0 / p
    total = 0.0
    if hi > v:
        a = max(lo, v)
        x_lo, x_hi = (a - v) ** p, (hi - v) ** p

        def right(xs):
            return f(v + np.asarray(xs) ** kappa)

        tb = [(c - v) ** p for c in breaks if a < c < hi]
        total = total + h * adaptive_panels(right, x_lo, x_hi, breaks=tb,
                                            rel_tol=rel_tol, n=n)
    if lo < v:
        b = min(hi, v)
        x_lo, x_hi = (v - b) ** p, (v - lo) ** p

        def left(xs):
            return f(v - np.asarray(xs) ** kappa)

        tb = [(v - c) ** p for c in breaks if lo < c < b]
        total = total + h * adaptive_panels(left, x_lo, x_hi, breaks=tb,
                                            rel_tol=rel_tol, n=n)
    return total


def graded_points(a: float, b: float, n_panels: int, ratio: float = 0.25,
                  toward_start: bool = True) -> list:
    """Panel cut points geometrically graded toward one endpoint."""
    if n_panels < 1:
        raise ValueError("need at least one panel")
    offs = [(b - a) * ratio ** k for k in range(1, n_panels)]
    if toward_start:
        return sorted(set([a] + [a + o for o in offs] + [b]))
    return sorted(set([a] + [b - o for o in offs] + [b]))


def nested_simplex(f, r: float, t_final: float, dim: int, breaks=(),
                   rel_tol: float = 1e-8, n: int = 24, max_depth: int = 10):
    """Integral of f(v_1..v_dim) over the ordered simplex r <= v_1 <= ... <= v_dim <= T.

    Iterated one-dimensional adaptive panels, innermost first; f takes a
    tuple of floats.  Meant for low dimension (<= 3).
    """
    if dim < 1:
        raise ValueError("simplex dimension must be >= 1")

    def level(k, lower, fixed):
        # integrate v_k from lower to T with v_{k+1..dim} already fixed
        def g(vs):
            out = []
            for v in np.atleast_1d(vs):
                if k == 1:
                    out.append(f((float(v),) + fixed))
                else:
                    out.append(level(k - 1, lower, (float(v),) + fixed))
            return np.asarray(out, dtype=float)

        hi = fixed[0] if fixed else t_final
        return adaptive_panels(g, lower, hi, breaks=breaks, rel_tol=rel_tol,
                               n=n, max_depth=max_depth)

    return level(dim, r, ())
