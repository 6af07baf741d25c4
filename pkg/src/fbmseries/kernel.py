"""Closed-form integration against the singular fBm covariance kernel.

For Hurst index H in (1/2, 1) the fractional Brownian covariance structure
is generated by the kernel

    phi_H(u, v) = H (2H - 1) |u - v|^(2H - 2),

which is integrable but singular on the diagonal u = v.  Inner products
<f, g>_H = iint f(s) g(t) phi_H(s, t) ds dt of piecewise polynomials admit
exact elementary antiderivatives, so no quadrature is needed anywhere in
this module.  The key object is the antiderivative family

    Phi_1(x) = H sign(x) |x|^(2H-1),        Phi_1' = phi_H   (a.e.)
    Phi_2(x) = |x|^(2H) / 2,                Phi_2' = Phi_1
    Phi_m(x) = kappa_m sign(x)^m |x|^(2H-2+m),   Phi_m' = Phi_{m-1}

with kappa_m = H(2H-1) / prod_{j=1..m} (2H - 2 + j).  Every exponent
2H - 2 + m is positive for m >= 1, so each Phi_m is continuous through
x = 0 and moments of polynomials against phi_H follow by repeated
integration by parts:

    int y^n Phi_m(y) dy = sum_{s=0..n} (-1)^s n!/(n-s)! y^(n-s) Phi_{m+1+s}(y).

Fractional powers |x|^p are computed as exp(p log|x|) with 0 mapped to 0.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np


class DiagonalSingularityError(ValueError):
    """Pointwise kernel evaluation requested exactly on the diagonal u = v."""


def _hval(h) -> float:
    """Accept a HurstParam or a bare float; validate the open interval (1/2, 1)."""
    v = h.h if isinstance(h, HurstParam) else float(h)
    if not (0.5 < v < 1.0):
        raise ValueError(f"Hurst index must lie in (1/2, 1), got {v}")
    return v


@dataclass(frozen=True)
class HurstParam:
    """Hurst index H restricted to the long-memory regime (1/2, 1)."""

    h: float

    def __post_init__(self):
        if not (0.5 < self.h < 1.0):
            raise ValueError(f"Hurst index must lie in (1/2, 1), got {self.h}")

    @property
    def two_h(self) -> float:
        return 2.0 * self.h


@dataclass(frozen=True)
class Interval:
    """Closed interval [lo, hi] with lo <= hi, both finite and >= 0."""

    lo: float
    hi: float

    def __post_init__(self):
        if not (math.isfinite(self.lo) and math.isfinite(self.hi)):
            raise ValueError("interval endpoints must be finite")
        if self.lo < 0.0 or self.hi < self.lo:
            raise ValueError(f"need 0 <= lo <= hi, got [{self.lo}, {self.hi}]")

    @property
    def length(self) -> float:
        return self.hi - self.lo

    def is_empty(self) -> bool:
        return self.hi <= self.lo


def abs_pow(x, p: float):
    """|x|**p via exp(p log|x|), with the convention 0**p = 0 (p may be fractional)."""
    if np.ndim(x) == 0:
        ax = abs(float(x))
        return 0.0 if ax == 0.0 else math.exp(p * math.log(ax))
    ax = np.abs(np.asarray(x, dtype=float))
    out = np.zeros_like(ax)
    nz = ax > 0.0
    out[nz] = np.exp(p * np.log(ax[nz]))
    return out


def sign_pow(x, m: int):
    """sign(x)**m with sign(0) = 0."""
    if np.ndim(x) == 0:
        s = math.copysign(1.0, x) if x != 0.0 else 0.0
        return s if m % 2 else (0.0 if x == 0.0 else 1.0)
    s = np.sign(np.asarray(x, dtype=float))
    return s if m % 2 else np.abs(s)


def phi(u, v, h) -> float:
    """Kernel phi_H(u, v) = H(2H-1)|u - v|^(2H-2); singular on the diagonal."""
    hh = _hval(h)
    d = np.asarray(u, dtype=float) - np.asarray(v, dtype=float)
    if np.any(d == 0.0):
        raise DiagonalSingularityError("phi_H evaluated at u == v")
    val = hh * (2.0 * hh - 1.0) * abs_pow(d, 2.0 * hh - 2.0)
    return float(val) if np.ndim(val) == 0 else val


def phi_family(m: int, x, h):
    """m-th iterated antiderivative Phi_m of the kernel (m >= 1), Phi_m' = Phi_{m-1}."""
    hh = _hval(h)
    if m < 1:
        raise ValueError("phi_family is defined for m >= 1")
    kappa = hh * (2.0 * hh - 1.0)
    for j in range(1, m + 1):
        kappa /= 2.0 * hh - 2.0 + j
    return kappa * sign_pow(x, m) * abs_pow(x, 2.0 * hh - 2.0 + m)


def phi_antiderivative(a: float, b: float, v: float, h) -> float:
    """Exact int_a^b phi_H(u, v) du = Phi_1(b - v) - Phi_1(a - v)."""
    return float(phi_family(1, b - v, h) - phi_family(1, a - v, h))


def int_pow_phi(n: int, m: int, alpha: float, beta: float, h) -> float:
    """Exact int_alpha^beta y^n Phi_m(y) dy (with Phi_0 meaning the kernel itself).

    Repeated integration by parts; valid across y = 0 because every Phi_{m+1+s}
    with s >= 0 is continuous there.
    """
    if n < 0 or m < 0:
        raise ValueError("need n >= 0 and m >= 0")
    total = 0.0
    ff = 1.0
    for s in range(n + 1):
        g = beta ** (n - s) * phi_family(m + 1 + s, beta, h) \
            - alpha ** (n - s) * phi_family(m + 1 + s, alpha, h)
        total += (-1.0) ** s * ff * g
        ff *= n - s
    return total


def rect_integral(u_iv: Interval, v_iv: Interval, h) -> float:
    """Exact iint over [a,b] x [c,d] of phi_H(u, v) du dv.

    Equals ( |b-c|^2H + |a-d|^2H - |a-c|^2H - |b-d|^2H ) / 2 and remains exact
    when the rectangle crosses the diagonal.
    """
    hh = _hval(h)
    a, b = u_iv.lo, u_iv.hi
    c, d = v_iv.lo, v_iv.hi
    p = 2.0 * hh
    return 0.5 * (abs_pow(b - c, p) + abs_pow(a - d, p)
                  - abs_pow(a - c, p) - abs_pow(b - d, p))


@dataclass(frozen=True)
class PiecewisePoly:
    """Compactly supported piecewise polynomial, zero outside its breakpoints.

    coeffs[i] holds ascending-power coefficients on [breaks[i], breaks[i+1]].
    """

    breaks: tuple
    coeffs: tuple

    def __post_init__(self):
        if len(self.breaks) != len(self.coeffs) + 1 or not self.coeffs:
            raise ValueError("need len(breaks) == len(coeffs) + 1 >= 2")
        for x, y in zip(self.breaks, self.breaks[1:]):
            if not (float(x) < float(y)):
                raise ValueError("breakpoints must be strictly increasing")

    @staticmethod
    def from_poly(coeffs: Sequence[float], lo: float, hi: float) -> "PiecewisePoly":
        return PiecewisePoly((float(lo), float(hi)), (tuple(float(c) for c in coeffs),))

    @staticmethod
    def indicator(lo: float, hi: float) -> "PiecewisePoly":
        return PiecewisePoly.from_poly((1.0,), lo, hi)

    @property
    def support(self) -> Interval:
        return Interval(self.breaks[0], self.breaks[-1])

    def pieces(self) -> Iterable[tuple]:
        for i, c in enumerate(self.coeffs):
            yield self.breaks[i], self.breaks[i + 1], c

    def __call__(self, x):
        xs = np.asarray(x, dtype=float)
        out = np.zeros_like(xs, dtype=float)
        for a, b, c in self.pieces():
            mask = (xs >= a) & (xs <= b) if b == self.breaks[-1] else (xs >= a) & (xs < b)
            if np.any(mask):
                out[mask] = np.polynomial.polynomial.polyval(xs[mask], np.asarray(c))
        return float(out) if np.ndim(x) == 0 else out

    def scale(self, factor: float) -> "PiecewisePoly":
        return PiecewisePoly(self.breaks,
                             tuple(tuple(factor * ci for ci in c) for c in self.coeffs))

    def restrict(self, lo: float, hi: float) -> "PiecewisePoly | None":
        """Clip support to [lo, hi]; None if the overlap has zero length."""
        pieces = []
        for a, b, c in self.pieces():
            aa, bb = max(a, lo), min(b, hi)
            if aa < bb:
                pieces.append((aa, bb, c))
        if not pieces:
            return None
        breaks = [pieces[0][0]]
        coeffs = []
        for aa, bb, c in pieces:
            if aa > breaks[-1]:
                coeffs.append((0.0,))
                breaks.append(aa)
            coeffs.append(c)
            breaks.append(bb)
        return PiecewisePoly(tuple(breaks), tuple(coeffs))

    def mul(self, other: "PiecewisePoly") -> "PiecewisePoly | None":
        """Pointwise product; None when the supports do not overlap."""
        lo = max(self.breaks[0], other.breaks[0])
        hi = min(self.breaks[-1], other.breaks[-1])
        if not (lo < hi):
            return None
        cuts = sorted({float(t) for t in self.breaks + other.breaks if lo <= t <= hi} | {lo, hi})
        coeffs = []
        for a, b in zip(cuts, cuts[1:]):
            mid = 0.5 * (a + b)
            ca = _piece_at(self, mid)
            cb = _piece_at(other, mid)
            if ca is None or cb is None:
                coeffs.append((0.0,))
            else:
                coeffs.append(tuple(np.polynomial.polynomial.polymul(ca, cb)))
        return PiecewisePoly(tuple(cuts), tuple(coeffs))


def _piece_at(w: PiecewisePoly, x: float):
    for a, b, c in w.pieces():
        if a <= x <= b:
            return np.asarray(c, dtype=float)
    return None


def _mono_phi_moment(i: int, a: float, b: float, v: float, h) -> float:
    """Exact int_a^b u^i phi_H(u, v) du via the shift u = v + y."""
    total = 0.0
    for j in range(i + 1):
        total += math.comb(i, j) * v ** (i - j) * int_pow_phi(j, 0, a - v, b - v, h)
    return total


def phi_poly_moment(w: PiecewisePoly, iv: Interval, v: float, h) -> float:
    """Exact int w(u) phi_H(u, v) du over supp(w) intersected with iv.

    v may sit inside the integration range; the closed form handles the
    diagonal crossing exactly.
    """
    clipped = w.restrict(iv.lo, iv.hi)
    if clipped is None:
        return 0.0
    total = 0.0
    for a, b, c in clipped.pieces():
        for i, ci in enumerate(c):
            if ci != 0.0:
                total += ci * _mono_phi_moment(i, a, b, float(v), h)
    return total


def _mono_rect_terms(i: int, a: float, b: float, h):
    """int_a^b u^i phi_H(u, v) du as terms coef * v^vp * (e - v)^k * Phi_m(e - v)."""
    terms = []
    for j in range(i + 1):
        cij = math.comb(i, j)
        ff = 1.0
        for s in range(j + 1):
            coef = cij * (-1.0) ** s * ff
            terms.append((coef, i - j, b, j - s, 1 + s))
            terms.append((-coef, i - j, a, j - s, 1 + s))
            ff *= j - s
    return terms


def _int_v_poly_shifted(pw: int, c: float, d: float, e: float, k: int, m: int, h) -> float:
    """Exact int_c^d v^pw (e - v)^k Phi_m(e - v) dv."""
    total = 0.0
    for t in range(pw + 1):
        epow = e ** (pw - t) if pw - t > 0 else 1.0
        total += math.comb(pw, t) * epow * (-1.0) ** t \
            * int_pow_phi(k + t, m, e - d, e - c, h)
    return total


def poly_rect_integral(wu: PiecewisePoly, wv: PiecewisePoly, h) -> float:
    """Exact iint wu(u) wv(v) phi_H(u, v) du dv over the product of supports."""
    total = 0.0
    for a, b, cu in wu.pieces():
        for c, d, cv in wv.pieces():
            for i, cui in enumerate(cu):
                if cui == 0.0:
                    continue
                for coef, vp, e, k, m in _mono_rect_terms(i, a, b, h):
                    for p, cvp in enumerate(cv):
                        if cvp == 0.0:
                            continue
                        total += cui * cvp * coef \
                            * _int_v_poly_shifted(vp + p, c, d, e, k, m, h)
    return total


def inner_product(f: PiecewisePoly, g: PiecewisePoly, h) -> float:
    """Inner product <f, g>_H = iint f(s) g(t) phi_H(s, t) ds dt, exact."""
    return poly_rect_integral(f, g, h)
