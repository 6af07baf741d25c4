"""Hermite polynomials, Stirling partition numbers, and log-gamma beta values.

The Hermite family used throughout is the probabilists' normalization,

    h_0 = 1,  h_1 = x,  h_n(x) = x h_{n-1}(x) - (n - 1) h_{n-2}(x),

with generating function exp(tx - t^2/2) = sum_n t^n/n! h_n(x) and the
binomial shift identity sum_k C(l,k) x^k h_{l-k}(y) = h_l(x + y).

Stirling numbers of the second kind {j, k} count partitions of a j-set into
k nonempty blocks; they are kept as exact Python integers (arbitrary
precision, so "overflow" can only happen when converting to float, which
raises OverflowError at the conversion site).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field


@dataclass
class HermiteTable:
    """Exact integer coefficient rows of the probabilists' Hermite polynomials.

    rows[n] holds ascending-power coefficients of h_n; extended on demand.
    """

    rows: list = field(default_factory=lambda: [[1], [0, 1]])

    def extend_to(self, n: int) -> None:
        while len(self.rows) <= n:
            m = len(self.rows)
            prev, prev2 = self.rows[m - 1], self.rows[m - 2]
            row = [0] + list(prev)
            for i, c in enumerate(prev2):
                row[i] -= (m - 1) * c
            self.rows.append(row)

    def coefficients(self, n: int) -> tuple:
        if n < 0:
            raise ValueError("Hermite degree must be >= 0")
        self.extend_to(n)
        return tuple(self.rows[n])


_TABLE = HermiteTable()


def hermite_coefficients(n: int) -> tuple:
    """Ascending-power integer coefficients of h_n."""
    return _TABLE.coefficients(n)


def hermite_eval(n: int, x):
    """h_n(x) by the three-term recurrence (stable; x may be an ndarray)."""
    if n < 0:
        raise ValueError("Hermite degree must be >= 0")
    if n == 0:
        return 1.0 if not hasattr(x, "shape") else x * 0.0 + 1.0
    prev2 = 1.0
    prev = x
    for m in range(2, n + 1):
        prev, prev2 = x * prev - (m - 1) * prev2, prev
    return prev


def hermite_generating_check(t: float, x: float, n_terms: int) -> float:
    """Gap |exp(tx - t^2/2) - sum_{n<=N} t^n/n! h_n(x)| for the partial sum."""
    target = math.exp(t * x - t * t / 2.0)
    acc = 0.0
    coef = 1.0
    for n in range(n_terms + 1):
        acc += coef * hermite_eval(n, x)
        coef *= t / (n + 1)
    return abs(target - acc)


def hermite_shift_identity_gap(l: int, x: float, y: float) -> float:
    """Gap |sum_k C(l,k) x^k h_{l-k}(y) - h_l(x + y)|; identically 0 in exact math."""
    acc = 0.0
    for k in range(l + 1):
        acc += math.comb(l, k) * x ** k * hermite_eval(l - k, y)
    return abs(acc - hermite_eval(l, x + y))


@dataclass
class StirlingTable:
    """Second-kind Stirling numbers {j, k} as exact integers, grown on demand."""

    rows: list = field(default_factory=lambda: [[1]])

    def extend_to(self, j: int) -> None:
        while len(self.rows) <= j:
            m = len(self.rows)
            prev = self.rows[m - 1]
            row = [0] * (m + 1)
            for k in range(1, m + 1):
                row[k] = (prev[k] * k if k < len(prev) else 0) + prev[k - 1]
            self.rows.append(row)

    def value(self, j: int, k: int) -> int:
        if j < 0 or k < 0:
            raise ValueError("Stirling indices must be >= 0")
        if k > j:
            return 0
        self.extend_to(j)
        return self.rows[j][k]


_STIRLING = StirlingTable()


def stirling2(j: int, k: int) -> int:
    """Stirling number of the second kind {j, k}, exact."""
    return _STIRLING.value(j, k)


def stirling_falling_sum(p: int, n: int) -> int:
    """Exact sum_{l=0}^{p} p!/(p-l)! {2n, l}, which collapses to p^(2n)."""
    if p < 0 or n < 0:
        raise ValueError("need p >= 0 and n >= 0")
    total = 0
    falling = 1
    for l in range(p + 1):
        total += falling * stirling2(2 * n, l)
        falling *= p - l
    return total


def beta_fn(x: float, y: float) -> float:
    """Euler beta B(x, y) through log-gamma, valid for x, y > 0."""
    if x <= 0.0 or y <= 0.0:
        raise ValueError("beta_fn requires positive arguments")
    return math.exp(math.lgamma(x) + math.lgamma(y) - math.lgamma(x + y))
