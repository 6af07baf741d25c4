"""Truncated-series results shared by the two expansion engines."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class SeriesResult:
    """Per-order contributions and running partial sums of a truncated series.

    terms[l] is the order-l contribution: a float when evaluated on a single
    path, an ndarray when evaluated across an ensemble, or a symbolic
    expression when no path was supplied.  partial_sums[l] accumulates terms
    up to and including order l.
    """

    order: int
    terms: list
    partial_sums: list
    diagnostics: "list | None" = field(default=None)

    @property
    def value(self):
        return self.partial_sums[-1]

    def tail_magnitude(self) -> float:
        """Size of the last term, a crude truncation indicator."""
        last = self.terms[-1]
        return float(np.max(np.abs(last)))

    def to_json_dict(self) -> dict:
        def as_float(x):
            arr = np.asarray(x)
            if arr.ndim != 0:
                raise TypeError("vector-valued series results are not "
                                "JSON-serializable; evaluate on a single path")
            return float(arr)

        return {
            "order": self.order,
            "terms": [as_float(t) for t in self.terms],
            "partial_sums": [as_float(p) for p in self.partial_sums],
            "diagnostics": self.diagnostics,
        }
