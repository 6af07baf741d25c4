"""Series evaluation of conditional expectations for fractional Brownian functionals (H > 1/2)."""

__version__ = "0.1.0"
