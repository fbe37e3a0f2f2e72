"""Nested neural ODEs with orthogonal weight flows, trained by ES or exact gradients."""

__version__ = "0.1.0"
