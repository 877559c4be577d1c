"""Closed-box API adaptation lab: prime-then-reprogram versus zeroth-order baselines."""

__version__ = "0.1.0"
