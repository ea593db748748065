"""Test-time entropy minimization with an asymmetric predictor branch."""

__version__ = "0.1.0"
