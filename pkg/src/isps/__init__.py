"""Learned strict-feedback dynamics, backstepping control and incremental-stability certificates."""

__version__ = "0.1.0"
