"""Mixture of context-conditioned neural ODE experts for multi-family dynamical systems."""

__version__ = "0.1.0"
