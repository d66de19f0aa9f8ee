"""Multiscale stochastic simulation of a hydrothermal power system."""

__version__ = "0.1.0"
