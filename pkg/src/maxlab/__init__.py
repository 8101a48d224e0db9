"""Maximal inequalities for processes with conditional increment control,
with verification pipelines and a.e. stochastic flows for SDEs with
singular divergence-free drift."""

__version__ = "0.1.0"
