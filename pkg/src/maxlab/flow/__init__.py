"""Divergence-free drifts, common-noise flows and their diagnostics."""
