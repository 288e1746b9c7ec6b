"""Unsupervised pose/morphology disentanglement for simulated subtomograms."""

__version__ = "0.1.0"
