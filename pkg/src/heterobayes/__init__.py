"""Bayesian repeatability and heterogeneous-response analysis for imaging biomarkers."""

__version__ = "0.1.0"
