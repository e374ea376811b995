"""Training library for local learning on SVD-factorized layers, with
backprop and feedback-alignment baselines plus alignment diagnostics."""

__version__ = "0.1.0"
