"""
drst - Drift-aware performance inference for softwarized networks

This package implements the 'drst' command: synthetic counter traces, feature
selection, KPI inference and forecasting models, JS-divergence drift detection
with severity-tiered retraining, Shapley explanations and a file-based model
registry.
"""

__version__ = "0.1.0"
