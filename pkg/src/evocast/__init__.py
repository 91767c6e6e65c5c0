"""Evolutionary search over DAG-encoded neural networks for day-ahead
electricity load forecasting, on a from-scratch numpy autodiff core."""

__version__ = "0.1.0"
