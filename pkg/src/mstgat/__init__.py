"""Multi-dimensional spatio-temporal graph attention traffic speed forecasting."""

__version__ = "0.1.0"
