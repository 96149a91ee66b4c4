"""Online multivariate forecasting with drift detection and noise-augmented adaptation."""

__version__ = "0.1.0"
