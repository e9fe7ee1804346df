"""Factor-decoupled forecasting for grey spatiotemporal systems."""
__version__ = "0.1.0"
