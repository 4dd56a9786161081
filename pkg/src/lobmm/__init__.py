"""Queue-reactive limit order book models, calibration, market-making MDPs and backtesting."""

__version__ = "0.1.0"
