"""Training load, performance metrics and fitness-fatigue model fits from cycling field data."""

__version__ = "0.1.0"
