"""Adaptive-horizon trajectory prediction with a smoothed Fréchet scoring kernel."""

__version__ = "0.1.0"
