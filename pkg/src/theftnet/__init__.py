"""Electricity-theft detection on daily smart-meter series with multi-scale dense 1-D CNNs."""

__version__ = "0.1.0"
