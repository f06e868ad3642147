"""Appliance behaviour association mining for household day-ahead load forecasting."""

__version__ = "0.1.0"
