"""Photovoltaic power nowcasting from power history and sky images."""

__version__ = "0.1.0"
