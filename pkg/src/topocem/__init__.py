"""Busbar-splitting topology control on a 14-bus grid with a cross-entropy agent."""

__version__ = "0.1.0"
