"""Tabular offline RL for simulated chronic-care titration."""

__version__ = "0.1.0"
