"""Toolchain for a vector-MAC CNN accelerator: compiler, simulator, oracle."""

__version__ = "0.1.0"
