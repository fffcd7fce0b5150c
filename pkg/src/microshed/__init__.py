"""Distributed under-frequency load shedding for islanded microgrids."""

__version__ = "0.1.0"
