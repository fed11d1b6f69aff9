"""Numerical limiting-absorption experiments for Schroedinger operators on periodic grids."""

from .grid import Field, GridSpec, load_field, save_field

__version__ = "0.1.0"

__all__ = ["Field", "GridSpec", "load_field", "save_field", "__version__"]
