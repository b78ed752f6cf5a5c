"""Lagrangian free-boundary compressible Euler laboratory on a periodic slab."""

from .grid import BOTTOM, FACES, TOP, Grid, build_grid

__all__ = ["BOTTOM", "FACES", "TOP", "Grid", "build_grid"]
