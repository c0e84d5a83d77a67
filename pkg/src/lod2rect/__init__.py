"""LoD-2 building reconstruction from a DSM, an orthophoto and building masks."""

__version__ = "0.1.0"
