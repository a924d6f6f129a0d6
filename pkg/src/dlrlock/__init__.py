"""Deep low-rank locking workbench: locked-model construction, attacks, and analysis at desk scale."""

__version__ = "0.1.0"
