"""Post-processing figures for polyheat benchmark runs."""

__version__ = "0.1.0"
