"""Session-based next-destination recommendation with a numpy autodiff engine."""

__version__ = "0.1.0"
