"""Trajectory-level evidence tracking on a double-well delayed-disambiguation benchmark."""
__version__ = "0.1.0"
