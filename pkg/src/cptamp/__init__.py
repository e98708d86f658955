"""Constraint-primitive guided binding search for task and motion planning."""

__version__ = "0.1.0"
