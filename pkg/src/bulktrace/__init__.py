"""Finite elements for ropes and membranes carried by every level set of a bulk field."""

__version__ = "0.1.0"
