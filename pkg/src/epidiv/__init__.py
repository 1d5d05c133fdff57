"""Epistemic diversity of text generators: claims, meaning classes and Hill-Shannon diversity."""

__version__ = "0.1.0"
SCHEMA_VERSION = 1
