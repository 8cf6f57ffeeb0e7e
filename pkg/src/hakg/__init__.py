"""Hierarchy-aware knowledge-graph recommendation in the Poincare ball."""

__version__ = "0.1.0"
