"""Toy-scale laboratory for Jensen-Shannon score distillation."""

__version__ = "0.1.0"
