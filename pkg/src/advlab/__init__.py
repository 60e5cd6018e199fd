"""Desk-scale laboratory for adversarial training of overparameterized networks."""

__version__ = "0.1.0"
