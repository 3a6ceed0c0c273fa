"""Desk-scale laboratory for jointly learned multi-contrast MR sampling,
recurrent reconstruction, and quantitative map synthesis."""

__version__ = "0.1.0"
