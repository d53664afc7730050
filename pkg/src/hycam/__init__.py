"""Hybrid contextual attention modulation on a small frozen decoder-only transformer."""

__version__ = "0.1.0"
