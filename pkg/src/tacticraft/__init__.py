"""Tactic-conditioned adapters over a frozen multi-head policy."""

__version__ = "0.1.0"
