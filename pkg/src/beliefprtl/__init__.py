"""Counterexample-guided synthesis of belief-space plans for PRTL specifications."""

__version__ = "0.1.0"
