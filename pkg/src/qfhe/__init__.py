"""Leveled Module-LWE encryption fused with a density-matrix simulator."""

__version__ = "0.1.0"
