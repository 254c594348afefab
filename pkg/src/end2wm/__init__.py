"""Robust blind image watermarking with a dual-decoder, gradient-blocked noise layer."""

__version__ = "0.1.0"
