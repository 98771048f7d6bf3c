"""Infrared/visible dual-branch fusion testbed, small enough to verify on a desk."""

__version__ = "0.1.0"
