"""Typology-based building damage segmentation from bitemporal imagery."""

__version__ = "0.1.0"
