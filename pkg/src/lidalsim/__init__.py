"""Optical light detection and localization (LiDAL) simulator."""

__version__ = "0.1.0"
