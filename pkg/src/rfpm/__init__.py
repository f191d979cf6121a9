"""Residual feature pyramid modules for optical flow, at desk scale."""

__version__ = "0.1.0"
