"""Desk-scale multi-view diffusion with 3D feedback."""

__version__ = "0.1.0"
