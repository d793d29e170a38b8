"""Cascaded discrete-diffusion generation of sketch-extrude CAD sequences."""

__version__ = "0.1.0"
