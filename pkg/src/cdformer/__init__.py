"""Blind super-resolution with a diffusion-estimated content degradation prior."""

__version__ = "0.1.0"
