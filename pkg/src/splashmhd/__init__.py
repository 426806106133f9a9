"""Splash formation in 2D free-boundary viscous MHD via a conformal Lagrangian Picard scheme."""

__version__ = "0.1.0"
