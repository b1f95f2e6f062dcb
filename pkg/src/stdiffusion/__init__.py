"""Diffusion-based spatio-temporal point processes on a numpy autodiff core."""

__version__ = "0.1.0"
