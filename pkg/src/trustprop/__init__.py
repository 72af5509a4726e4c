"""Trust-filtered block propagation routing with a residual graph diffusion solver."""

__version__ = "0.1.0"
