"""Neural viscosity solutions of HJB equations for control-affine systems."""

__version__ = "0.1.0"
