"""Numerical laboratory for the conformal constraint equations on a
uniform periodic 3-grid."""

__version__ = "0.1.0"
