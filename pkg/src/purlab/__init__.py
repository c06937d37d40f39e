"""Desk-scale numerical laboratory for parabolic uniform rectifiability"""

try:
    from ._version import __version__
except ImportError:  # pragma: no cover
    __version__ = "0.0.0"
