"""Rotating NV-13C spin bath decoherence simulator."""

__all__ = ["__version__"]
__version__ = "0.1.0"
