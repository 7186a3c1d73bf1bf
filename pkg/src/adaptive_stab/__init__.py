"""Offline-online adaptive stabilization of uncertain linear dynamics."""

from .kernels import BACKEND

__all__ = ["BACKEND"]
__version__ = "0.1.0"
