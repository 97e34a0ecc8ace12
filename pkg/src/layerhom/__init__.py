"""Homogenized flow and reactive transport through a thin periodic porous layer."""

from __future__ import annotations

__version__ = "0.1.0"
