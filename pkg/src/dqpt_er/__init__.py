"""Quench dynamics of transverse-field Ising models on Erdős–Rényi networks."""
from __future__ import annotations

__version__ = "0.1.0"

from . import collective, corrstats, ensemble, hamcore, netgen, semiclassics  # noqa: F401
