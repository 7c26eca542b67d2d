"""Video individual counting by density-map decomposition with optimal-transport
descriptor association, plus descriptor-voting tracking, on synthetic crowds."""
from __future__ import annotations

__version__ = "0.1.0"
