"""
Global configuration for heatseg.
"""

from __future__ import annotations

import os

__all__ = ["K_FLOOR", "DEFAULT_EMBED_DIM", "DEFAULT_STATE_DIM", "DEFAULT_NSD_TOLERANCE", "SCAN_CHUNK", "threads"]

# Added to every predicted diffusivity so k stays strictly positive and the exponent keeps a gradient.
K_FLOOR = 1e-6

DEFAULT_EMBED_DIM = 8
DEFAULT_STATE_DIM = 8

# Surface distance tolerance, in voxels, used when none is given.
DEFAULT_NSD_TOLERANCE = 1.0

# Sequence length handled per block by the chunked selective scan.
SCAN_CHUNK = 64

THREADS_ENV = "HEATSEG_THREADS"


def threads() -> int:
    """
    Upper bound on worker threads for data-parallel evaluation, read from ``HEATSEG_THREADS``.
    """
    raw = os.environ.get(THREADS_ENV, "1")
    try:
        value = int(raw)
    except ValueError:
        raise ValueError(f"{THREADS_ENV} must be an integer, got {raw!r}")
    return max(1, value)
