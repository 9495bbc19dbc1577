"""Desk-scale lab for a binocular fused-token stereo encoder.

Pixel-interleave fusion, stereo micro-cell tokens, row-aware rotary
positions, one-view-masked EMA token distillation, a synthetic dual-view
benchmark, a frozen no-linkage stereo probe, and a mechanistic
epipolar-geometry analyzer.
"""

from .config import VERSION as __version__
from .kernels import BACKEND as sgm_backend

__all__ = ["__version__", "sgm_backend"]
