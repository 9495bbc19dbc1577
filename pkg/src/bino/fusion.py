"""Binocular input fusion, micro-cell token geometry, and one-view masks.

The fused image X places left-view pixel columns at even fused columns and
right-view columns at odd ones:

    X[:, :, 2u] = L[:, :, u],   X[:, :, 2u+1] = R[:, :, u].

Every function here is pure; nothing mutates its inputs.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np


@dataclass
class ImagePair:
    """Rectified stereo pair, both views 3xHxW floats in [0, 1].

    gt_disp, when present, is per-token-cell disparity in per-view pixels
    (H_p x W_p), with a matching validity mask.
    """

    left: np.ndarray
    right: np.ndarray
    gt_disp: Optional[np.ndarray] = None
    valid: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.left.shape != self.right.shape:
            raise ValueError(f"view shape mismatch: {self.left.shape} vs {self.right.shape}")
        if self.gt_disp is not None and self.valid is not None:
            if (self.gt_disp[self.valid] < 0).any():
                raise ValueError("gt_disp must be nonnegative where valid")


@dataclass
class FusedImage:
    data: np.ndarray  # 3 x H x 2W
    provenance: str = "normal"  # normal | duplicated | counterfactual


@dataclass(frozen=True)
class TokenGridGeometry:
    """Micro-cell lattice of the fused image.

    p_w is the patch width on the *fused* image and must be even; each
    cell therefore covers p_w/2 pixels of each view.
    """

    p_h: int
    p_w: int
    height: int  # H, per-view pixels
    width: int   # W, per-view pixels
    h_p: int = field(init=False)
    w_p: int = field(init=False)
    fused_cols: int = field(init=False)
    view_patch_w: int = field(init=False)

    def __post_init__(self):
        if self.p_w % 2 != 0:
            raise ValueError("fused patch width p_w must be even")
        if self.height % self.p_h != 0:
            raise ValueError(f"H={self.height} not divisible by p_h={self.p_h}")
        if self.width % self.p_w != 0:
            raise ValueError(f"W={self.width} not divisible by p_w={self.p_w}")
        object.__setattr__(self, "h_p", self.height // self.p_h)
        object.__setattr__(self, "view_patch_w", self.p_w // 2)
        # w_p patch columns, each spanning two fused token columns (phases)
        object.__setattr__(self, "w_p", self.width // self.p_w)
        object.__setattr__(self, "fused_cols", 2 * self.width // self.p_w)

    @property
    def tokens(self) -> int:
        return self.h_p * self.fused_cols


@dataclass
class ViewMask:
    """Micro-cell mask on one view; each cell is p_h x view_patch_w pixels,
    so the grid is H_p x fused_cols (one cell per fused token)."""

    which_view: str  # "left" | "right"
    cells: np.ndarray  # bool H_p x fused_cols, True = masked
    ratio: float


def interleave(pair: ImagePair) -> FusedImage:
    """Column-interleave left and right into a 3xHx2W fused image."""
    c, h, w = pair.left.shape
    fused = np.empty((c, h, 2 * w), dtype=pair.left.dtype)
    fused[:, :, 0::2] = pair.left
    fused[:, :, 1::2] = pair.right
    return FusedImage(fused, provenance="normal")


def deinterleave(fused: FusedImage) -> ImagePair:
    """Inverse of interleave."""
    if fused.data.shape[2] % 2 != 0:
        raise ValueError("fused width must be even")
    return ImagePair(left=np.ascontiguousarray(fused.data[:, :, 0::2]),
                     right=np.ascontiguousarray(fused.data[:, :, 1::2]))


def concat_fuse(pair: ImagePair) -> FusedImage:
    """Ablation baseline: left in columns [0,W), right in [W,2W)."""
    return FusedImage(np.concatenate([pair.left, pair.right], axis=2), provenance="normal")


def deconcat(fused: FusedImage) -> ImagePair:
    if fused.data.shape[2] % 2 != 0:
        raise ValueError("fused width must be even")
    w = fused.data.shape[2] // 2
    return ImagePair(left=np.ascontiguousarray(fused.data[:, :, :w]),
                     right=np.ascontiguousarray(fused.data[:, :, w:]))


def block_interleave(pair: ImagePair, stride: int) -> FusedImage:
    """Experimental stride-2/4 variants: interleave blocks of `stride`
    consecutive columns per view instead of single columns."""
    c, h, w = pair.left.shape
    if w % stride != 0:
        raise ValueError(f"W={w} not divisible by stride={stride}")
    lf = pair.left.reshape(c, h, w // stride, stride)
    rf = pair.right.reshape(c, h, w // stride, stride)
    fused = np.stack([lf, rf], axis=3).reshape(c, h, 2 * w)
    return FusedImage(np.ascontiguousarray(fused), provenance="normal")


def fuse(pair: ImagePair, mode: str = "interleave", stride: int = 1) -> FusedImage:
    if mode == "interleave":
        if stride == 1:
            return interleave(pair)
        return block_interleave(pair, stride)
    if mode == "concat":
        return concat_fuse(pair)
    raise ValueError(f"unknown fusion mode: {mode}")


def phase_decompose(c: int) -> tuple[int, int]:
    """Fused column c = 2p + q with patch column p and phase q in {0,1}."""
    if c < 0:
        raise ValueError("fused column must be nonnegative")
    return c // 2, c % 2


def sample_one_view_mask(geometry: TokenGridGeometry, ratio: float,
                         rng: np.random.Generator,
                         which_view: Optional[str] = None) -> ViewMask:
    """Uniformly random micro-cell mask on exactly one view.

    The masked cell count is round(ratio * H_p * W_p); the view is a fair
    coin flip unless forced.
    """
    if not 0.0 <= ratio <= 1.0:
        raise ValueError("mask ratio must lie in [0, 1]")
    if which_view is None:
        which_view = "left" if rng.random() < 0.5 else "right"
    n_cells = geometry.h_p * geometry.fused_cols
    n_masked = int(round(ratio * n_cells))
    cells = np.zeros(n_cells, dtype=bool)
    if n_masked > 0:
        cells[rng.choice(n_cells, size=n_masked, replace=False)] = True
    cells = cells.reshape(geometry.h_p, geometry.fused_cols)
    return ViewMask(which_view=which_view, cells=cells, ratio=n_masked / n_cells)


# fill value for masked pixels: image values live in [0, 1], so a negative
# sentinel is unambiguous — a masked slab can never be mistaken for dark
# texture content
MASK_FILL = -1.0


def apply_view_mask(pair: ImagePair, mask: ViewMask,
                    geometry: TokenGridGeometry) -> ImagePair:
    """Sentinel-fill the masked micro cells of one view (pixels before fusion)."""
    left, right = pair.left.copy(), pair.right.copy()
    target = left if mask.which_view == "left" else right
    ph, vw = geometry.p_h, geometry.view_patch_w
    pixel_mask = np.repeat(np.repeat(mask.cells, ph, axis=0), vw, axis=1)
    target[:, pixel_mask] = MASK_FILL
    return ImagePair(left=left, right=right, gt_disp=pair.gt_disp, valid=pair.valid)


def mask_both_views(pair: ImagePair, ratio: float, geometry: TokenGridGeometry,
                    rng: np.random.Generator) -> ImagePair:
    """Rejected-ablation variant: independent cell masks on both views."""
    out = apply_view_mask(pair, sample_one_view_mask(geometry, ratio, rng, "left"), geometry)
    return apply_view_mask(out, sample_one_view_mask(geometry, ratio, rng, "right"), geometry)
