"""Frozen no-linkage stereo probe.

Descriptor export on duplicated input, row-wise cosine cost volume,
winner-take-all, four-direction SGM with local soft refinement, left-right
consistency, and the disparity/retrieval metrics.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from . import encoder as enc
from . import tensor as T
from .fusion import ImagePair, TokenGridGeometry, interleave
from .kernels import sgm_aggregate

INVALID = np.float32(np.inf)


@dataclass
class DescriptorMap:
    desc: np.ndarray  # H_p x W_p x d
    source: str = ""
    normalized: bool = True


@dataclass
class CostVolume:
    """cost[r, p, d] matches reference (r, p) to the other view at p -+ d
    (minus for left reference, plus for right); invalid entries are +inf."""

    cost: np.ndarray  # H_p x W_p x D_max, float32
    direction: str = "left"


@dataclass
class DisparityResult:
    wta: np.ndarray        # integer tokens
    refined: np.ndarray    # fractional tokens, within +-0.5 of the SGM argmin
    lr_valid: Optional[np.ndarray] = None
    lr_keep: Optional[float] = None  # percent


def config_for_image(cfg: enc.EncoderConfig, height: int, width: int) -> enc.EncoderConfig:
    """Re-target the geometry at a new image size.

    The row-embedding table fixes the token row count, so the height must
    match the training geometry; width may vary under rotary positions
    but not under the absolute-table ablation variants.
    """
    g = cfg.geometry
    if height != g.height:
        raise ValueError(f"image height {height} mismatches trained row count (H={g.height})")
    if width != g.width and cfg.pos_variant != "patch-phase-2d":
        raise ValueError(f"pos_variant {cfg.pos_variant} cannot re-target width "
                         f"{g.width} -> {width}")
    if width == g.width:
        return cfg
    return replace(cfg, geometry=TokenGridGeometry(p_h=g.p_h, p_w=g.p_w,
                                                   height=height, width=width))


def phase_average(grid: np.ndarray) -> np.ndarray:
    """[H_p x 2W_p x d] -> [H_p x W_p x d] mean of the two phase tokens."""
    return 0.5 * (grid[:, 0::2, :] + grid[:, 1::2, :])


def l2_normalize(x: np.ndarray, axis: int = -1, eps: float = 1e-12) -> np.ndarray:
    n = np.sqrt((x.astype(np.float64) ** 2).sum(axis=axis, keepdims=True))
    return (x / np.maximum(n, eps)).astype(np.float32)


def export_descriptors(cfg: enc.EncoderConfig, params: dict[str, T.Tensor],
                       image: np.ndarray, normalize: bool = True,
                       source: str = "") -> DescriptorMap:
    """Duplicated-input forward (I, I), phase-averaged de-positioned tokens."""
    cfg = config_for_image(cfg, image.shape[1], image.shape[2])
    fused = interleave(ImagePair(left=image, right=image))
    fused.provenance = "duplicated"
    state = enc.forward(fused.data[None], cfg, params)
    grid = state.grid(state.final_depos)[0]
    desc = phase_average(grid)
    if normalize:
        desc = l2_normalize(desc)
    return DescriptorMap(desc=desc.astype(np.float32), source=source, normalized=normalize)


def build_cost_volume(d_ref: DescriptorMap, d_other: DescriptorMap, d_max: int,
                      direction: str = "left") -> CostVolume:
    """cost = 1 - cosine, row-wise; left reference looks left (p - d),
    right reference looks right (p + d)."""
    a, b = d_ref.desc, d_other.desc
    if a.shape != b.shape:
        raise ValueError(f"descriptor shape mismatch: {a.shape} vs {b.shape}")
    h, w, _ = a.shape
    if d_max > w:
        raise ValueError(f"d_max={d_max} exceeds token columns {w}")
    cost = np.full((h, w, d_max), INVALID, dtype=np.float32)
    for d in range(d_max):
        if direction == "left":
            if d < w:
                sim = np.einsum("rpc,rpc->rp", a[:, d:, :].astype(np.float64),
                                b[:, :w - d, :].astype(np.float64))
                cost[:, d:, d] = (1.0 - sim).astype(np.float32)
        elif direction == "right":
            if d < w:
                sim = np.einsum("rpc,rpc->rp", a[:, :w - d, :].astype(np.float64),
                                b[:, d:, :].astype(np.float64))
                cost[:, :w - d, d] = (1.0 - sim).astype(np.float32)
        else:
            raise ValueError(f"unknown direction {direction!r}")
    return CostVolume(cost=cost, direction=direction)


def wta(cost: np.ndarray) -> np.ndarray:
    """Per-cell argmin over disparity; ties break toward smaller d."""
    return np.argmin(cost, axis=2).astype(np.int64)


def sgm(cost: np.ndarray, p1: float, p2: float) -> tuple[np.ndarray, np.ndarray]:
    """Four-direction SGM; returns (aggregated volume, argmin disparity)."""
    if not (0.0 <= p1 <= p2):
        raise ValueError("SGM penalties must satisfy 0 <= P1 <= P2")
    agg = sgm_aggregate(cost, p1, p2)
    return agg, wta(agg)


def soft_refine(agg: np.ndarray, disp: np.ndarray, window: int = 2,
                temperature: float = 1.0) -> np.ndarray:
    """Soft-argmin over a +-window around the discrete optimum.

    Expectation of d under softmax(-cost/temperature) on the window,
    clipped to +-0.5 token of the discrete argmin.
    """
    if window < 1:
        raise ValueError("refine window must be >= 1")
    h, w, nd = agg.shape
    if 2 * window + 1 > nd:
        raise ValueError(f"window {window} exceeds disparity extent {nd}")
    offs = np.arange(-window, window + 1)
    idx = disp[:, :, None] + offs[None, None, :]
    inside = (idx >= 0) & (idx < nd)
    local = np.where(inside, np.take_along_axis(agg, np.clip(idx, 0, nd - 1), axis=2), np.inf)
    z = -local.astype(np.float64) / temperature
    z -= z.max(axis=2, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=2, keepdims=True)
    expect = (p * idx).sum(axis=2)
    return np.clip(expect, disp - 0.5, disp + 0.5).astype(np.float64)


def lr_check(disp_l: np.ndarray, disp_r: np.ndarray,
             tol: float = 1.0) -> tuple[np.ndarray, float]:
    """Cross-check left and right disparities; returns (valid mask, keep %).

    Valid iff |disp_l(r,p) - disp_r(r, p - round(disp_l(r,p)))| <= tol;
    out-of-grid lookups are invalid.
    """
    h, w = disp_l.shape
    q = np.rint(disp_l).astype(np.int64)
    target = np.arange(w)[None, :] - q
    inside = (target >= 0) & (target < w)
    rr = np.repeat(np.arange(h)[:, None], w, axis=1)
    back = np.zeros_like(disp_l, dtype=np.float64)
    back[inside] = disp_r[rr[inside], target[inside]]
    valid = inside & (np.abs(disp_l - back) <= tol)
    return valid, 100.0 * float(valid.mean())


def nn_row_match(d_l: DescriptorMap, d_r: DescriptorMap) -> np.ndarray:
    """Full-row nearest-neighbor matching: signed disparity p - argmax_p' sim.

    This is the raw frozen-feature matching rule used for the synthetic
    benchmark scores; ties break toward the smallest candidate column.
    """
    sim = np.einsum("rpc,rqc->rpq", d_l.desc.astype(np.float64), d_r.desc.astype(np.float64))
    best = sim.argmax(axis=2)
    p = np.arange(d_l.desc.shape[1])[None, :]
    return (p - best).astype(np.float64)


def disparity_metrics(pred_tokens: np.ndarray, gt_px: np.ndarray,
                      valid: np.ndarray, token_px: float) -> dict[str, float]:
    """EPE in pixels, Bad@1tok %, and D1 % on the valid token set."""
    if not valid.any():
        raise ValueError("empty valid set")
    pred_px = pred_tokens[valid] * token_px
    gt = gt_px[valid]
    err = np.abs(pred_px - gt)
    err_tok = err / token_px
    d1_thresh = np.maximum(3.0, 0.05 * gt)
    return {
        "epe_px": float(err.mean()),
        "bad1tok_pct": 100.0 * float((err_tok > 1.0).mean()),
        "d1_pct": 100.0 * float((err > d1_thresh).mean()),
    }


def pair_collapse_feature(grid: np.ndarray, r: int, p: int) -> np.ndarray:
    """[even, odd, |even-odd|, even*odd] over the phase pair of cell (r,p);
    grid is the native-pair fused token grid [H_p x 2W_p x d]."""
    a = grid[r, 2 * p, :]
    b = grid[r, 2 * p + 1, :]
    return np.concatenate([a, b, np.abs(a - b), a * b])


# ---------------------------------------------------------------------------
# retrieval


def _pool(desc: DescriptorMap) -> np.ndarray:
    v = desc.desc.reshape(-1, desc.desc.shape[-1]).mean(axis=0, dtype=np.float64)
    n = np.sqrt((v ** 2).sum())
    return v / max(n, 1e-12)


def retrieval_eval(pairs: list[tuple[DescriptorMap, DescriptorMap]],
                   hard_subset_size: int, rng: np.random.Generator,
                   ks: tuple[int, ...] = (1, 5)) -> dict[str, float]:
    """Left-to-right retrieval over mean-pooled descriptors.

    Top-k uses the full right set; Hard@k ranks the positive against the
    hardest negatives mined from a random subset; margin is positive
    similarity minus the strongest mined negative.
    """
    n = len(pairs)
    if n < 2:
        raise ValueError("retrieval needs at least 2 pairs")
    if n < hard_subset_size:
        raise ValueError("hard_subset_size exceeds the number of pairs")
    lefts = np.stack([_pool(dl) for dl, _ in pairs])
    rights = np.stack([_pool(dr) for _, dr in pairs])
    sims = lefts @ rights.T  # [n, n]
    out = {f"top{k}": 0.0 for k in ks}
    out.update({f"hard{k}": 0.0 for k in ks})
    margins = []
    for i in range(n):
        s = sims[i]
        pos = s[i]
        # deterministic tie rule: earlier index wins
        rank = int((s > pos).sum() + ((s == pos) & (np.arange(n) < i)).sum()) + 1
        for k in ks:
            out[f"top{k}"] += float(rank <= k)
        negatives = np.delete(np.arange(n), i)
        subset = rng.choice(negatives, size=min(hard_subset_size, n - 1), replace=False)
        mined = np.sort(s[subset])[::-1]
        hard_rank = int((mined > pos).sum()) + 1
        for k in ks:
            out[f"hard{k}"] += float(hard_rank <= k)
        margins.append(pos - mined[0])
    for k in ks:
        out[f"top{k}"] = 100.0 * out[f"top{k}"] / n
        out[f"hard{k}"] = 100.0 * out[f"hard{k}"] / n
    out["margin"] = float(np.mean(margins))
    return out


# ---------------------------------------------------------------------------
# end-to-end per-pair probe


def probe_pair(cfg: enc.EncoderConfig, params: dict[str, T.Tensor], pair: ImagePair,
               d_max: int, p1: float, p2: float, lr_tol: float,
               refine_window: int = 2) -> dict:
    """Descriptor export, cost volumes both ways, WTA/SGM/refine, LR check.

    Returns raw grids plus (when ground truth is present) the Table-6-style
    metric keys in pixels.
    """
    d_l = export_descriptors(cfg, params, pair.left, source="left")
    d_r = export_descriptors(cfg, params, pair.right, source="right")
    vol_l = build_cost_volume(d_l, d_r, d_max, direction="left")
    vol_r = build_cost_volume(d_r, d_l, d_max, direction="right")
    wta_l = wta(vol_l.cost)
    agg_l, sgm_l = sgm(vol_l.cost, p1, p2)
    ref_l = soft_refine(agg_l, sgm_l, window=refine_window)
    agg_r, sgm_r = sgm(vol_r.cost, p1, p2)
    ref_r = soft_refine(agg_r, sgm_r, window=refine_window)
    lr_valid, lr_keep = lr_check(ref_l, ref_r, tol=lr_tol)

    result = {
        "wta": wta_l, "refined": ref_l, "lr_valid": lr_valid, "lr_keep": lr_keep,
        "nn_match": nn_row_match(d_l, d_r),
    }
    if pair.gt_disp is not None:
        token_px = float(cfg.geometry.p_w)  # per-view pixels per patch column
        gt = pair.gt_disp
        valid = pair.valid if pair.valid is not None else np.ones_like(gt, dtype=bool)
        m_wta = disparity_metrics(wta_l.astype(np.float64), gt, valid, token_px)
        m_ref = disparity_metrics(ref_l, gt, valid, token_px)
        metrics = {
            "gt_wta_epe": m_wta["epe_px"],
            "gt_sgmloc_epe": m_ref["epe_px"],
            "gt_sgmloc_bad1tok": m_ref["bad1tok_pct"],
            "gt_sgmloc_d1": m_ref["d1_pct"],
            "lr_keep": lr_keep,
        }
        both = valid & lr_valid
        if both.any():
            m_lr = disparity_metrics(ref_l, gt, both, token_px)
            metrics["gtlr_sgmloc_epe"] = m_lr["epe_px"]
            metrics["gtlr_sgmloc_bad1tok"] = m_lr["bad1tok_pct"]
        result["metrics"] = metrics
    return result
