"""Mechanistic analysis of the fused token geometry.

Even-phase tokens query a softmaxed cosine-similarity distribution over
all odd-phase tokens of the same fused grid; the metrics summarize how
much of that mass lands on the epipolar row and the true correspondence,
layer by layer, and under counterfactual input edits.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import encoder as enc
from . import tensor as T
from .fusion import ImagePair, TokenGridGeometry, interleave
from .stereo import l2_normalize
from .synthbench import BenchSample

COUNTERFACTUALS = ("replace-right", "row-shuffle-right", "duplicate-left")


@dataclass
class PhaseSimilarity:
    """probs[r, p, r', p']: distribution of even-phase query (r, p) over
    every odd-phase candidate (r', p'); each query distribution sums to 1."""

    probs: np.ndarray
    temperature: float


@dataclass
class GeometryMetrics:
    row_conc: float
    gt_at_0: float
    gt_at_1: float
    mrr: float
    entropy: float
    acc_at_0: float
    acc_at_1: float
    queries: int

    def to_dict(self) -> dict[str, float]:
        return {"row_conc": self.row_conc, "gt_at_0": self.gt_at_0,
                "gt_at_1": self.gt_at_1, "mrr": self.mrr, "entropy": self.entropy,
                "acc_at_0": self.acc_at_0, "acc_at_1": self.acc_at_1,
                "queries": self.queries}


def phase_distribution(grid: np.ndarray, temperature: float) -> PhaseSimilarity:
    """Cosine similarity from each even-phase token to every odd-phase
    token of a [H_p x 2W_p x d] layer state, softmaxed over the full
    odd-phase set at the given temperature."""
    even = l2_normalize(grid[:, 0::2, :].astype(np.float64))
    odd = l2_normalize(grid[:, 1::2, :].astype(np.float64))
    sim = np.einsum("rpc,sqc->rpsq", even.astype(np.float64), odd.astype(np.float64))
    h, w = sim.shape[:2]
    flat = sim.reshape(h, w, -1) / temperature
    flat -= flat.max(axis=-1, keepdims=True)
    e = np.exp(flat)
    probs = (e / e.sum(axis=-1, keepdims=True)).reshape(h, w, h, w)
    return PhaseSimilarity(probs=probs, temperature=temperature)


def geometry_metrics(dist: PhaseSimilarity, targets: np.ndarray,
                     valid: Optional[np.ndarray] = None) -> GeometryMetrics:
    """Aggregate epipolar geometry metrics over valid queries.

    targets[r, p] is the ground-truth candidate column on the query's own
    row; queries whose target is off-grid must be excluded via `valid`.
    """
    probs = dist.probs
    h, w = probs.shape[:2]
    if valid is None:
        valid = np.ones((h, w), dtype=bool)
    if ((targets[valid] < 0) | (targets[valid] >= w)).any():
        raise ValueError("target off-grid for a valid query")
    if not valid.any():
        raise ValueError("no valid queries")

    rr = np.arange(h)[:, None]
    same_row = probs[rr, np.arange(w)[None, :], rr, :]  # [h, w, w]
    row_conc = same_row.sum(axis=-1)

    tgt = np.clip(targets, 0, w - 1)
    gt0 = np.take_along_axis(same_row, tgt[:, :, None], axis=-1)[:, :, 0]
    gt1 = gt0.copy()
    for off in (-1, 1):
        col = targets + off
        inside = (col >= 0) & (col < w)
        vals = np.take_along_axis(same_row, np.clip(col, 0, w - 1)[:, :, None], axis=-1)[:, :, 0]
        gt1 = gt1 + np.where(inside, vals, 0.0)

    flat = probs.reshape(h, w, -1)
    pt = gt0[:, :, None]
    rank = (flat > pt).sum(axis=-1) + (flat == pt).sum(axis=-1)  # ties -> worst rank
    mrr = 1.0 / rank

    cond = same_row / np.maximum(row_conc[:, :, None], 1e-300)
    entropy = -(np.where(cond > 0, cond * np.log(np.maximum(cond, 1e-300)), 0.0)).sum(axis=-1)

    amax = flat.argmax(axis=-1)
    r_star, p_star = amax // w, amax % w
    on_row = r_star == rr
    acc0 = on_row & (np.abs(p_star - targets) <= 0)
    acc1 = on_row & (np.abs(p_star - targets) <= 1)

    n = int(valid.sum())
    return GeometryMetrics(
        row_conc=float(row_conc[valid].mean()),
        gt_at_0=float(gt0[valid].mean()),
        gt_at_1=float(gt1[valid].mean()),
        mrr=float(mrr[valid].mean()),
        entropy=float(entropy[valid].mean()),
        acc_at_0=float(acc0[valid].mean()),
        acc_at_1=float(acc1[valid].mean()),
        queries=n,
    )


def sample_targets(sample: BenchSample, geometry: TokenGridGeometry
                   ) -> tuple[np.ndarray, np.ndarray]:
    """(targets, valid) on the per-phase grid from per-token gt disparity."""
    gt = sample.pair.gt_disp
    base_valid = sample.pair.valid if sample.pair.valid is not None \
        else np.ones_like(gt, dtype=bool)
    p = np.arange(geometry.w_p)[None, :]
    targets = p - np.rint(gt / geometry.p_w).astype(np.int64)
    valid = base_valid & (targets >= 0) & (targets < geometry.w_p)
    return targets, valid


# ---------------------------------------------------------------------------
# counterfactual interventions


def counterfactual(pair: ImagePair, kind: str, rng: np.random.Generator,
                   geometry: TokenGridGeometry,
                   donor: Optional[ImagePair] = None) -> tuple[ImagePair, str]:
    """Edit the right view; returns (modified pair, target rule).

    Target rule "original" keeps the sample's gt targets; "zero" uses a
    zero-disparity target (duplicate-left).
    """
    if kind not in COUNTERFACTUALS:
        raise ValueError(f"unknown counterfactual {kind!r}")
    if kind == "replace-right":
        if donor is None:
            raise ValueError("replace-right needs a donor pair")
        out = ImagePair(left=pair.left, right=donor.right.copy(),
                        gt_disp=pair.gt_disp, valid=pair.valid)
        return out, "original"
    if kind == "row-shuffle-right":
        right = pair.right.copy()
        ph, pw = geometry.p_h, geometry.p_w
        blocks = right.reshape(right.shape[0], geometry.h_p, ph, geometry.w_p, pw)
        for r in range(geometry.h_p):
            perm = rng.permutation(geometry.w_p)
            blocks[:, r] = blocks[:, r][:, :, perm, :]
        out = ImagePair(left=pair.left, right=np.ascontiguousarray(
            blocks.reshape(right.shape)), gt_disp=pair.gt_disp, valid=pair.valid)
        return out, "original"
    # duplicate-left
    zero = np.zeros((geometry.h_p, geometry.w_p), dtype=np.float32)
    out = ImagePair(left=pair.left, right=pair.left.copy(),
                    gt_disp=zero, valid=np.ones_like(zero, dtype=bool))
    return out, "zero"


# ---------------------------------------------------------------------------
# layerwise sweep


def layer_names(depth: int) -> list[str]:
    return [f"layer{i}_raw" for i in range(depth + 1)] + ["final_depos"]


def layerwise_sweep(cfg: enc.EncoderConfig, params: dict[str, T.Tensor],
                    samples: list[BenchSample], temperature: float = 0.07,
                    counterfactual_kind: Optional[str] = None,
                    seed: int = 0) -> dict[str, dict[str, float]]:
    """Geometry metrics for every tapped layer state plus the final
    de-positioned readout, pooled over all queries of all samples."""
    geometry = cfg.geometry
    names = layer_names(cfg.depth)
    sums: dict[str, dict[str, float]] = {n: {} for n in names}
    totals = {n: 0 for n in names}
    rng = np.random.default_rng(seed)

    for i, sample in enumerate(samples):
        pair = sample.pair
        if counterfactual_kind is not None:
            donor = None
            if counterfactual_kind == "replace-right":
                if len(samples) < 2:
                    raise ValueError("replace-right needs a donor pool of >= 2 samples")
                donor = samples[(i + 1) % len(samples)].pair
            pair, rule = counterfactual(pair, counterfactual_kind, rng, geometry, donor)
            sample = BenchSample(pair=pair, shift=0 if rule == "zero" else sample.shift,
                                 preset=sample.preset, seed=sample.seed, index=sample.index)
        targets, valid = sample_targets(sample, geometry)
        if not valid.any():
            continue
        fused = interleave(ImagePair(left=sample.pair.left, right=sample.pair.right))
        state = enc.forward(fused.data[None], cfg, params)
        states = [state.grid(t)[0] for t in state.per_layer] + [state.grid(state.final_depos)[0]]
        for name, grid in zip(names, states):
            dist = phase_distribution(grid, temperature)
            m = geometry_metrics(dist, targets, valid)
            for k, v in m.to_dict().items():
                if k == "queries":
                    continue
                sums[name][k] = sums[name].get(k, 0.0) + v * m.queries
            totals[name] += m.queries

    out: dict[str, dict[str, float]] = {}
    for name in names:
        if totals[name] == 0:
            raise ValueError("no valid queries in any sample")
        out[name] = {k: v / totals[name] for k, v in sums[name].items()}
        out[name]["queries"] = totals[name]
    return out
