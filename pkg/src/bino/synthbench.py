"""Deterministic dual-view benchmark with known per-token disparity.

Each sample is a textured crop (left) paired with a horizontally shifted,
reflect-padded copy (right), so ground-truth disparity is exact by
construction.  HARD presets additionally run the stereo-aware nuisance
stack with independent per-view perturbations.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, asdict
from typing import Optional

import numpy as np

from .distill import NuisanceConfig, apply_nuisance
from .fusion import ImagePair, TokenGridGeometry
from .imageio import read_image, write_image

PRESETS = ("EASY_S1", "HARD_S1", "HARD_S2")


@dataclass
class BenchConfig:
    height: int = 48
    width: int = 160
    d_min: int = 2
    d_max: int = 12
    preset: str = "HARD_S1"
    occlusion: bool = True
    photometric: bool = True  # photometric jitter + noise
    seed: int = 0
    p_h: int = 4
    p_w: int = 4
    source_manifest: Optional[str] = None  # newline paths; None = procedural textures

    def __post_init__(self):
        if self.preset not in PRESETS:
            raise ValueError(f"unknown preset {self.preset!r}")
        if not 0 <= self.d_min <= self.d_max:
            raise ValueError("need 0 <= d_min <= d_max")
        if self.d_max >= self.width:
            raise ValueError("d_max must be smaller than the crop width")

    @property
    def geometry(self) -> TokenGridGeometry:
        return TokenGridGeometry(p_h=self.p_h, p_w=self.p_w,
                                 height=self.height, width=self.width)

    def to_dict(self) -> dict:
        return asdict(self)


def preset_config(preset: str, seed: int = 0, height: int = 48, width: int = 160,
                  **overrides) -> BenchConfig:
    base = dict(height=height, width=width, seed=seed, preset=preset)
    if preset == "EASY_S1":
        base.update(d_min=2, d_max=12, occlusion=False, photometric=False)
    elif preset == "HARD_S1":
        base.update(d_min=2, d_max=12, occlusion=True, photometric=True)
    elif preset == "HARD_S2":
        # wider displacement range than HARD_S1, same nuisance stack
        base.update(d_min=2, d_max=24, occlusion=True, photometric=True)
    else:
        raise ValueError(f"unknown preset {preset!r}")
    base.update(overrides)
    return BenchConfig(**base)


@dataclass
class BenchSample:
    pair: ImagePair
    shift: int          # pixels
    preset: str
    seed: int
    index: int


def _procedural_texture(rng: np.random.Generator, h: int, w: int) -> np.ndarray:
    """Multi-octave value noise in [0,1], weighted toward the fine octaves so
    every patch-sized window is locally distinctive: a masked cell cannot be
    guessed from its neighbors and must be matched against the other view."""
    img = np.zeros((3, h, w))
    for block in (16, 8, 4, 2, 1):
        coarse = rng.random((3, h // block + 2, w // block + 2))
        up = np.repeat(np.repeat(coarse, block, axis=1), block, axis=2)[:, :h, :w]
        img += up * (16.0 / block)
    img -= img.min()
    img /= img.max()
    # dark-skewed value distribution: a polarity-inverted patch then has a
    # clearly different brightness statistic than any clean patch, so
    # polarity is locally identifiable (and polarity invariance learnable)
    np.square(img, out=img)
    return img.astype(np.float32)


def _nuisance_for(cfg: BenchConfig) -> Optional[NuisanceConfig]:
    if not cfg.occlusion and not cfg.photometric:
        return None
    return NuisanceConfig(
        occlusion=cfg.occlusion,
        photometric=cfg.photometric,
        # jitter stays mild so the brightness statistic that identifies
        # polarity survives it; the polarity inversion itself is what
        # defeats matching on raw pixel statistics
        brightness=(-0.08, 0.08),
        contrast=(0.85, 1.15),
        gamma=(0.85, 1.2),
        noise_sigma=(0.0, 0.05) if cfg.photometric else (0.0, 0.0),
        photometric_mode="independent",
        polarity="opposite" if cfg.photometric else "none",
    )


def make_sample(cfg: BenchConfig, index: int,
                sources: Optional[list[np.ndarray]] = None) -> BenchSample:
    """Deterministic in (seed, index); safe to generate out of order."""
    rng = np.random.default_rng([cfg.seed, index])
    h, w = cfg.height, cfg.width
    if sources:
        src = sources[int(rng.integers(len(sources)))]
        if src.shape[1] < h or src.shape[2] < w:
            raise ValueError(f"source image {src.shape} smaller than crop {h}x{w}")
        r0 = int(rng.integers(0, src.shape[1] - h + 1))
        c0 = int(rng.integers(0, src.shape[2] - w + 1))
        crop = np.ascontiguousarray(src[:, r0:r0 + h, c0:c0 + w])
    else:
        big = _procedural_texture(rng, h + 16, w + 32)
        r0 = int(rng.integers(0, 17))
        c0 = int(rng.integers(0, 33))
        crop = np.ascontiguousarray(big[:, r0:r0 + h, c0:c0 + w])

    s = int(rng.integers(cfg.d_min, cfg.d_max + 1))
    padded = np.pad(crop, ((0, 0), (0, 0), (0, s)), mode="reflect") if s else crop
    right = np.ascontiguousarray(padded[:, :, s:s + w])

    geom = cfg.geometry
    gt = np.full((geom.h_p, geom.w_p), float(s), dtype=np.float32)
    cols = np.arange(geom.w_p) * geom.p_w
    valid = np.broadcast_to(cols - s >= 0, gt.shape).copy()

    pair = ImagePair(left=crop, right=right, gt_disp=gt, valid=valid)
    nuisance = _nuisance_for(cfg)
    if nuisance is not None:
        perturbed = apply_nuisance(ImagePair(left=pair.left, right=pair.right), nuisance, rng)
        pair = ImagePair(left=perturbed.left, right=perturbed.right, gt_disp=gt, valid=valid)
    return BenchSample(pair=pair, shift=s, preset=cfg.preset, seed=cfg.seed, index=index)


def generate(cfg: BenchConfig, n: int) -> list[BenchSample]:
    sources = None
    if cfg.source_manifest:
        with open(cfg.source_manifest) as f:
            paths = [ln.strip() for ln in f if ln.strip()]
        root = os.path.dirname(os.path.abspath(cfg.source_manifest))
        sources = [read_image(os.path.join(root, p)) for p in paths]
    return [make_sample(cfg, i, sources) for i in range(n)]


def score_matching(pred_tokens: np.ndarray, sample: BenchSample,
                   p_w: int) -> dict[str, float]:
    """PCK@{0,1,2} (%) and EPE (tokens) of a token-grid disparity prediction."""
    valid = sample.pair.valid
    if valid is None or not valid.any():
        raise ValueError("empty valid set")
    gt_tok = sample.pair.gt_disp[valid] / p_w
    err = np.abs(pred_tokens[valid] - gt_tok)
    return {
        "pck0": 100.0 * float((err <= 0).mean()),
        "pck1": 100.0 * float((err <= 1).mean()),
        "pck2": 100.0 * float((err <= 2).mean()),
        "epe_tokens": float(err.mean()),
    }


# ---------------------------------------------------------------------------
# on-disk layout: <root>/<index>_L.ppm, <index>_R.ppm, <index>_gt.csv + manifest


def write_dataset(root: str, cfg: BenchConfig, samples: list[BenchSample]) -> None:
    os.makedirs(root, exist_ok=True)
    for s in samples:
        write_image(os.path.join(root, f"{s.index:05d}_L.ppm"), s.pair.left)
        write_image(os.path.join(root, f"{s.index:05d}_R.ppm"), s.pair.right)
        with open(os.path.join(root, f"{s.index:05d}_gt.csv"), "w") as f:
            f.write("row,col,disp_tokens\n")
            valid = s.pair.valid
            gt_tok = s.pair.gt_disp / cfg.p_w
            for r in range(gt_tok.shape[0]):
                for c in range(gt_tok.shape[1]):
                    if valid[r, c]:
                        f.write(f"{r},{c},{gt_tok[r, c]:.6f}\n")
    manifest = {"config": cfg.to_dict(), "seed": cfg.seed, "count": len(samples),
                "shifts": {str(s.index): s.shift for s in samples}}
    with open(os.path.join(root, "manifest.json"), "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)


def load_dataset(root: str) -> tuple[BenchConfig, list[BenchSample]]:
    with open(os.path.join(root, "manifest.json")) as f:
        manifest = json.load(f)
    cfg = BenchConfig(**manifest["config"])
    geom = cfg.geometry
    samples = []
    for i in range(manifest["count"]):
        left = read_image(os.path.join(root, f"{i:05d}_L.ppm"))
        right = read_image(os.path.join(root, f"{i:05d}_R.ppm"))
        gt = np.zeros((geom.h_p, geom.w_p), dtype=np.float32)
        valid = np.zeros((geom.h_p, geom.w_p), dtype=bool)
        with open(os.path.join(root, f"{i:05d}_gt.csv")) as f:
            next(f)  # header
            for line in f:
                r, c, d = line.strip().split(",")
                gt[int(r), int(c)] = float(d) * cfg.p_w
                valid[int(r), int(c)] = True
        pair = ImagePair(left=left, right=right, gt_disp=gt, valid=valid)
        samples.append(BenchSample(pair=pair, shift=int(manifest["shifts"][str(i)]),
                                   preset=cfg.preset, seed=cfg.seed, index=i))
    return cfg, samples
