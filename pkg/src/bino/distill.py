"""One-view masked EMA teacher-student token distillation.

The teacher sees the full fused pair; the student sees the same pair with
exactly one view patch-masked.  Teacher logits are centered by a running
mean and sharpened by a low temperature; the loss is uniform token-level
cross entropy.  The teacher is never optimized, only EMA-tracked.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, asdict
from typing import Optional

import numpy as np

from . import tensor as T
from . import encoder as enc
from .fusion import (ImagePair, TokenGridGeometry, apply_view_mask, fuse,
                     mask_both_views, sample_one_view_mask)


@dataclass
class NuisanceConfig:
    occlusion: bool = True
    occlusion_count: tuple[int, int] = (1, 3)
    occlusion_area: tuple[float, float] = (0.02, 0.10)  # fraction per rectangle
    photometric: bool = True
    brightness: tuple[float, float] = (-0.25, 0.25)
    contrast: tuple[float, float] = (0.6, 1.4)
    gamma: tuple[float, float] = (0.7, 1.4)
    photometric_mode: str = "independent"  # shared | independent
    noise_sigma: tuple[float, float] = (0.0, 0.08)
    # polarity inversion x -> 1-x: "none", "independent" (each view flipped
    # with probability 1/2), "opposite" (right view always flipped), or
    # "pair" (both views flipped together with probability 1/2)
    polarity: str = "none"

    def __post_init__(self):
        lo, hi = self.occlusion_area
        if not (0.0 <= lo <= hi <= 1.0):
            raise ValueError("occlusion area fractions must lie in [0, 1]")
        if self.photometric_mode not in ("shared", "independent"):
            raise ValueError("photometric_mode must be shared or independent")
        if self.polarity not in ("none", "independent", "opposite", "pair"):
            raise ValueError("polarity must be none, independent, opposite, or pair")

    @classmethod
    def disabled(cls) -> "NuisanceConfig":
        return cls(occlusion=False, photometric=False, noise_sigma=(0.0, 0.0))


@dataclass
class MaskSchedule:
    start: float = 0.3
    end: float = 0.7
    ramp_fraction: float = 0.8  # of total steps; constant at `end` afterwards


@dataclass
class DistillConfig:
    steps: int = 600
    batch: int = 8
    tau_t: float = 0.04
    tau_s: float = 0.1
    center_momentum: float = 0.9
    ema_start: float = 0.996
    ema_end: float = 1.0
    proj_dim: int = 512
    mask: MaskSchedule = field(default_factory=MaskSchedule)
    mask_mode: str = "one-view"  # one-view | both-views (rejected ablation)
    fusion_mode: str = "interleave"  # interleave | concat
    fusion_stride: int = 1
    lr: float = 3e-4
    lr_cosine: bool = True
    weight_decay: float = 0.04
    betas: tuple[float, float] = (0.9, 0.999)
    nuisance: Optional[NuisanceConfig] = None  # on-the-fly; None = data as-is
    # fraction of steps over which the per-pair probability of applying the
    # on-the-fly nuisance ramps 0 -> 1 (0 = always applied from step 0); a
    # ramp lets token features form on clean pairs before the invariance
    # pressure arrives, which avoids the constant-representation collapse
    nuisance_ramp: float = 0.0

    def __post_init__(self):
        if not (0.0 < self.center_momentum < 1.0 and 0.0 < self.ema_start <= 1.0):
            raise ValueError("momenta must lie in (0, 1]")
        if not 0.0 <= self.nuisance_ramp <= 1.0:
            raise ValueError("nuisance_ramp must lie in [0, 1]")
        if self.tau_t >= self.tau_s:
            import warnings
            warnings.warn("tau_t >= tau_s: teacher is not sharpened relative to the student")
        if self.mask_mode not in ("one-view", "both-views"):
            raise ValueError("mask_mode must be one-view or both-views")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["nuisance"] = asdict(self.nuisance) if self.nuisance else None
        return d


@dataclass
class DistillState:
    """Student/teacher parameter sets plus running center and moments.

    Teacher parameters are an EMA of the student history and are never
    touched by the optimizer; the center is updated from teacher logits
    only.
    """

    student: dict[str, T.Tensor]
    teacher: dict[str, T.Tensor]
    center: np.ndarray  # [K]
    moments: T.AdamWMoments
    step: int = 0


def init_head_params(dim: int, proj_dim: int, rng: np.random.Generator) -> dict[str, T.Tensor]:
    """Token projection head: MLP bottleneck, then cosine logits against
    unit-norm prototypes. Because both the bottleneck output and the
    prototype columns are l2-normalized, the logit scale is pinned to
    [-1, 1] and cannot decay toward the uniform-output collapse."""
    s1 = 1.0 / math.sqrt(dim)
    return {
        "head.w1": T.Tensor(rng.normal(0, s1, (dim, dim)).astype(np.float32), requires_grad=True),
        "head.b1": T.Tensor(np.zeros(dim, dtype=np.float32), requires_grad=True),
        # linear bottleneck before the l2 normalization: normalizing a GELU
        # output directly would align every token with the (positive) common
        # mean direction and erase token-to-token discriminability
        "head.w2": T.Tensor(rng.normal(0, s1, (dim, dim)).astype(np.float32), requires_grad=True),
        "head.w3": T.Tensor(rng.normal(0, s1, (dim, proj_dim)).astype(np.float32), requires_grad=True),
    }


def init_state(enc_cfg: enc.EncoderConfig, cfg: DistillConfig,
               rng: np.random.Generator) -> DistillState:
    student = enc.init_params(enc_cfg, rng)
    student.update(init_head_params(enc_cfg.dim, cfg.proj_dim, rng))
    teacher = {k: T.Tensor(v.data.copy(), requires_grad=False) for k, v in student.items()}
    return DistillState(student=student, teacher=teacher,
                        center=np.zeros(cfg.proj_dim, dtype=np.float32),
                        moments=T.AdamWMoments(student))


def token_head(t_depos: T.Tensor, params: dict[str, T.Tensor]) -> T.Tensor:
    """Project de-positioned token states to K cosine logits per token."""
    h = T.add_channel_bias(T.matmul(t_depos, params["head.w1"]), params["head.b1"])
    h = T.matmul(T.gelu(h), params["head.w2"])
    # center across the token axis: backbone states share a large common
    # component (attention keeps re-adding the token mean via residuals),
    # and without removing it the projected distributions barely
    # distinguish tokens, leaving no per-token learning signal
    h = T.l2_normalize(T.center_axis(h, axis=-2), axis=-1)
    protos = T.l2_normalize(params["head.w3"], axis=0)
    return T.matmul(h, protos)


def distill_loss(z_t: np.ndarray, z_s: T.Tensor, center: np.ndarray,
                 tau_t: float, tau_s: float) -> T.Tensor:
    """Uniform token-level cross entropy between the centered/sharpened
    teacher distribution and the student distribution.

    z_t is raw numpy (constant: no gradient flows into the teacher).
    """
    zt = (z_t.astype(np.float64) - center.astype(np.float64)) / tau_t
    zt -= zt.max(axis=-1, keepdims=True)
    et = np.exp(zt)
    p_t = (et / et.sum(axis=-1, keepdims=True)).astype(np.float32)
    logp_s = T.log_softmax(T.scale(z_s, 1.0 / tau_s), axis=-1)
    per_token = T.sum_axis(T.mul(logp_s, T.Tensor(p_t)), axis=logp_s.data.ndim - 1)
    return T.scale(T.mean_all(per_token), -1.0)


def update_center(center: np.ndarray, teacher_logits: np.ndarray,
                  momentum: float) -> np.ndarray:
    batch_mean = teacher_logits.reshape(-1, teacher_logits.shape[-1]).mean(axis=0,
                                                                           dtype=np.float64)
    return (momentum * center.astype(np.float64)
            + (1.0 - momentum) * batch_mean).astype(np.float32)


def update_teacher(teacher: dict[str, T.Tensor], student: dict[str, T.Tensor],
                   momentum: float) -> None:
    if set(teacher) != set(student):
        raise ValueError("teacher/student parameter sets are not aligned")
    for k in teacher:
        if teacher[k].shape != student[k].shape:
            raise ValueError(f"teacher/student shape mismatch at {k!r}")
        teacher[k].data *= momentum
        teacher[k].data += (1.0 - momentum) * student[k].data


def mask_ratio_at(step: int, schedule: MaskSchedule, total_steps: int) -> float:
    """Linear start->end over the first ramp_fraction of training, then flat."""
    ramp = max(1, int(round(schedule.ramp_fraction * total_steps)))
    if step >= ramp:
        return schedule.end
    return schedule.start + (schedule.end - schedule.start) * (step / ramp)


def ema_momentum_at(step: int, cfg: DistillConfig) -> float:
    """Cosine ramp from ema_start to ema_end over training."""
    t = min(1.0, step / max(1, cfg.steps))
    return cfg.ema_end - (cfg.ema_end - cfg.ema_start) * 0.5 * (1.0 + math.cos(math.pi * t))


def lr_at(step: int, cfg: DistillConfig) -> float:
    if not cfg.lr_cosine:
        return cfg.lr
    t = min(1.0, step / max(1, cfg.steps))
    return cfg.lr * 0.5 * (1.0 + math.cos(math.pi * t))


# ---------------------------------------------------------------------------
# stereo-aware nuisances


def _photometric_params(cfg: NuisanceConfig, rng: np.random.Generator):
    return (rng.uniform(*cfg.contrast), rng.uniform(*cfg.brightness), rng.uniform(*cfg.gamma))


def _apply_photometric(img: np.ndarray, contrast: float, brightness: float,
                       gamma: float) -> np.ndarray:
    out = np.clip(img * contrast + brightness, 0.0, 1.0)
    return out ** gamma


def _apply_occlusion(img: np.ndarray, cfg: NuisanceConfig, rng: np.random.Generator) -> np.ndarray:
    _, h, w = img.shape
    out = img.copy()
    count = int(rng.integers(cfg.occlusion_count[0], cfg.occlusion_count[1] + 1))
    for _ in range(count):
        area = rng.uniform(*cfg.occlusion_area) * h * w
        aspect = rng.uniform(0.5, 2.0)
        rh = max(1, min(h, int(round(math.sqrt(area * aspect)))))
        rw = max(1, min(w, int(round(area / rh))))
        r0 = int(rng.integers(0, h - rh + 1))
        c0 = int(rng.integers(0, w - rw + 1))
        out[:, r0:r0 + rh, c0:c0 + rw] = 0.0
    return out


def apply_nuisance(pair: ImagePair, cfg: NuisanceConfig,
                   rng: np.random.Generator) -> ImagePair:
    """Occlusion, photometric map, then additive noise; shared mode reuses
    one photometric/noise draw for both views."""
    left, right = pair.left, pair.right
    if cfg.occlusion:
        left = _apply_occlusion(left, cfg, rng)
        right = _apply_occlusion(right, cfg, rng)
    if cfg.photometric:
        p_l = _photometric_params(cfg, rng)
        p_r = p_l if cfg.photometric_mode == "shared" else _photometric_params(cfg, rng)
        left = _apply_photometric(left, *p_l)
        right = _apply_photometric(right, *p_r)
    if cfg.noise_sigma[1] > 0.0:
        sig_l = rng.uniform(*cfg.noise_sigma)
        sig_r = sig_l if cfg.photometric_mode == "shared" else rng.uniform(*cfg.noise_sigma)
        left = np.clip(left + rng.normal(0, sig_l, left.shape), 0.0, 1.0).astype(np.float32)
        right = np.clip(right + rng.normal(0, sig_r, right.shape), 0.0, 1.0).astype(np.float32)
    if cfg.polarity == "independent":
        if rng.random() < 0.5:
            left = 1.0 - left
        if rng.random() < 0.5:
            right = 1.0 - right
    elif cfg.polarity == "opposite":
        right = 1.0 - right
    elif cfg.polarity == "pair":
        if rng.random() < 0.5:
            left = 1.0 - left
            right = 1.0 - right
    return ImagePair(left=np.ascontiguousarray(left, dtype=np.float32),
                     right=np.ascontiguousarray(right, dtype=np.float32),
                     gt_disp=pair.gt_disp, valid=pair.valid)


# ---------------------------------------------------------------------------
# one training step


def _fuse_batch(pairs: list[ImagePair], cfg: DistillConfig) -> np.ndarray:
    return np.stack([fuse(p, cfg.fusion_mode, cfg.fusion_stride).data for p in pairs])


def nuisance_prob_at(step: int, cfg: DistillConfig) -> float:
    """Per-pair probability of applying the on-the-fly nuisance at `step`."""
    if cfg.nuisance_ramp <= 0.0:
        return 1.0
    return min(1.0, step / max(1.0, cfg.nuisance_ramp * cfg.steps))


def train_step(state: DistillState, batch: list[ImagePair], enc_cfg: enc.EncoderConfig,
               cfg: DistillConfig, rng: np.random.Generator) -> tuple[float, dict]:
    """Teacher forward on the full pair, student on a corrupted pair
    (optional on-the-fly nuisance, then one view masked), loss, student
    optimizer step, EMA and center updates.

    The on-the-fly nuisance is part of the student-side corruption, like
    the mask: the teacher keeps the uncorrupted input, so its targets
    pull the student toward nuisance-invariant token states.
    """
    geometry = enc_cfg.geometry
    ratio = mask_ratio_at(state.step, cfg.mask, cfg.steps)
    masked: list[ImagePair] = []
    mask_views: list[str] = []
    p_nuis = nuisance_prob_at(state.step, cfg)
    for pair in batch:
        apply_nuis = cfg.nuisance is not None and rng.random() < p_nuis
        corrupted = apply_nuisance(pair, cfg.nuisance, rng) if apply_nuis else pair
        if cfg.mask_mode == "both-views":
            masked.append(mask_both_views(corrupted, ratio, geometry, rng))
            mask_views.append("both")
        else:
            m = sample_one_view_mask(geometry, ratio, rng)
            masked.append(apply_view_mask(corrupted, m, geometry))
            mask_views.append(m.which_view)

    fused_t = _fuse_batch(batch, cfg)
    fused_s = _fuse_batch(masked, cfg)

    # teacher: no tape active, gradients cannot flow
    t_state = enc.forward(fused_t, enc_cfg, state.teacher)
    z_t = token_head(t_state.final_depos, state.teacher).data

    with T.Tape() as tape:
        s_state = enc.forward(fused_s, enc_cfg, state.student)
        z_s = token_head(s_state.final_depos, state.student)
        loss = distill_loss(z_t, z_s, state.center, cfg.tau_t, cfg.tau_s)
        tape.backward(loss)

    touched = tape.tensors()
    for name, p in state.teacher.items():
        if id(p) in touched or p.grad is not None:
            raise RuntimeError(f"gradient leaked into teacher parameter {name!r}")

    grads = {k: p.grad for k, p in state.student.items() if p.grad is not None}
    loss_val = loss.item()
    if not math.isfinite(loss_val):
        raise T.NonFiniteError(f"non-finite loss at step {state.step}")
    T.adamw_step(state.student, grads, state.moments, lr=lr_at(state.step, cfg),
                 betas=cfg.betas, weight_decay=cfg.weight_decay)
    for p in state.student.values():
        p.zero_grad()

    m = ema_momentum_at(state.step, cfg)
    update_teacher(state.teacher, state.student, m)
    state.center = update_center(state.center, z_t, cfg.center_momentum)
    state.step += 1
    info = {"mask_ratio": ratio, "ema_momentum": m, "mask_views": mask_views,
            "lr": lr_at(state.step - 1, cfg)}
    return loss_val, info


# ---------------------------------------------------------------------------
# trainer checkpointing (teacher and student both stored)


def rng_state_to_json(rng: np.random.Generator) -> dict:
    st = rng.bit_generator.state
    return {"bit_generator": st["bit_generator"],
            "state": {k: str(v) for k, v in st["state"].items()},
            "has_uint32": st["has_uint32"], "uinteger": st["uinteger"]}


def rng_state_from_json(d: dict) -> np.random.Generator:
    rng = np.random.default_rng(0)
    rng.bit_generator.state = {"bit_generator": d["bit_generator"],
                               "state": {k: int(v) for k, v in d["state"].items()},
                               "has_uint32": d["has_uint32"], "uinteger": d["uinteger"]}
    return rng


def save_train_checkpoint(path: str, enc_cfg: enc.EncoderConfig, cfg: DistillConfig,
                          state: DistillState, rng: np.random.Generator) -> None:
    header = {"kind": "distill", "config": enc_cfg.to_dict(), "distill": cfg.to_dict(),
              "step": state.step, "adam_t": state.moments.t,
              "rng": rng_state_to_json(rng)}
    blobs: dict[str, np.ndarray] = {"center": state.center}
    for k, v in state.student.items():
        blobs["student." + k] = v.data
    for k, v in state.teacher.items():
        blobs["teacher." + k] = v.data
    for k, v in state.moments.m.items():
        blobs["adam_m." + k] = v
    for k, v in state.moments.v.items():
        blobs["adam_v." + k] = v
    enc.save_checkpoint(path, header, blobs)


def load_train_checkpoint(path: str) -> tuple[enc.EncoderConfig, DistillConfig,
                                              DistillState, np.random.Generator, dict]:
    header, blobs = enc.load_checkpoint(path)
    if header.get("kind") != "distill":
        raise enc.CheckpointError(f"{path}: not a trainer checkpoint")
    enc_cfg = enc.EncoderConfig.from_dict(dict(header["config"]))
    dd = dict(header["distill"])
    nu = dd.pop("nuisance", None)
    dd["mask"] = MaskSchedule(**dd["mask"])
    dd["betas"] = tuple(dd["betas"])
    for key in ("occlusion_count", "occlusion_area", "brightness", "contrast",
                "gamma", "noise_sigma"):
        if nu:
            nu[key] = tuple(nu[key])
    cfg = DistillConfig(nuisance=NuisanceConfig(**nu) if nu else None,
                        **{k: v for k, v in dd.items() if k in DistillConfig.__dataclass_fields__
                           and k != "nuisance"})
    student = {k[len("student."):]: T.Tensor(v, requires_grad=True)
               for k, v in blobs.items() if k.startswith("student.")}
    teacher = {k[len("teacher."):]: T.Tensor(v, requires_grad=False)
               for k, v in blobs.items() if k.startswith("teacher.")}
    moments = T.AdamWMoments(student)
    moments.t = header["adam_t"]
    for k in student:
        moments.m[k] = blobs["adam_m." + k].astype(np.float32)
        moments.v[k] = blobs["adam_v." + k].astype(np.float32)
    state = DistillState(student=student, teacher=teacher,
                         center=blobs["center"].astype(np.float32),
                         moments=moments, step=header["step"])
    rng = rng_state_from_json(header["rng"])
    return enc_cfg, cfg, state, rng, header
