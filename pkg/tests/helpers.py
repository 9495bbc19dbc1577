"""Shared test utilities: central-difference gradient checking and small
model/dataset builders."""

from __future__ import annotations

import numpy as np

from bino import distill as D
from bino import encoder as enc
from bino import tensor as T
from bino.fusion import ImagePair, TokenGridGeometry


def gradcheck(build, params, h=1e-4, tol=1e-3):
    """Compare tape gradients of a scalar loss against central differences.

    `build` recomputes the loss from `params` (float64 tensors) from
    scratch; numeric evaluations run with no tape active.
    """
    for p in params:
        p.zero_grad()
    with T.Tape() as tape:
        loss = build()
        tape.backward(loss)
    worst = 0.0
    for p in params:
        assert p.grad is not None, "parameter received no gradient"
        analytic = p.grad.copy()
        numeric = np.zeros_like(p.data)
        flat, nflat = p.data.reshape(-1), numeric.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = build().item()
            flat[i] = orig - h
            fm = build().item()
            flat[i] = orig
            nflat[i] = (fp - fm) / (2.0 * h)
        denom = max(np.abs(numeric).max(), np.abs(analytic).max(), 1e-8)
        rel = float(np.abs(analytic - numeric).max() / denom)
        worst = max(worst, rel)
        assert rel < tol, f"gradient mismatch: rel err {rel:.2e} >= {tol}"
    return worst


def p64(rng, *shape):
    """Random float64 parameter tensor."""
    return T.Tensor(rng.normal(0.0, 1.0, shape), requires_grad=True, dtype=np.float64)


def weighted_scalar(out: T.Tensor, rng) -> T.Tensor:
    """Reduce a tensor to a scalar with a fixed random cotangent."""
    w = T.Tensor(rng.normal(0.0, 1.0, out.shape), dtype=out.dtype)
    return T.mean_all(T.mul(out, w))


def tiny_encoder(height=16, width=16, depth=2, dim=16, heads=2,
                 **kw) -> tuple[enc.EncoderConfig, dict]:
    cfg = enc.EncoderConfig(geometry=TokenGridGeometry(p_h=4, p_w=4,
                                                       height=height, width=width),
                            depth=depth, dim=dim, heads=heads, **kw)
    params = enc.init_params(cfg, np.random.default_rng(0))
    return cfg, params


def random_pair(rng, height=16, width=16) -> ImagePair:
    return ImagePair(left=rng.random((3, height, width), dtype=np.float64).astype(np.float32),
                     right=rng.random((3, height, width), dtype=np.float64).astype(np.float32))


def tiny_distill(height=16, width=16, steps=4, **kw):
    cfg, _ = tiny_encoder(height=height, width=width)
    dcfg = D.DistillConfig(steps=steps, batch=2, proj_dim=32, **kw)
    state = D.init_state(cfg, dcfg, np.random.default_rng(0))
    return cfg, dcfg, state
