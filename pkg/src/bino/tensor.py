"""Dense tensors with reverse-mode automatic differentiation.

The engine is deliberately small: exactly the primitives the binocular
encoder and its trainer need, recorded on an explicit tape.  Storage is
float32; reductions (matmul, norms, means) accumulate in float64 and cast
back, which keeps desk-scale training stable without doubling memory.

There is no broadcasting beyond a leading batch axis on matmul; every
other shape coercion must be explicit.
"""

from __future__ import annotations

import math
from typing import Callable, Optional, Sequence

import numpy as np


class NonFiniteError(FloatingPointError):
    """A forward op produced NaN/Inf, or a gradient was non-finite."""


def _check_finite(arr: np.ndarray, what: str) -> np.ndarray:
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"non-finite values in {what}")
    return arr


class Tape:
    """Ordered record of primitive applications.

    Nodes are appended in execution order, so the list is already a
    topological order; ``backward`` visits each node exactly once in
    reverse.
    """

    def __init__(self):
        self.nodes: list[tuple["Tensor", tuple["Tensor", ...], Callable[[np.ndarray], None]]] = []

    def record(self, out: "Tensor", inputs: tuple["Tensor", ...],
               backward: Callable[[np.ndarray], None]) -> None:
        self.nodes.append((out, inputs, backward))

    def backward(self, loss: "Tensor") -> None:
        if loss.data.size != 1:
            raise ValueError("backward seed must be a scalar tensor")
        loss.grad = np.ones_like(loss.data)
        for out, _inputs, bwd in reversed(self.nodes):
            if out.grad is None:
                continue
            bwd(out.grad)

    def tensors(self) -> set[int]:
        """ids of every tensor touched by a recorded op (inputs and outputs)."""
        seen: set[int] = set()
        for out, inputs, _ in self.nodes:
            seen.add(id(out))
            seen.update(id(t) for t in inputs)
        return seen

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, *exc) -> None:
        popped = _TAPE_STACK.pop()
        assert popped is self


_TAPE_STACK: list[Tape] = []


def active_tape() -> Optional[Tape]:
    return _TAPE_STACK[-1] if _TAPE_STACK else None


class Tensor:
    """Contiguous row-major float array plus optional gradient slot."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False, dtype=np.float32):
        self.data = np.ascontiguousarray(np.asarray(data, dtype=dtype))
        _check_finite(self.data, "tensor init")
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def zero_grad(self) -> None:
        self.grad = None

    def accumulate_grad(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = g.astype(self.data.dtype, copy=True)
        else:
            self.grad = self.grad + g.astype(self.data.dtype, copy=False)

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # operator sugar; scalars only on the right
    def __add__(self, other):
        return add(self, other if isinstance(other, Tensor) else constant_like(self, other))

    def __sub__(self, other):
        return sub(self, other if isinstance(other, Tensor) else constant_like(self, other))

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    def __rmul__(self, other):
        return scale(self, float(other))

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def constant_like(t: Tensor, value) -> Tensor:
    return Tensor(np.full(t.shape, value, dtype=t.dtype))


def _record(out: Tensor, inputs: tuple[Tensor, ...],
            backward: Callable[[np.ndarray], None]) -> Tensor:
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.record(out, inputs, backward)
    return out


def _f64(a: np.ndarray) -> np.ndarray:
    return a.astype(np.float64, copy=False)


# ---------------------------------------------------------------------------
# elementwise / structural primitives


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ValueError(f"add shape mismatch: {a.shape} vs {b.shape}")
    out = Tensor(a.data + b.data, dtype=a.dtype)

    def bwd(g):
        if a.requires_grad:
            a.accumulate_grad(g)
        if b.requires_grad:
            b.accumulate_grad(g)

    return _record(out, (a, b), bwd)


def sub(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ValueError(f"sub shape mismatch: {a.shape} vs {b.shape}")
    out = Tensor(a.data - b.data, dtype=a.dtype)

    def bwd(g):
        if a.requires_grad:
            a.accumulate_grad(g)
        if b.requires_grad:
            b.accumulate_grad(-g)

    return _record(out, (a, b), bwd)


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ValueError(f"mul shape mismatch: {a.shape} vs {b.shape}")
    out = Tensor(a.data * b.data, dtype=a.dtype)

    def bwd(g):
        if a.requires_grad:
            a.accumulate_grad(g * b.data)
        if b.requires_grad:
            b.accumulate_grad(g * a.data)

    return _record(out, (a, b), bwd)


def scale(a: Tensor, s: float) -> Tensor:
    out = Tensor(a.data * s, dtype=a.dtype)

    def bwd(g):
        if a.requires_grad:
            a.accumulate_grad(g * s)

    return _record(out, (a,), bwd)


def add_row_bias(x: Tensor, bias: Tensor) -> Tensor:
    """x[..., i, :] + bias[i, :] — adds a per-row vector table to the last
    two axes of x (used for row embeddings and per-channel biases)."""
    if x.shape[-2:] != bias.shape:
        raise ValueError(f"row-bias shape mismatch: {x.shape} vs {bias.shape}")
    out = Tensor(x.data + bias.data, dtype=x.dtype)

    def bwd(g):
        if x.requires_grad:
            x.accumulate_grad(g)
        if bias.requires_grad:
            red = g.reshape((-1,) + bias.shape)
            bias.accumulate_grad(_f64(red).sum(axis=0).astype(bias.dtype))

    return _record(out, (x, bias), bwd)


def add_channel_bias(x: Tensor, bias: Tensor) -> Tensor:
    """x[..., :] + bias broadcast over all leading axes."""
    if x.shape[-1] != bias.shape[0] or bias.data.ndim != 1:
        raise ValueError(f"channel-bias shape mismatch: {x.shape} vs {bias.shape}")
    out = Tensor(x.data + bias.data, dtype=x.dtype)

    def bwd(g):
        if x.requires_grad:
            x.accumulate_grad(g)
        if bias.requires_grad:
            red = g.reshape(-1, bias.shape[0])
            bias.accumulate_grad(_f64(red).sum(axis=0).astype(bias.dtype))

    return _record(out, (x, bias), bwd)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    out = Tensor(a.data.reshape(shape), dtype=a.dtype)

    def bwd(g):
        if a.requires_grad:
            a.accumulate_grad(g.reshape(a.shape))

    return _record(out, (a,), bwd)


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    out = Tensor(np.ascontiguousarray(a.data.transpose(axes)), dtype=a.dtype)
    inv = np.argsort(axes)

    def bwd(g):
        if a.requires_grad:
            a.accumulate_grad(np.ascontiguousarray(g.transpose(inv)))

    return _record(out, (a,), bwd)


def mean_all(a: Tensor) -> Tensor:
    out = Tensor(np.array(_f64(a.data).mean(), dtype=a.dtype), dtype=a.dtype)
    n = a.data.size

    def bwd(g):
        if a.requires_grad:
            a.accumulate_grad(np.full(a.shape, float(np.asarray(g).reshape(())) / n,
                                      dtype=a.dtype))

    return _record(out, (a,), bwd)


def sum_axis(a: Tensor, axis: int) -> Tensor:
    out = Tensor(_f64(a.data).sum(axis=axis).astype(a.dtype), dtype=a.dtype)

    def bwd(g):
        if a.requires_grad:
            a.accumulate_grad(np.expand_dims(g, axis) * np.ones_like(a.data))

    return _record(out, (a,), bwd)


def add_indexed(x: Tensor, table: Tensor, idx: np.ndarray, sign: float = 1.0) -> Tensor:
    """x[..., n, :] + sign * table[idx[n], :].

    Used for row/positional embedding tables; the table gradient sums over
    every token (and batch element) that referenced each row.
    """
    if idx.ndim != 1 or x.shape[-2] != idx.shape[0] or x.shape[-1] != table.shape[-1]:
        raise ValueError(f"add_indexed shape mismatch: x{x.shape} table{table.shape} idx{idx.shape}")
    out = Tensor(x.data + sign * table.data[idx], dtype=x.dtype)

    def bwd(g):
        if x.requires_grad:
            x.accumulate_grad(g)
        if table.requires_grad:
            gt = np.zeros(table.shape, dtype=np.float64)
            np.add.at(gt, idx, sign * _f64(g).reshape((-1,) + g.shape[-2:]).sum(axis=0))
            table.accumulate_grad(gt.astype(table.dtype))

    return _record(out, (x, table), bwd)


# ---------------------------------------------------------------------------
# matmul


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the trailing two axes.

    Either operand may carry identical leading batch axes; an unbatched
    operand is broadcast over them (its gradient sums over the batch).
    """
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ValueError("matmul needs >=2-d operands")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul inner mismatch: {a.shape} x {b.shape}")
    if a.data.ndim > 2 and b.data.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise ValueError(f"matmul batch mismatch: {a.shape} x {b.shape}")
    out_data = np.matmul(_f64(a.data), _f64(b.data)).astype(a.dtype)
    out = Tensor(out_data, dtype=a.dtype)

    def bwd(g):
        g64 = _f64(g)
        if a.requires_grad:
            da = np.matmul(g64, _f64(b.data).swapaxes(-1, -2))
            if da.ndim > a.data.ndim:
                da = da.sum(axis=tuple(range(da.ndim - a.data.ndim)))
            a.accumulate_grad(da.astype(a.dtype))
        if b.requires_grad:
            db = np.matmul(_f64(a.data).swapaxes(-1, -2), g64)
            if db.ndim > b.data.ndim:
                db = db.sum(axis=tuple(range(db.ndim - b.data.ndim)))
            b.accumulate_grad(db.astype(b.dtype))

    return _record(out, (a, b), bwd)


# ---------------------------------------------------------------------------
# softmax / layernorm / activations


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    # max-subtracted in storage precision; no dot products or norms here,
    # so the 64-bit accumulation rule does not apply
    axis = axis if axis >= 0 else x.data.ndim + axis
    if not 0 <= axis < x.data.ndim:
        raise ValueError(f"softmax axis {axis} invalid for shape {x.shape}")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=axis, keepdims=True)
    out = Tensor(p, dtype=x.dtype)

    def bwd(g):
        dot = (g * p).sum(axis=axis, keepdims=True)
        if x.requires_grad:
            x.accumulate_grad((p * (g - dot)).astype(x.dtype))

    return _record(out, (x,), bwd)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    axis = axis if axis >= 0 else x.data.ndim + axis
    if not 0 <= axis < x.data.ndim:
        raise ValueError(f"log_softmax axis {axis} invalid for shape {x.shape}")
    z = _f64(x.data)
    z = z - z.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    ls = z - lse
    out = Tensor(ls.astype(x.dtype), dtype=x.dtype)
    p = np.exp(ls)

    def bwd(g):
        if x.requires_grad:
            g64 = _f64(g)
            x.accumulate_grad((g64 - p * g64.sum(axis=axis, keepdims=True)).astype(x.dtype))

    return _record(out, (x,), bwd)


def layernorm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the channel (last) axis, then affine."""
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ValueError("layernorm gain/bias must match channel extent")
    xf = _f64(x.data)
    mu = xf.mean(axis=-1, keepdims=True)
    xc = xf - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = Tensor((xhat * _f64(gain.data) + _f64(bias.data)).astype(x.dtype), dtype=x.dtype)

    def bwd(g):
        g64 = _f64(g)
        if gain.requires_grad:
            gain.accumulate_grad((g64 * xhat).reshape(-1, d).sum(axis=0).astype(gain.dtype))
        if bias.requires_grad:
            bias.accumulate_grad(g64.reshape(-1, d).sum(axis=0).astype(bias.dtype))
        if x.requires_grad:
            gh = g64 * _f64(gain.data)
            m1 = gh.mean(axis=-1, keepdims=True)
            m2 = (gh * xhat).mean(axis=-1, keepdims=True)
            x.accumulate_grad((inv * (gh - m1 - xhat * m2)).astype(x.dtype))

    return _record(out, (x, gain, bias), bwd)


def center_axis(x: Tensor, axis: int) -> Tensor:
    """Subtract the mean along `axis` (means accumulate in float64)."""
    xf = _f64(x.data)
    out = Tensor((xf - xf.mean(axis=axis, keepdims=True)).astype(x.dtype), dtype=x.dtype)

    def bwd(g):
        if x.requires_grad:
            g64 = _f64(g)
            x.accumulate_grad((g64 - g64.mean(axis=axis, keepdims=True)).astype(x.dtype))

    return _record(out, (x,), bwd)


def l2_normalize(x: Tensor, axis: int = -1, eps: float = 1e-8) -> Tensor:
    """Scale to unit l2 norm along `axis` (norms accumulate in float64)."""
    xf = _f64(x.data)
    norm = np.sqrt((xf * xf).sum(axis=axis, keepdims=True) + eps)
    y = xf / norm
    out = Tensor(y.astype(x.dtype), dtype=x.dtype)

    def bwd(g):
        if x.requires_grad:
            g64 = _f64(g)
            dot = (g64 * y).sum(axis=axis, keepdims=True)
            x.accumulate_grad(((g64 - y * dot) / norm).astype(x.dtype))

    return _record(out, (x,), bwd)


_INV_SQRT2 = 1.0 / math.sqrt(2.0)


def gelu(x: Tensor) -> Tensor:
    """Exact-erf GELU, elementwise in storage precision."""
    from scipy.special import erf  # noqa: PLC0415

    xf = x.data
    phi = (0.5 * (1.0 + erf(xf * _INV_SQRT2))).astype(x.dtype)
    out = Tensor(xf * phi, dtype=x.dtype)
    pdf = (np.exp(-0.5 * xf * xf) / math.sqrt(2.0 * math.pi)).astype(x.dtype)

    def bwd(g):
        if x.requires_grad:
            x.accumulate_grad((g * (phi + xf * pdf)).astype(x.dtype))

    return _record(out, (x,), bwd)


def swiglu_gate(x: Tensor) -> Tensor:
    """Split the channel axis into (value, gate) halves: value * silu(gate)."""
    d = x.shape[-1]
    if d % 2 != 0:
        raise ValueError("swiglu-gate needs an even channel extent")
    h = d // 2
    xf = _f64(x.data)
    v, u = xf[..., :h], xf[..., h:]
    sig = 1.0 / (1.0 + np.exp(-u))
    silu = u * sig
    out = Tensor((v * silu).astype(x.dtype), dtype=x.dtype)

    def bwd(g):
        if x.requires_grad:
            g64 = _f64(g)
            dv = g64 * silu
            du = g64 * v * (sig + u * sig * (1.0 - sig))
            x.accumulate_grad(np.concatenate([dv, du], axis=-1).astype(x.dtype))

    return _record(out, (x,), bwd)


def activation(x: Tensor, kind: str) -> Tensor:
    if kind == "gelu":
        return gelu(x)
    if kind == "swiglu-gate":
        return swiglu_gate(x)
    raise ValueError(f"unknown activation kind: {kind}")


# ---------------------------------------------------------------------------
# rotary attention


def rope_rotate(x: Tensor, cos: np.ndarray, sin: np.ndarray) -> Tensor:
    """Rotate consecutive channel pairs of x by per-(token, pair) phases.

    x: [... x tokens x head_dim], cos/sin: [tokens x head_dim/2].
    Linear in x, so the backward is a rotation by the opposite angle.
    """
    hd = x.shape[-1]
    if hd % 2 != 0:
        raise ValueError("rope needs an even head_dim")
    if cos.shape != (x.shape[-2], hd // 2):
        raise ValueError(f"rope angle shape {cos.shape} mismatches tokens/head_dim {x.shape}")

    def rot(a, c, s):
        e, o = a[..., 0::2], a[..., 1::2]
        out = np.empty_like(a)
        out[..., 0::2] = e * c - o * s
        out[..., 1::2] = e * s + o * c
        return out

    out = Tensor(rot(_f64(x.data), cos, sin).astype(x.dtype), dtype=x.dtype)

    def bwd(g):
        if x.requires_grad:
            x.accumulate_grad(rot(_f64(g), cos, -sin).astype(x.dtype))

    return _record(out, (x,), bwd)


def attention(q: Tensor, k: Tensor, v: Tensor,
              rope_angles: Optional[np.ndarray] = None) -> Tensor:
    """Scaled dot-product attention with optional rotary phases.

    q, k, v: [... x heads x tokens x head_dim]; head_dim must be even when
    rotary phases are supplied.  Rotation is applied to q and k only.
    rope_angles: [tokens x head_dim/2] phases shared across heads.
    """
    if q.shape != k.shape or k.shape[:-2] != v.shape[:-2] or k.shape[-2] != v.shape[-2]:
        raise ValueError(f"attention shape mismatch: q{q.shape} k{k.shape} v{v.shape}")
    hd = q.shape[-1]
    if rope_angles is not None:
        if hd % 2 != 0:
            raise ValueError("attention with rope needs an even head_dim")
        cos = np.cos(rope_angles)
        sin = np.sin(rope_angles)
        q = rope_rotate(q, cos, sin)
        k = rope_rotate(k, cos, sin)
    logits = scale(matmul(q, transpose(k, list(range(k.data.ndim - 2)) + [k.data.ndim - 1, k.data.ndim - 2])),
                   1.0 / math.sqrt(hd))
    weights = softmax(logits, axis=-1)
    return matmul(weights, v)


# ---------------------------------------------------------------------------
# optimizer


class AdamWMoments:
    """First/second moment buffers for one named parameter set."""

    def __init__(self, params: dict[str, Tensor]):
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.t = 0


def adamw_step(params: dict[str, Tensor], grads: dict[str, np.ndarray],
               moments: AdamWMoments, lr: float, betas: tuple[float, float] = (0.9, 0.999),
               eps: float = 1e-8, weight_decay: float = 0.0) -> None:
    """One decoupled-weight-decay adaptive-moment update, in place.

    A non-finite gradient aborts the whole step (no partial updates).
    """
    for name, g in grads.items():
        if not np.isfinite(g).all():
            raise NonFiniteError(f"non-finite gradient for parameter {name!r}")
    moments.t += 1
    b1, b2 = betas
    bc1 = 1.0 - b1 ** moments.t
    bc2 = 1.0 - b2 ** moments.t
    for name, p in params.items():
        if name not in grads:
            continue
        g = grads[name].astype(p.data.dtype, copy=False)
        if g.shape != p.data.shape:
            raise ValueError(f"gradient shape mismatch for {name!r}")
        m = moments.m[name]
        v = moments.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        mhat = m / bc1
        vhat = v / bc2
        p.data -= lr * (mhat / (np.sqrt(vhat) + eps) + weight_decay * p.data)
