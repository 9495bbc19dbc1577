"""Transformer encoder over fused micro-cell tokens.

Pre-norm blocks with row embedding added at the input, rotary (r, p)
positions applied inside attention, per-layer state taps, and a
de-positioned final readout (last layer minus the row embedding).
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, asdict
from typing import Optional

import numpy as np

from . import tensor as T
from .fusion import TokenGridGeometry

POS_VARIANTS = ("patch-phase-2d", "1d", "factorized-2d", "full-2d-grid",
                "deinterleaved-center-2d")


@dataclass
class EncoderConfig:
    geometry: TokenGridGeometry
    depth: int = 4
    dim: int = 96
    heads: int = 4
    ffn_ratio: int = 4
    ffn_kind: str = "gelu"  # gelu | swiglu
    pos_variant: str = "patch-phase-2d"
    rope_base: float = 10000.0

    def __post_init__(self):
        if self.dim % self.heads != 0:
            raise ValueError("dim must be divisible by heads")
        if self.head_dim % 2 != 0:
            raise ValueError("head_dim must be even")
        if self.pos_variant == "patch-phase-2d" and self.head_dim % 4 != 0:
            raise ValueError("patch-phase rope splits head_dim pairs in half; need head_dim % 4 == 0")
        if self.pos_variant not in POS_VARIANTS:
            raise ValueError(f"unknown pos_variant: {self.pos_variant}")
        if self.ffn_kind not in ("gelu", "swiglu"):
            raise ValueError(f"unknown ffn_kind: {self.ffn_kind}")

    @property
    def head_dim(self) -> int:
        return self.dim // self.heads

    def to_dict(self) -> dict:
        d = asdict(self)
        d["geometry"] = {"p_h": self.geometry.p_h, "p_w": self.geometry.p_w,
                         "height": self.geometry.height, "width": self.geometry.width}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "EncoderConfig":
        g = d.pop("geometry")
        geom = TokenGridGeometry(p_h=g["p_h"], p_w=g["p_w"], height=g["height"], width=g["width"])
        known = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        return cls(geometry=geom, **known)


@dataclass
class EncoderState:
    """Per-layer token states on the fused lattice, flattened to [B, N, d]."""

    per_layer: list  # depth+1 Tensors, embedding state first
    final_depos: "T.Tensor"
    row_embed: "T.Tensor"
    geometry: TokenGridGeometry

    @property
    def final(self):
        return self.per_layer[-1]

    def grid(self, t) -> np.ndarray:
        """View a [B, N, d] state as [B, H_p, fused_cols, d]."""
        g = self.geometry
        return t.data.reshape(t.data.shape[0], g.h_p, g.fused_cols, -1)


def token_indices(geometry: TokenGridGeometry) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(row r, patch column p, phase q) for each flattened token."""
    n = geometry.tokens
    flat = np.arange(n)
    r = flat // geometry.fused_cols
    c = flat % geometry.fused_cols
    return r, c // 2, c % 2


def init_params(cfg: EncoderConfig, rng: np.random.Generator,
                embed_scale: float = 0.02) -> dict[str, T.Tensor]:
    g = cfg.geometry
    d = cfg.dim
    in_dim = 3 * g.p_h * g.p_w

    def w(fan_in, fan_out):
        # fan-in scaling keeps activation magnitudes O(1) at any width
        scale = 1.0 / math.sqrt(fan_in)
        return T.Tensor(rng.normal(0.0, scale, size=(fan_in, fan_out)).astype(np.float32),
                        requires_grad=True)

    def emb(rows, d_):
        return T.Tensor(rng.normal(0.0, embed_scale, size=(rows, d_)).astype(np.float32),
                        requires_grad=True)

    def zeros(*shape):
        return T.Tensor(np.zeros(shape, dtype=np.float32), requires_grad=True)

    def ones(*shape):
        return T.Tensor(np.ones(shape, dtype=np.float32), requires_grad=True)

    params: dict[str, T.Tensor] = {
        "patch_embed.w": w(in_dim, d),
        "patch_embed.b": zeros(d),
        "row_embed": emb(g.h_p, d),
    }
    if cfg.pos_variant == "1d" or cfg.pos_variant == "factorized-2d":
        params["pos_col"] = emb(g.fused_cols, d)
    elif cfg.pos_variant == "full-2d-grid":
        params["pos_grid"] = emb(g.tokens, d)
    elif cfg.pos_variant == "deinterleaved-center-2d":
        params["pos_col"] = emb(g.fused_cols // 2, d)
    hidden = cfg.ffn_ratio * d
    for i in range(cfg.depth):
        p = f"blocks.{i}."
        params[p + "ln1.g"] = ones(d)
        params[p + "ln1.b"] = zeros(d)
        params[p + "attn.wq"] = w(d, d)
        params[p + "attn.wk"] = w(d, d)
        params[p + "attn.wv"] = w(d, d)
        params[p + "attn.wo"] = w(d, d)
        params[p + "attn.bo"] = zeros(d)
        params[p + "ln2.g"] = ones(d)
        params[p + "ln2.b"] = zeros(d)
        if cfg.ffn_kind == "swiglu":
            params[p + "ffn.w1"] = w(d, 2 * hidden)
            params[p + "ffn.b1"] = zeros(2 * hidden)
        else:
            params[p + "ffn.w1"] = w(d, hidden)
            params[p + "ffn.b1"] = zeros(hidden)
        params[p + "ffn.w2"] = w(hidden, d)
        params[p + "ffn.b2"] = zeros(d)
    return params


def rope_angles(cfg: EncoderConfig) -> np.ndarray:
    """Per-token rotation phases [tokens x head_dim/2].

    The first half of the rotation pairs advances with the token row r,
    the second half with the patch column p; the two phase tokens of a
    micro cell (c = 2p and 2p+1) therefore share identical angles.
    """
    if cfg.pos_variant != "patch-phase-2d":
        raise ValueError("rope angles are defined for the patch-phase-2d variant")
    r, p, _q = token_indices(cfg.geometry)
    n_pairs = cfg.head_dim // 2
    half = n_pairs // 2
    inv_freq = cfg.rope_base ** (-np.arange(half) / half)
    angles = np.zeros((cfg.geometry.tokens, n_pairs), dtype=np.float64)
    angles[:, :half] = r[:, None] * inv_freq[None, :]
    angles[:, half:] = p[:, None] * inv_freq[None, :]
    return angles


def patchify(fused: np.ndarray, geometry: TokenGridGeometry) -> np.ndarray:
    """[B, 3, H, 2W] -> [B, tokens, 3*p_h*p_w] flattened micro cells."""
    b, c, h, fw = fused.shape
    g = geometry
    if h != g.height or fw != 2 * g.width:
        raise ValueError(f"fused shape {fused.shape} mismatches geometry "
                         f"(H={g.height}, 2W={2 * g.width})")
    x = fused.reshape(b, c, g.h_p, g.p_h, g.fused_cols, g.p_w)
    x = x.transpose(0, 2, 4, 1, 3, 5)  # B, H_p, cols, C, p_h, p_w
    return np.ascontiguousarray(x).reshape(b, g.tokens, c * g.p_h * g.p_w)


def embed(fused: np.ndarray, cfg: EncoderConfig, params: dict[str, T.Tensor]) -> T.Tensor:
    """Linear micro-cell embedding plus row embedding (and the additive
    column/grid tables of the ablation positional variants)."""
    g = cfg.geometry
    patches = T.Tensor(patchify(fused, g))
    tok = T.add_channel_bias(T.matmul(patches, params["patch_embed.w"]), params["patch_embed.b"])
    r, p, _q = token_indices(g)
    tok = T.add_indexed(tok, params["row_embed"], r)
    c = np.arange(g.tokens) % g.fused_cols
    if cfg.pos_variant in ("1d", "factorized-2d"):
        tok = T.add_indexed(tok, params["pos_col"], c)
    elif cfg.pos_variant == "full-2d-grid":
        tok = T.add_indexed(tok, params["pos_grid"], np.arange(g.tokens))
    elif cfg.pos_variant == "deinterleaved-center-2d":
        tok = T.add_indexed(tok, params["pos_col"], p)
    return tok


def forward(fused: np.ndarray, cfg: EncoderConfig,
            params: dict[str, T.Tensor]) -> EncoderState:
    """Run the encoder on a fused batch [B, 3, H, 2W].

    Records every layer's token state (embedding state included) so the
    mechanistic probe can tap intermediate geometry.
    """
    g = cfg.geometry
    b = fused.shape[0]
    d, nh, hd = cfg.dim, cfg.heads, cfg.head_dim
    n = g.tokens
    angles = rope_angles(cfg) if cfg.pos_variant == "patch-phase-2d" else None

    x = embed(fused, cfg, params)
    per_layer = [x]
    for i in range(cfg.depth):
        pfx = f"blocks.{i}."
        try:
            h = T.layernorm(x, params[pfx + "ln1.g"], params[pfx + "ln1.b"])

            def split_heads(t):
                t = T.reshape(t, (b, n, nh, hd))
                return T.transpose(t, (0, 2, 1, 3))

            q = split_heads(T.matmul(h, params[pfx + "attn.wq"]))
            k = split_heads(T.matmul(h, params[pfx + "attn.wk"]))
            v = split_heads(T.matmul(h, params[pfx + "attn.wv"]))
            att = T.attention(q, k, v, rope_angles=angles)
            att = T.reshape(T.transpose(att, (0, 2, 1, 3)), (b, n, d))
            att = T.add_channel_bias(T.matmul(att, params[pfx + "attn.wo"]),
                                     params[pfx + "attn.bo"])
            x = T.add(x, att)

            h2 = T.layernorm(x, params[pfx + "ln2.g"], params[pfx + "ln2.b"])
            f = T.add_channel_bias(T.matmul(h2, params[pfx + "ffn.w1"]), params[pfx + "ffn.b1"])
            f = T.activation(f, "swiglu-gate" if cfg.ffn_kind == "swiglu" else "gelu")
            f = T.add_channel_bias(T.matmul(f, params[pfx + "ffn.w2"]), params[pfx + "ffn.b2"])
            x = T.add(x, f)
        except T.NonFiniteError as e:
            raise T.NonFiniteError(f"non-finite activation in block {i}: {e}") from e
        per_layer.append(x)

    r, _p, _q = token_indices(g)
    final_depos = T.add_indexed(x, params["row_embed"], r, sign=-1.0)
    return EncoderState(per_layer=per_layer, final_depos=final_depos,
                        row_embed=params["row_embed"], geometry=g)


# ---------------------------------------------------------------------------
# checkpoint format: magic, version, JSON header, named little-endian blobs

_MAGIC = b"BINOCKPT"
_VERSION = 1
_DTYPES = {0: np.float32, 1: np.float64, 2: np.uint64, 3: np.int64}
_DTYPE_CODES = {np.dtype(v): k for k, v in _DTYPES.items()}


class CheckpointError(ValueError):
    pass


def save_checkpoint(path: str, header: dict, blobs: dict[str, np.ndarray]) -> None:
    hdr = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<II", _VERSION, len(hdr)))
        f.write(hdr)
        f.write(struct.pack("<I", len(blobs)))
        for name, arr in blobs.items():
            arr = np.ascontiguousarray(arr)
            if arr.dtype not in _DTYPE_CODES:
                raise CheckpointError(f"unsupported blob dtype {arr.dtype} for {name!r}")
            nb = name.encode()
            f.write(struct.pack("<I", len(nb)) + nb)
            f.write(struct.pack("<BI", _DTYPE_CODES[arr.dtype], arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(arr.astype(arr.dtype.newbyteorder("<")).tobytes())


def load_checkpoint(path: str) -> tuple[dict, dict[str, np.ndarray]]:
    with open(path, "rb") as f:
        if f.read(8) != _MAGIC:
            raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
        version, hlen = struct.unpack("<II", f.read(8))
        if version != _VERSION:
            raise CheckpointError(f"{path}: unsupported version {version}")
        header = json.loads(f.read(hlen).decode())
        (count,) = struct.unpack("<I", f.read(4))
        blobs: dict[str, np.ndarray] = {}
        for _ in range(count):
            (nlen,) = struct.unpack("<I", f.read(4))
            name = f.read(nlen).decode()
            code, ndim = struct.unpack("<BI", f.read(5))
            shape = struct.unpack(f"<{ndim}I", f.read(4 * ndim))
            dtype = np.dtype(_DTYPES[code]).newbyteorder("<")
            raw = f.read(int(np.prod(shape)) * dtype.itemsize)
            blobs[name] = np.frombuffer(raw, dtype=dtype).reshape(shape).astype(_DTYPES[code])
    return header, blobs


def params_to_blobs(params: dict[str, T.Tensor]) -> dict[str, np.ndarray]:
    return {k: v.data for k, v in params.items()}


def blobs_to_params(blobs: dict[str, np.ndarray], requires_grad: bool = True) -> dict[str, T.Tensor]:
    return {k: T.Tensor(v, requires_grad=requires_grad) for k, v in blobs.items()}


def save_encoder(path: str, cfg: EncoderConfig, params: dict[str, T.Tensor],
                 extra_header: Optional[dict] = None) -> None:
    header = {"kind": "encoder", "config": cfg.to_dict()}
    if extra_header:
        header.update(extra_header)
    save_checkpoint(path, header, params_to_blobs(params))


def load_encoder(path: str) -> tuple[EncoderConfig, dict[str, T.Tensor], dict]:
    header, blobs = load_checkpoint(path)
    cfg = EncoderConfig.from_dict(dict(header["config"]))
    return cfg, blobs_to_params(blobs), header
