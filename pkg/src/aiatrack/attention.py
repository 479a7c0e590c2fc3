"""Attention kernels: conventional attention and attention-in-attention (AiA).

Shapes follow the row convention ``(..., tokens, channels)``. A correlation
map is the pre-softmax score matrix ``M`` of shape ``(..., N_q, N_k)``. With
``refine_axis="keys"`` its columns (one per key, length ``N_q``) are the
correlation vectors the inner attention consumes; ``"queries"`` uses rows.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from functools import lru_cache
from typing import Callable

import numpy as np

from . import autograd as ag
from .autograd import Parameter, ShapeError, Tensor
from .layers import Conv2d, LayerNorm, Linear, Module, uniform_init

VARIANTS = ("v1", "v2", "v3")
AXES = ("keys", "queries")
REFINERS = ("aia", "conv")


@dataclass
class AttentionConfig:
    model_dim: int = 256
    num_heads: int = 4
    inner_dim: int = 64
    aia_enabled: bool = True
    aia_variant: str = "v1"
    aia_positional: bool = True
    refine_axis: str = "keys"
    refiner: str = "aia"
    pos_base: float = 10000.0

    def __post_init__(self):
        if self.model_dim <= 0 or self.num_heads <= 0 or self.inner_dim <= 0:
            raise ValueError("model_dim, num_heads and inner_dim must be positive")
        if self.model_dim % self.num_heads:
            raise ValueError(f"model_dim {self.model_dim} is not divisible by num_heads {self.num_heads}")
        if self.aia_variant not in VARIANTS:
            raise ValueError(f"aia_variant must be one of {VARIANTS}")
        if self.refine_axis not in AXES:
            raise ValueError(f"refine_axis must be one of {AXES}")
        if self.refiner not in REFINERS:
            raise ValueError(f"refiner must be one of {REFINERS}")

    @property
    def head_dim(self) -> int:
        return self.model_dim // self.num_heads


# --- positional encoding -------------------------------------------------------

@dataclass(frozen=True)
class PositionalEncoding2D:
    height: int
    width: int
    channels: int
    values: np.ndarray  # (height*width, channels)

    def tensor(self) -> Tensor:
        return Tensor(self.values)


@lru_cache(maxsize=64)
def _sinusoid_table(height: int, width: int, channels: int, base: float) -> np.ndarray:
    half = channels // 2
    freqs = base ** (-np.arange(0, half, 2) / half)
    rows, cols = np.meshgrid(np.arange(height), np.arange(width), indexing="ij")

    def encode(pos):
        ang = pos.reshape(-1, 1) * freqs
        out = np.empty((pos.size, half))
        out[:, 0::2] = np.sin(ang)
        out[:, 1::2] = np.cos(ang)
        return out

    table = np.concatenate([encode(rows), encode(cols)], axis=1)
    table.flags.writeable = False
    return table


def sinusoidal_2d(height: int, width: int, channels: int, base: float = 10000.0) -> PositionalEncoding2D:
    """2-D sine/cosine table; the first half of the channels encodes the row.

    Within each half, channel ``2i`` is ``sin(p * base**(-2i/half))`` and
    channel ``2i+1`` the matching cosine, so position (0, 0) is all zeros on
    sine channels and all ones on cosine channels.
    """
    if channels <= 0 or channels % 4:
        raise ValueError(f"channels must be a positive multiple of 4, got {channels}")
    return PositionalEncoding2D(height, width, channels, _sinusoid_table(height, width, channels, float(base)))


def grid_encoding(grid: tuple[int, int, int], channels: int, base: float = 10000.0) -> np.ndarray:
    """Encoding for ``frames`` stacked grids of ``H x W`` tokens each."""
    frames, height, width = grid
    table = sinusoidal_2d(height, width, channels, base).values
    return np.tile(table, (frames, 1)) if frames > 1 else table


# --- functional kernels ----------------------------------------------------------

def _split_heads(x: Tensor, heads: int) -> Tensor:
    *lead, n, c = x.shape
    x = ag.reshape(x, (*lead, n, heads, c // heads))
    L = len(lead)
    return ag.transpose(x, tuple(range(L)) + (L + 1, L, L + 2))


def _merge_heads(x: Tensor) -> Tensor:
    *lead, h, n, d = x.shape
    L = len(lead)
    x = ag.transpose(x, tuple(range(L)) + (L + 1, L, L + 2))
    return ag.reshape(x, (*lead, n, h * d))


def correlation(map_q, map_k, w_q, w_k) -> Tensor:
    """Scaled dot-product correlation ``(Q w_q)(K w_k)^T / sqrt(C)``."""
    map_q, map_k = ag._as_tensor(map_q), ag._as_tensor(map_k)
    if map_q.shape[-1] != map_k.shape[-1]:
        raise ShapeError(f"query width {map_q.shape[-1]} != key width {map_k.shape[-1]}")
    qb = ag.matmul(map_q, w_q)
    kb = ag.matmul(map_k, w_k)
    return ag.matmul(qb, ag.swap_last(kb)) * (1.0 / math.sqrt(qb.shape[-1]))


Refine = Callable[[Tensor], Tensor]


def attend(q, k, v, w_q, w_k, w_v, w_o, num_heads: int = 1, refine: Refine | None = None,
           observer: dict | None = None) -> Tensor:
    """Multi-head attention with an optional correlation-map refinement.

    Each head sees a ``C/num_heads`` wide slice and is scaled by the square
    root of that width. ``refine`` receives the stacked per-head maps of
    shape ``(..., heads, N_q, N_k)`` and returns a residual of the same shape;
    one refinement callable (one parameter set) serves every head.
    """
    q, k, v = ag._as_tensor(q), ag._as_tensor(k), ag._as_tensor(v)
    c = q.shape[-1]
    if k.shape[-1] != c or v.shape[-1] != c:
        raise ShapeError(f"q/k/v widths differ: {q.shape}, {k.shape}, {v.shape}")
    if k.shape[-2] != v.shape[-2]:
        raise ShapeError(f"key count {k.shape[-2]} != value count {v.shape[-2]}")
    if c % num_heads:
        raise ShapeError(f"width {c} not divisible by {num_heads} heads")
    qh = _split_heads(ag.matmul(q, w_q), num_heads)
    kh = _split_heads(ag.matmul(k, w_k), num_heads)
    vh = _split_heads(ag.matmul(v, w_v), num_heads)
    m = ag.matmul(qh, ag.swap_last(kh)) * (1.0 / math.sqrt(c // num_heads))
    logits = m
    residual = None
    if refine is not None:
        residual = refine(m)
        logits = m + residual
    attn = ag.softmax(logits)
    if observer is not None:
        observer["corr"] = m.data
        observer["residual"] = None if residual is None else residual.data
        observer["attn"] = attn.data
    out = _merge_heads(ag.matmul(attn, vh))
    return ag.matmul(out, w_o)


def conventional_attention(q, k, v, params) -> Tensor:
    """Single-head attention; ``params`` exposes ``w_q, w_k, w_v, w_o``."""
    return attend(q, k, v, params.w_q, params.w_k, params.w_v, params.w_o, num_heads=1)


def inner_attention(m, cfg: AttentionConfig, params: "InnerAttention", pos=None) -> Tensor:
    """Residual correlation map produced by the inner attention."""
    if not cfg.aia_enabled:
        raise ValueError("inner attention requested while aia_enabled is False")
    return params(ag._as_tensor(m), pos)


def attention_in_attention(q, k, v, cfg: AttentionConfig, params, pos=None) -> Tensor:
    """Single-head attention whose correlation map is refined before softmax.

    ``params`` exposes the outer projections and ``aia`` (an
    :class:`InnerAttention`). With ``cfg.aia_enabled`` false this is exactly
    :func:`conventional_attention`.
    """
    refine = None
    if cfg.aia_enabled:
        inner = params.aia

        def refine(m):
            return inner(m, pos)

    return attend(q, k, v, params.w_q, params.w_k, params.w_v, params.w_o, num_heads=1, refine=refine)


def multi_head(q, k, v, cfg: AttentionConfig, params: "MultiHeadAttention",
               key_grid=None, query_grid=None) -> Tensor:
    if cfg.model_dim % cfg.num_heads:
        raise ShapeError("model_dim must be divisible by num_heads")
    return params(q, k, v, key_grid=key_grid, query_grid=query_grid)


# --- parameterized blocks ---------------------------------------------------------

@lru_cache(maxsize=32)
def _eye(n: int) -> Tensor:
    return Tensor(np.eye(n))


class InnerAttention(Module):
    """Attention over correlation vectors, shared by every head of a block.

    ``length`` is the correlation-vector length: ``N_q`` when refining along
    keys, ``N_k`` along queries. Query/key features are reduced to
    ``inner_dim``, layer-normalized, optionally given positional cues and then
    projected by two separate square maps. The value path depends on the
    variant: v1 layer-normalizes and adds an identity connection on the
    output transform, v2 uses the raw vectors with a plain output transform,
    v3 layer-normalizes, applies a value transform and a plain output
    transform. The output transform starts at zero.
    """

    def __init__(self, rng: np.random.Generator, length: int, inner_dim: int,
                 variant: str = "v1", axis: str = "keys", positional: bool = True):
        if variant not in VARIANTS:
            raise ValueError(f"unknown AiA variant {variant!r}")
        if axis not in AXES:
            raise ValueError(f"unknown refine axis {axis!r}")
        if inner_dim >= length:
            warnings.warn(f"inner_dim {inner_dim} >= correlation length {length}; "
                          "the reduction no longer saves work", stacklevel=2)
        self.reduce = Parameter(uniform_init(rng, length, (length, inner_dim)))
        self.norm = LayerNorm(inner_dim)
        self.w_q = Parameter(uniform_init(rng, inner_dim, (inner_dim, inner_dim)))
        self.w_k = Parameter(uniform_init(rng, inner_dim, (inner_dim, inner_dim)))
        self.value_norm = LayerNorm(length) if variant in ("v1", "v3") else None
        self.w_v = Parameter(uniform_init(rng, length, (length, length))) if variant == "v3" else None
        self.w_o = Parameter(np.zeros((length, length)))
        self._length = length
        self._inner_dim = inner_dim
        self._variant = variant
        self._axis = axis
        self._positional = positional

    @property
    def axis(self) -> str:
        return self._axis

    @property
    def positional(self) -> bool:
        return self._positional

    @property
    def inner_dim(self) -> int:
        return self._inner_dim

    def __call__(self, m: Tensor, pos=None) -> Tensor:
        x = ag.swap_last(m) if self._axis == "keys" else m
        if x.shape[-1] != self._length:
            raise ShapeError(f"correlation vectors have length {x.shape[-1]}, "
                             f"inner attention was built for {self._length}")
        feats = self.norm(ag.matmul(x, self.reduce))
        if self._positional and pos is not None:
            feats = feats + ag._as_tensor(pos)
        qb = ag.matmul(feats, self.w_q)
        kb = ag.matmul(feats, self.w_k)
        weights = ag.softmax(ag.matmul(qb, ag.swap_last(kb)) * (1.0 / math.sqrt(self._inner_dim)))
        if self._variant == "v2":
            values = x
        else:
            values = self.value_norm(x)
            if self._variant == "v3":
                values = ag.matmul(values, self.w_v)
        agg = ag.matmul(weights, values)
        if self._variant == "v1":
            out = ag.matmul(agg, ag.add(_eye(self._length), self.w_o))
        else:
            out = ag.matmul(agg, self.w_o)
        return ag.swap_last(out) if self._axis == "keys" else out


class ConvBottleneck(Module):
    """Local stand-in for the inner attention: 1x1 reduce, 3x3 conv, 1x1 expand.

    Correlation vectors are laid out on the spatial grid of the refined axis
    (keys by default) with the vector entries as channels, so the 3x3 kernel
    mixes each vector with those of its 8 grid neighbours only.
    """

    def __init__(self, rng: np.random.Generator, length: int, inner_dim: int, axis: str = "keys"):
        if axis not in AXES:
            raise ValueError(f"unknown refine axis {axis!r}")
        self.reduce = Linear(rng, length, inner_dim)
        self.conv = Conv2d(rng, inner_dim, inner_dim, 3, padding=1)
        self.expand = Linear(rng, inner_dim, length)
        self._length = length
        self._axis = axis

    def __call__(self, m: Tensor, grid=None) -> Tensor:
        x = ag.swap_last(m) if self._axis == "keys" else m
        *lead, n, length = x.shape
        if length != self._length:
            raise ShapeError(f"correlation vectors have length {length}, bottleneck built for {self._length}")
        if grid is None:
            side = math.isqrt(n)
            if side * side != n:
                raise ShapeError(f"{n} correlation vectors do not form a square grid")
            grid = (1, side, side)
        frames, h, w = grid
        if frames * h * w != n:
            raise ShapeError(f"grid {grid} does not cover {n} vectors")
        batch = int(np.prod(lead, dtype=int)) * frames
        y = ag.relu(self.reduce(x))
        y = ag.reshape(y, (batch, h, w, y.shape[-1]))
        y = ag.relu(self.conv(y))
        y = self.expand(ag.reshape(y, (*lead, n, y.shape[-1])))
        return ag.swap_last(y) if self._axis == "keys" else y


class MultiHeadAttention(Module):
    """Multi-head attention block with an optional shared correlation refiner.

    ``corr_len`` is the length of the refined correlation vectors, i.e. the
    number of queries for key-axis refinement; it fixes the size of the
    refiner's parameters.
    """

    def __init__(self, rng: np.random.Generator, cfg: AttentionConfig, corr_len: int | None = None):
        c = cfg.model_dim
        self.w_q = Parameter(uniform_init(rng, c, (c, c)))
        self.w_k = Parameter(uniform_init(rng, c, (c, c)))
        self.w_v = Parameter(uniform_init(rng, c, (c, c)))
        self.w_o = Parameter(uniform_init(rng, c, (c, c)))
        self.aia = None
        self.conv_refine = None
        if cfg.aia_enabled:
            if corr_len is None:
                raise ValueError("corr_len is required when correlation refinement is enabled")
            if cfg.refiner == "aia":
                self.aia = InnerAttention(rng, corr_len, cfg.inner_dim, cfg.aia_variant,
                                          cfg.refine_axis, cfg.aia_positional)
            else:
                self.conv_refine = ConvBottleneck(rng, corr_len, cfg.inner_dim, cfg.refine_axis)
        self._cfg = cfg
        self._observer: dict | None = None

    @property
    def cfg(self) -> AttentionConfig:
        return self._cfg

    def observe(self, enabled: bool = True) -> None:
        """Keep the last correlation map, residual and attention for inspection."""
        self._observer = {} if enabled else None

    @property
    def last(self) -> dict | None:
        return self._observer

    def _refiner(self, key_grid, query_grid) -> Refine | None:
        cfg = self._cfg
        grid = key_grid if cfg.refine_axis == "keys" else query_grid
        if self.aia is not None:
            pos = None
            if cfg.aia_positional and grid is not None:
                pos = Tensor(grid_encoding(grid, cfg.inner_dim, cfg.pos_base))
            aia = self.aia
            return lambda m: aia(m, pos)
        if self.conv_refine is not None:
            conv = self.conv_refine
            return lambda m: conv(m, grid)
        return None

    def __call__(self, q, k, v, key_grid=None, query_grid=None) -> Tensor:
        refine = self._refiner(key_grid, query_grid)
        return attend(q, k, v, self.w_q, self.w_k, self.w_v, self.w_o,
                      num_heads=self._cfg.num_heads, refine=refine, observer=self._observer)


def conv_bottleneck_refine(m, params: ConvBottleneck, grid=None) -> Tensor:
    return params(ag._as_tensor(m), grid)
