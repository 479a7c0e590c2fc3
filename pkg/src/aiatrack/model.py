"""Tracker network: conv stem, attention encoder, two-branch decoder and heads.

Token tensors are batched as ``(B, H*W, C)`` with cells flattened row-major.
Reference frames go through the same stem and encoder as the search frame;
their encoded features are kept and reused by the tracking loop.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from . import autograd as ag
from .attention import AttentionConfig, MultiHeadAttention, grid_encoding
from .autograd import Parameter, ShapeError, Tensor
from .boxes import BoundingBox
from .layers import Conv2d, FeedForward, LayerNorm, Linear, Module

EMBEDDING_MODES = ("embed", "mask", "none")
BRANCH_MODES = ("two", "long_only", "merged")
AIA_PLACEMENTS = ("both", "self", "cross", "none")


@dataclass
class TrackerConfig:
    """Network and tracking hyper-parameters.

    Defaults are the desk-scale profile (64 px search patch, stride 8,
    64 channels); :meth:`full_scale` returns the original sizes. The
    variant flags at the bottom select the ablation configurations.
    """

    encoder_layers: int = 3
    decoder_layers: int = 1
    stride: int = 8
    search_resolution: int = 64
    crop_area_factor: float = 25.0
    ffn_hidden: int = 256
    attention: AttentionConfig = field(
        default_factory=lambda: AttentionConfig(model_dim=64, num_heads=4, inner_dim=16))
    iou_pool_size: int = 3
    update_threshold: float = 0.7
    ensemble_size: int = 3
    cache_capacity: int = 30
    embeddings: str = "embed"
    branches: str = "two"
    aia_placement: str = "both"
    reference_key_pos: bool = True

    def __post_init__(self):
        if isinstance(self.attention, dict):
            self.attention = AttentionConfig(**self.attention)
        if self.stride < 2 or self.stride & (self.stride - 1):
            raise ValueError(f"stride must be a power of two >= 2, got {self.stride}")
        if self.search_resolution % self.stride:
            raise ValueError("search_resolution must be divisible by stride")
        if self.grid_size < 2:
            raise ValueError("the feature grid needs at least 2x2 cells")
        if self.encoder_layers < 0 or self.decoder_layers < 1:
            raise ValueError("need encoder_layers >= 0 and decoder_layers >= 1")
        if self.embeddings not in EMBEDDING_MODES:
            raise ValueError(f"embeddings must be one of {EMBEDDING_MODES}")
        if self.branches not in BRANCH_MODES:
            raise ValueError(f"branches must be one of {BRANCH_MODES}")
        if self.aia_placement not in AIA_PLACEMENTS:
            raise ValueError(f"aia_placement must be one of {AIA_PLACEMENTS}")
        if self.model_dim % 4:
            raise ValueError("model width must be a multiple of 4 for the 2-D sinusoid")
        if self.iou_pool_size < 1 or self.ensemble_size < 1 or self.cache_capacity < 1:
            raise ValueError("iou_pool_size, ensemble_size and cache_capacity must be positive")

    @classmethod
    def full_scale(cls, **overrides) -> "TrackerConfig":
        base = dict(stride=16, search_resolution=320, ffn_hidden=1024,
                    attention=AttentionConfig(model_dim=256, num_heads=4, inner_dim=64))
        base.update(overrides)
        return cls(**base)

    @property
    def model_dim(self) -> int:
        return self.attention.model_dim

    @property
    def grid_size(self) -> int:
        return self.search_resolution // self.stride

    @property
    def tokens(self) -> int:
        return self.grid_size ** 2

    def block_attention(self, kind: str) -> AttentionConfig:
        """Attention settings for ``"self"`` (encoder) or ``"cross"`` (decoder) blocks."""
        on = self.aia_placement in ("both", kind)
        return replace(self.attention, aia_enabled=on)


@dataclass
class FeatureMap:
    """Encoded frame: ``values`` is ``(B, H*W, C)`` or ``(H*W, C)``."""

    height: int
    width: int
    values: Tensor

    def __post_init__(self):
        if self.values.shape[-2] != self.height * self.width:
            raise ShapeError(f"{self.values.shape[-2]} tokens for a {self.height}x{self.width} grid")

    @property
    def channels(self) -> int:
        return self.values.shape[-1]

    @property
    def batched(self) -> Tensor:
        v = self.values
        return v if v.ndim == 3 else ag.reshape(v, (1,) + v.shape)


@dataclass
class EmbeddingMap:
    """Per-cell target/background embeddings plus the 0/1 target mask used to build them."""

    values: Tensor
    mask: np.ndarray


@dataclass
class Reference:
    features: FeatureMap
    embedding: EmbeddingMap


# --- embeddings --------------------------------------------------------------

def target_cells(boxes, height: int, width: int) -> np.ndarray:
    """1.0 where the cell centre lies inside the box (top/left edges inclusive).

    ``boxes`` has shape ``(..., 4)`` in normalized patch coordinates; the
    result has shape ``(..., H*W)``.
    """
    b = np.asarray(boxes, dtype=np.float64)
    cy, cx = np.meshgrid((np.arange(height) + 0.5) / height, (np.arange(width) + 0.5) / width, indexing="ij")
    cx, cy = cx.reshape(-1), cy.reshape(-1)
    inside = ((b[..., 0:1] <= cx) & (cx < b[..., 2:3]) & (b[..., 1:2] <= cy) & (cy < b[..., 3:4]))
    return inside.astype(np.float64)


class EmbeddingPair(Module):
    def __init__(self, rng: np.random.Generator, channels: int):
        self.target = Parameter(rng.normal(scale=0.5, size=channels))
        self.background = Parameter(rng.normal(scale=0.5, size=channels))

    def expand(self, mask: np.ndarray) -> Tensor:
        """Rows of ``target`` where ``mask`` is 1 and ``background`` where it is 0."""
        m = np.asarray(mask, dtype=np.float64)[..., None]
        c = self.target.shape[0]
        tgt = ag.matmul(Tensor(m), ag.reshape(self.target, (1, c)))
        bg = ag.matmul(Tensor(1.0 - m), ag.reshape(self.background, (1, c)))
        return tgt + bg


def assign_embeddings(box: BoundingBox, height: int, width: int, pair: EmbeddingPair) -> EmbeddingMap:
    if not box.is_valid():
        raise ValueError(f"invalid box {box}")
    if box.area <= 0:
        warnings.warn("zero-area box: every cell gets the background embedding", RuntimeWarning, stacklevel=2)
        mask = np.zeros(height * width)
    else:
        mask = target_cells(box.as_array(), height, width)
    return EmbeddingMap(pair.expand(mask), mask)


# --- stem and encoder ------------------------------------------------------------

class Stem(Module):
    """Stack of stride-2 3x3 convolutions reaching the configured stride, then LayerNorm.

    Images in ``[0, 1]`` are centred and scaled to roughly unit range first.
    """

    input_mean = 0.5
    input_std = 0.25

    def __init__(self, rng: np.random.Generator, channels: int, stride: int):
        depth = int(math.log2(stride))
        widths = [max(channels >> (depth - 1 - i), 4) for i in range(depth)]
        widths[-1] = channels
        c_in = 3
        self.convs = []
        for w in widths:
            self.convs.append(Conv2d(rng, c_in, w, 3, stride=2, padding=1))
            c_in = w
        self.norm = LayerNorm(channels)
        self._stride = stride

    def __call__(self, images) -> FeatureMap:
        x = ag._as_tensor(images)
        if x.ndim == 3:
            x = ag.reshape(x, (1,) + x.shape)
        if x.ndim != 4 or x.shape[-1] != 3:
            raise ShapeError(f"expected (B, H, W, 3) images, got {x.shape}")
        _, h, w, _ = x.shape
        x = (x - self.input_mean) * (1.0 / self.input_std)
        if h % self._stride or w % self._stride:
            raise ValueError(f"image size {h}x{w} is not divisible by stride {self._stride}")
        for i, conv in enumerate(self.convs):
            x = conv(x)
            if i < len(self.convs) - 1:
                x = ag.relu(x)
        b, gh, gw, c = x.shape
        tokens = self.norm(ag.reshape(x, (b, gh * gw, c)))
        return FeatureMap(gh, gw, tokens)


class EncoderLayer(Module):
    def __init__(self, rng: np.random.Generator, cfg: TrackerConfig):
        c = cfg.model_dim
        self.attn = MultiHeadAttention(rng, cfg.block_attention("self"), corr_len=cfg.tokens)
        self.norm1 = LayerNorm(c)
        self.ffn = FeedForward(rng, c, cfg.ffn_hidden)
        self.norm2 = LayerNorm(c)

    def __call__(self, x: Tensor, pos: Tensor, grid: tuple[int, int, int]) -> Tensor:
        qk = x + pos
        x = self.norm1(x + self.attn(qk, qk, x, key_grid=grid, query_grid=grid))
        return self.norm2(x + self.ffn(x))


class Encoder(Module):
    def __init__(self, rng: np.random.Generator, cfg: TrackerConfig):
        self.layers = [EncoderLayer(rng, cfg) for _ in range(cfg.encoder_layers)]
        self._base = cfg.attention.pos_base

    def __call__(self, f: FeatureMap) -> FeatureMap:
        x = f.values
        if not self.layers:
            return f
        grid = (1, f.height, f.width)
        pos = Tensor(grid_encoding(grid, f.channels, self._base))
        for layer in self.layers:
            x = layer(x, pos, grid)
        return FeatureMap(f.height, f.width, x)


# --- decoder ----------------------------------------------------------------------

class DecoderLayer(Module):
    def __init__(self, rng: np.random.Generator, cfg: TrackerConfig):
        c = cfg.model_dim
        acfg = cfg.block_attention("cross")
        self.long_attn = MultiHeadAttention(rng, acfg, corr_len=cfg.tokens)
        self.short_attn = MultiHeadAttention(rng, acfg, corr_len=cfg.tokens) if cfg.branches == "two" else None
        self.norm1 = LayerNorm(c)
        self.ffn = FeedForward(rng, c, cfg.ffn_hidden)
        self.norm2 = LayerNorm(c)

    def __call__(self, x, q_pos, long_kv, short_kv) -> Tensor:
        q = x + q_pos
        merged = self.long_attn(q, long_kv[0], long_kv[1], key_grid=long_kv[2])
        if self.short_attn is not None:
            merged = merged + self.short_attn(q, short_kv[0], short_kv[1], key_grid=short_kv[2])
        x = self.norm1(x + merged)
        return self.norm2(x + self.ffn(x))


class Decoder(Module):
    def __init__(self, rng: np.random.Generator, cfg: TrackerConfig):
        self.layers = [DecoderLayer(rng, cfg) for _ in range(cfg.decoder_layers)]
        self._cfg = cfg

    def _values(self, ref: Reference) -> Tensor:
        feats = ref.features.batched
        mode = self._cfg.embeddings
        if mode == "none":
            return feats
        if mode == "mask":
            m = np.broadcast_to(np.asarray(ref.embedding.mask, dtype=np.float64)[..., None], feats.shape)
            return feats * Tensor(np.ascontiguousarray(m))
        emb = ref.embedding.values
        if emb.ndim == 2:
            emb = ag.reshape(emb, (1,) + emb.shape)
        if emb.shape != feats.shape:
            raise ShapeError(f"embedding map {emb.shape} does not match features {feats.shape}")
        return feats + emb

    def _key_value(self, refs: Sequence[Reference]):
        """Keys (with positional encoding), values and key grid for concatenated references."""
        f0 = refs[0].features
        keys = [r.features.batched for r in refs]
        values = [self._values(r) for r in refs]
        k = keys[0] if len(keys) == 1 else ag.concat(keys, axis=-2)
        v = values[0] if len(values) == 1 else ag.concat(values, axis=-2)
        grid = (len(refs), f0.height, f0.width)
        if self._cfg.reference_key_pos:
            k = k + Tensor(grid_encoding(grid, f0.channels, self._cfg.attention.pos_base))
        return k, v, grid

    def __call__(self, search: FeatureMap, long_ref: Reference, short_refs: Sequence[Reference]) -> FeatureMap:
        for r in [long_ref, *short_refs]:
            if r.features.channels != search.channels:
                raise ShapeError("reference and search widths differ")
        short_refs = list(short_refs) or [long_ref]
        if self._cfg.branches == "merged":
            long_kv = self._key_value([long_ref, *short_refs])
            short_kv = None
        else:
            long_kv = self._key_value([long_ref])
            short_kv = self._key_value(short_refs) if self._cfg.branches == "two" else None
        q_pos = Tensor(grid_encoding((1, search.height, search.width), search.channels,
                                     self._cfg.attention.pos_base))
        x = search.batched
        for layer in self.layers:
            x = layer(x, q_pos, long_kv, short_kv)
        return FeatureMap(search.height, search.width, x)


# --- heads ---------------------------------------------------------------------------

@dataclass
class CornerPrediction:
    coords: Tensor  # (B, 4) normalized x_tl, y_tl, x_br, y_br
    cells: Tensor  # (B, 4) same corners in cell units
    prob_tl: Tensor  # (B, H*W)
    prob_br: Tensor

    def box(self, i: int = 0) -> BoundingBox:
        return BoundingBox.from_array(self.coords.data[i]).clamp(0.0, 1.0)


def soft_argmax(prob: Tensor, height: int, width: int) -> Tensor:
    """Expected (x, y) cell position under ``prob`` of shape ``(B, H*W)``."""
    ys, xs = np.meshgrid(np.arange(height, dtype=np.float64), np.arange(width, dtype=np.float64), indexing="ij")
    grid = Tensor(np.stack([xs.reshape(-1), ys.reshape(-1)], axis=1))
    return ag.matmul(prob, grid)


def normalize_cells(cells: Tensor, height: int, width: int) -> Tensor:
    """Map corner positions in cell units so that cells 0 and W-1 land on 0 and 1."""
    return cells * Tensor(np.array([1.0 / (width - 1), 1.0 / (height - 1)] * 2))


class CornerHead(Module):
    def __init__(self, rng: np.random.Generator, channels: int):
        def branch():
            return [Conv2d(rng, channels, max(channels // 2, 1), 3),
                    Conv2d(rng, max(channels // 2, 1), max(channels // 4, 1), 3),
                    Conv2d(rng, max(channels // 4, 1), 1, 1)]

        self.top_left = branch()
        self.bottom_right = branch()

    @staticmethod
    def _score(convs, x: Tensor) -> Tensor:
        for i, conv in enumerate(convs):
            x = conv(x)
            if i < len(convs) - 1:
                x = ag.relu(x)
        b, h, w, _ = x.shape
        return ag.softmax(ag.reshape(x, (b, h * w)))

    def __call__(self, decoded: FeatureMap) -> CornerPrediction:
        h, w = decoded.height, decoded.width
        x = decoded.batched
        x = ag.reshape(x, (x.shape[0], h, w, x.shape[-1]))
        p_tl = self._score(self.top_left, x)
        p_br = self._score(self.bottom_right, x)
        cells = ag.concat([soft_argmax(p_tl, h, w), soft_argmax(p_br, h, w)], axis=-1)
        return CornerPrediction(normalize_cells(cells, h, w), cells, p_tl, p_br)


def bilinear_pool_weights(box, height: int, width: int, size: int, samples: int = 2) -> np.ndarray:
    """Row-stochastic ``(size*size, H*W)`` matrix averaging bilinear samples per bin.

    Cell ``c`` has its centre at normalized position ``(c + 0.5) / W``. Each
    bin averages a ``samples x samples`` grid of bilinear reads; reads are
    clamped to the map. Boxes thinner than one cell read the single nearest
    cell instead (with a warning).
    """
    x0, y0, x1, y1 = (float(v) for v in np.asarray(box, dtype=np.float64).reshape(4))
    out = np.zeros((size * size, height * width))
    if (x1 - x0) * width < 1.0 or (y1 - y0) * height < 1.0:
        warnings.warn("box smaller than one feature cell; pooling the nearest cell", RuntimeWarning, stacklevel=2)
        cx = min(max(int(math.floor((x0 + x1) / 2 * width)), 0), width - 1)
        cy = min(max(int(math.floor((y0 + y1) / 2 * height)), 0), height - 1)
        out[:, cy * width + cx] = 1.0
        return out
    fx0, fy0 = x0 * width - 0.5, y0 * height - 0.5
    bw, bh = (x1 - x0) * width / size, (y1 - y0) * height / size
    offs = (np.arange(samples) + 0.5) / samples
    share = 1.0 / (samples * samples)
    for i in range(size):
        ys = np.clip(fy0 + (i + offs) * bh, 0.0, height - 1)
        for j in range(size):
            xs = np.clip(fx0 + (j + offs) * bw, 0.0, width - 1)
            row = out[i * size + j]
            for y in ys:
                ya = min(int(y), height - 2) if height > 1 else 0
                ty = y - ya
                for x in xs:
                    xa = min(int(x), width - 2) if width > 1 else 0
                    tx = x - xa
                    row[ya * width + xa] += share * (1 - ty) * (1 - tx)
                    row[ya * width + xa + 1] += share * (1 - ty) * tx
                    row[(ya + 1) * width + xa] += share * ty * (1 - tx)
                    row[(ya + 1) * width + xa + 1] += share * ty * tx
    return out


def bilinear_pool(features: Tensor, boxes, height: int, width: int, size: int) -> Tensor:
    """Pool ``(B, H*W, C)`` features inside one box per batch item to ``(B, size*size, C)``."""
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    if boxes.shape[0] != features.shape[0]:
        raise ShapeError(f"{boxes.shape[0]} boxes for a batch of {features.shape[0]}")
    weights = np.stack([bilinear_pool_weights(b, height, width, size) for b in boxes])
    return ag.matmul(Tensor(weights), features)


class IoUHead(Module):
    def __init__(self, rng: np.random.Generator, channels: int, pool_size: int):
        mid = max(channels // 2, 1)
        self.conv = Conv2d(rng, channels, mid, 3)
        self.fc1 = Linear(rng, mid * pool_size * pool_size, channels)
        self.fc2 = Linear(rng, channels, 1)
        self._pool = pool_size

    def pooled(self, decoded: FeatureMap, boxes) -> Tensor:
        h, w = decoded.height, decoded.width
        x = decoded.batched
        b = x.shape[0]
        x = ag.relu(self.conv(ag.reshape(x, (b, h, w, x.shape[-1]))))
        return bilinear_pool(ag.reshape(x, (b, h * w, x.shape[-1])), boxes, h, w, self._pool)

    def __call__(self, decoded: FeatureMap, boxes) -> Tensor:
        p = self.pooled(decoded, boxes)
        flat = ag.reshape(p, (p.shape[0], p.shape[1] * p.shape[2]))
        return ag.reshape(self.fc2(ag.relu(self.fc1(flat))), (p.shape[0],))


# --- full network ----------------------------------------------------------------------

class TrackerNet(Module):
    def __init__(self, cfg: TrackerConfig | None = None, seed: int = 0):
        cfg = cfg or TrackerConfig()
        rng = np.random.default_rng(seed)
        c = cfg.model_dim
        self.stem = Stem(rng, c, cfg.stride)
        self.encoder = Encoder(rng, cfg)
        self.embeddings = EmbeddingPair(rng, c)
        self.decoder = Decoder(rng, cfg)
        self.corner_head = CornerHead(rng, c)
        self.iou_head = IoUHead(rng, c, cfg.iou_pool_size)
        self._cfg = cfg
        self._encoded_frames = 0

    @property
    def cfg(self) -> TrackerConfig:
        return self._cfg

    @property
    def encoded_frames(self) -> int:
        """Number of images passed through :meth:`features` so far."""
        return self._encoded_frames

    def features(self, images) -> FeatureMap:
        f = self.encoder(self.stem(images))
        self._encoded_frames += f.values.shape[0]
        return f

    def reference(self, features: FeatureMap, boxes) -> Reference:
        """Attach target/background embeddings for one box per batch item."""
        b = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
        if b.shape[0] != features.batched.shape[0]:
            raise ShapeError("one box per reference frame is required")
        mask = target_cells(b, features.height, features.width)
        return Reference(features, EmbeddingMap(self.embeddings.expand(mask), mask))

    def head_outputs(self, search: FeatureMap, long_ref: Reference, short_refs: Sequence[Reference],
                     proposals=None) -> tuple[CornerPrediction, Tensor | None, FeatureMap]:
        decoded = self.decoder(search, long_ref, short_refs)
        corners = self.corner_head(decoded)
        iou = None
        if proposals is not None:
            iou = self.iou_head(decoded, proposals)
        return corners, iou, decoded
