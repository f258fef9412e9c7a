"""Per-agent query generation: learnable object queries refined by
multi-scale deformable cross-attention over the pillar BEV pyramid.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .attention import MultiHeadAttention
from .autodiff import MLP, LayerNorm, Linear, Module, Parameter, Tensor, ops
from .encoder import BevFeaturePyramid, GridConfig, PillarBackbone, PillarGrid, pillarize
from .scene import PointCloud

logger = logging.getLogger(__name__)


class ConfigurationError(ValueError):
    pass


@dataclass
class ObjectQuery:
    feature: np.ndarray
    reference_point: np.ndarray  # metres, owner frame
    owner_agent: int


@dataclass
class QuerySet:
    """All queries of one agent: features (N, C_q) and metric reference points (N, 3)."""

    features: Tensor
    refs: Tensor
    owner: int = 0
    ref_logits: Tensor | None = None
    layers: list = field(default_factory=list)  # per-layer (features, refs) for auxiliary losses

    def __len__(self) -> int:
        return self.features.shape[0]

    def to_object_queries(self) -> list[ObjectQuery]:
        f, r = self.features.data, self.refs.data
        return [ObjectQuery(f[i].copy(), r[i].copy(), self.owner) for i in range(len(self))]


@dataclass(frozen=True)
class RefRange:
    """Box over which reference points live (metres)."""

    x: tuple[float, float]
    y: tuple[float, float]
    z: tuple[float, float]

    @property
    def lo(self) -> np.ndarray:
        return np.array([self.x[0], self.y[0], self.z[0]])

    @property
    def span(self) -> np.ndarray:
        return np.array([self.x[1] - self.x[0], self.y[1] - self.y[0], self.z[1] - self.z[0]])

    def squash(self, logits: Tensor) -> Tensor:
        lo = self.lo.astype(logits.dtype)
        span = self.span.astype(logits.dtype)
        return ops.sigmoid(logits) * span + lo

    def unsquash(self, points: np.ndarray) -> np.ndarray:
        u = np.clip((np.asarray(points) - self.lo) / self.span, 1e-4, 1 - 1e-4)
        return np.log(u / (1 - u))

    def normalize(self, points: Tensor) -> Tensor:
        return (points - self.lo.astype(points.dtype)) * (1.0 / self.span).astype(points.dtype)


def _halton(n: int, base: int) -> np.ndarray:
    out = np.zeros(n)
    for i in range(n):
        f, r, k = 1.0, 0.0, i + 1
        while k > 0:
            f /= base
            r += f * (k % base)
            k //= base
        out[i] = r
    return out


def init_queries(n_queries: int, query_dim: int, seed, ref_range: RefRange,
                 z_init: float | None = None) -> tuple[np.ndarray, np.ndarray, list[ObjectQuery]]:
    """Initial query features, reference-point logits and the matching ObjectQuery list.

    Features are small Gaussians. Reference points cover the range with a
    randomly shifted Halton set in x/y so every region has a nearby query.
    """
    if n_queries < 1:
        raise ValueError("need at least one query")
    rng = np.random.default_rng(seed)
    feats = rng.normal(0.0, 0.1, size=(n_queries, query_dim))
    shift = rng.random(2)
    u = np.mod(np.stack([_halton(n_queries, 2), _halton(n_queries, 3)], 1) + shift, 1.0)
    u = 0.04 + 0.92 * u
    z = ref_range.z[0] + 0.5 * (ref_range.z[1] - ref_range.z[0]) if z_init is None else z_init
    pts = np.column_stack([ref_range.x[0] + u[:, 0] * (ref_range.x[1] - ref_range.x[0]),
                           ref_range.y[0] + u[:, 1] * (ref_range.y[1] - ref_range.y[0]),
                           np.full(n_queries, z)])
    logits = ref_range.unsquash(pts)
    queries = [ObjectQuery(feats[i].copy(), pts[i].copy(), 0) for i in range(n_queries)]
    return feats, logits, queries


class PositionalEmbedding(Module):
    """Sinusoids of range-normalised coordinates followed by one linear layer."""

    def __init__(self, ref_range: RefRange, dim: int, n_freqs: int = 8, rng=None):
        self.ref_range = ref_range
        self.freqs = (2.0 ** np.arange(n_freqs)) * math.pi
        self.proj = Linear(3 * 2 * n_freqs, dim, rng=rng)

    def forward(self, points) -> Tensor:
        points = points if isinstance(points, Tensor) else Tensor(points)
        u = self.ref_range.normalize(points)  # (N, 3)
        n = u.shape[0]
        ang = ops.reshape(ops.reshape(u, (n, 3, 1)) * self.freqs.astype(u.dtype), (n, -1))
        return self.proj(ops.sin_cos(ang))


def positional_embed(r, pe: PositionalEmbedding) -> Tensor:
    return pe(np.atleast_2d(np.asarray(r, dtype=np.float64)) if not isinstance(r, Tensor) else r)


class DeformableCrossAttention(Module):
    """Multi-head, multi-level deformable attention.

    For every head, level and sampling point a linear head on the
    (position-embedded) query predicts a pixel offset from the reference
    point and an attention logit. Logits are normalised jointly over
    (level, point) within a head. Sampled features are weighted, projected
    per head and mixed by the output projection.
    """

    def __init__(self, query_dim: int, value_dim: int, n_heads: int = 8, n_levels: int = 4,
                 n_points: int = 4, offset_init_cells: float = 4.0, rng=None):
        if query_dim % n_heads:
            raise ConfigurationError(f"query_dim {query_dim} not divisible by {n_heads} heads")
        rng = np.random.default_rng(rng)
        self.n_heads, self.n_levels, self.n_points = n_heads, n_levels, n_points
        self.head_dim = query_dim // n_heads
        self.offset_head = Linear(query_dim, n_heads * n_levels * n_points * 2, rng=rng).zero_()
        self.weight_head = Linear(query_dim, n_heads * n_levels * n_points, rng=rng).zero_()
        theta = 2 * np.pi * np.arange(n_heads) / n_heads
        dirs = np.stack([np.cos(theta), np.sin(theta)], -1)
        dirs = dirs / np.abs(dirs).max(axis=-1, keepdims=True)
        grid = dirs[:, None, None, :] * ((np.arange(n_points) + 1) / n_points)[None, None, :, None]
        self.offset_head.bias.data[...] = np.broadcast_to(
            grid, (n_heads, n_levels, n_points, 2)).reshape(-1)
        limit = math.sqrt(6.0 / (value_dim + self.head_dim))
        self.value_proj = Parameter(rng.uniform(-limit, limit, size=(n_heads, value_dim, self.head_dim)))
        self.out_proj = Linear(query_dim, query_dim, rng=rng)
        self.offset_scale = Parameter(np.full(n_levels, offset_init_cells))

    def sampling(self, query: Tensor, refs_xy, pyramid: BevFeaturePyramid, grid: GridConfig):
        """Sampling locations (normalised, per level) and normalised weights."""
        if pyramid.n_levels != self.n_levels:
            raise ConfigurationError(f"pyramid has {pyramid.n_levels} levels, attention expects {self.n_levels}")
        n = query.shape[0]
        M, L, K = self.n_heads, self.n_levels, self.n_points
        offsets = ops.reshape(self.offset_head(query), (n, M, L, K, 2))
        logits = ops.reshape(self.weight_head(query), (n, M, L * K))
        weights = ops.softmax(logits, axis=-1)
        refs_xy = refs_xy if isinstance(refs_xy, Tensor) else Tensor(np.asarray(refs_xy), dtype=query.dtype)
        dx, dy = grid.pillar_size
        locs = []
        for lvl, (h, w) in enumerate(pyramid.shapes):
            # metric -> continuous pixel coordinates, kept on the tape so refs receive gradients
            f = 2.0 ** lvl
            scale = np.array([1.0 / (dx * f), 1.0 / (dy * f)], dtype=query.dtype)
            shift = np.array([(-grid.x_range[0] / dx - 0.5) / f, (-grid.y_range[0] / dy - 0.5) / f],
                             dtype=query.dtype)
            base = ops.reshape(refs_xy * scale + shift, (n, 1, 1, 2))
            pix = offsets[:, :, lvl] * self.offset_scale[lvl] + base
            norm = np.array([1.0 / max(w - 1, 1), 1.0 / max(h - 1, 1)], dtype=query.dtype)
            locs.append(pix * norm)
        return locs, weights

    def forward(self, query: Tensor, refs_xy, pyramid: BevFeaturePyramid,
                grid: GridConfig, return_weights: bool = False):
        n = query.shape[0]
        M, L, K = self.n_heads, self.n_levels, self.n_points
        locs, weights = self.sampling(query, refs_xy, pyramid, grid)
        sampled = ops.concat([ops.bilinear_sample(level, loc)
                              for level, loc in zip(pyramid.levels, locs)], axis=2)  # (n, M, L*K, C)
        agg = ops.sum(sampled * ops.reshape(weights, (n, M, L * K, 1)), axis=2)  # (n, M, C)
        heads = ops.matmul(ops.transpose(agg, (1, 0, 2)), self.value_proj)  # (M, n, d)
        out = self.out_proj(ops.reshape(ops.transpose(heads, (1, 0, 2)), (n, M * self.head_dim)))
        return (out, weights) if return_weights else out


class DecoderLayer(Module):
    def __init__(self, query_dim: int, value_dim: int, n_heads: int, n_levels: int, n_points: int,
                 rng=None):
        rng = np.random.default_rng(rng)
        self.self_attn = MultiHeadAttention(query_dim, n_heads, rng=rng)
        self.norm1 = LayerNorm(query_dim)
        self.cross_attn = DeformableCrossAttention(query_dim, value_dim, n_heads, n_levels, n_points, rng=rng)
        self.norm2 = LayerNorm(query_dim)
        self.ffn = MLP([query_dim, 2 * query_dim, query_dim], rng=rng)
        self.norm3 = LayerNorm(query_dim)
        self.ref_delta = Linear(query_dim, 3, rng=rng).zero_()

    def forward(self, x: Tensor, ref_logits: Tensor, pe: PositionalEmbedding, pyramid: BevFeaturePyramid,
                grid: GridConfig, ref_range: RefRange, refine: bool = True):
        refs = ref_range.squash(ref_logits)
        pos = pe(refs)
        qk = x + pos
        x = self.norm1(x + self.self_attn(qk, qk, x))
        x = self.norm2(x + self.cross_attn(x + pos, refs[:, :2], pyramid, grid))
        x = self.norm3(x + self.ffn(x))
        if refine:
            ref_logits = ops.detach(ref_logits) + self.ref_delta(x)
        return x, ref_logits


@dataclass(frozen=True)
class DecoderConfig:
    n_queries: int = 180
    query_dim: int = 64
    n_heads: int = 8
    n_levels: int = 4
    n_points: int = 4
    n_layers: int = 3
    channels: int = 32
    refine: bool = True
    max_points_per_pillar: int = 16


class PointDETR(Module):
    """Pillar backbone + decoder stack producing an agent's object queries."""

    def __init__(self, grid: GridConfig, ref_range: RefRange, cfg: DecoderConfig, seed=0):
        rng = np.random.default_rng(seed)
        self.grid = grid
        self.ref_range = ref_range
        self.cfg = cfg
        self.backbone = PillarBackbone(grid, cfg.channels, cfg.n_levels, rng=rng)
        feats, logits, _ = init_queries(cfg.n_queries, cfg.query_dim, rng, ref_range,
                                        z_init=-1.0 if ref_range.z[0] < -1.0 < ref_range.z[1] else None)
        self.query_feat = Parameter(feats)
        self.ref_logit = Parameter(logits)
        self.pe = PositionalEmbedding(ref_range, cfg.query_dim, rng=rng)
        self.layers = [DecoderLayer(cfg.query_dim, cfg.channels, cfg.n_heads, cfg.n_levels, cfg.n_points, rng=rng)
                       for _ in range(cfg.n_layers)]

    def decode(self, pyramid: BevFeaturePyramid, owner: int = 0) -> QuerySet:
        x = self.query_feat
        logits = self.ref_logit
        layers = []
        for layer in self.layers:
            x, logits = layer(x, logits, self.pe, pyramid, self.grid, self.ref_range, self.cfg.refine)
            layers.append((x, self.ref_range.squash(logits)))
        return QuerySet(x, layers[-1][1] if layers else self.ref_range.squash(logits), owner, logits, layers)

    def forward(self, cloud: PointCloud | PillarGrid, owner: int = 0, seed=0) -> QuerySet:
        grid = cloud if isinstance(cloud, PillarGrid) else pillarize(cloud, self.grid, seed=seed)
        return self.decode(self.backbone(grid), owner)


def run_point_detr(cloud: PointCloud, model: PointDETR, owner: int = 0, seed=0) -> list[ObjectQuery]:
    return model(cloud, owner, seed).to_object_queries()
