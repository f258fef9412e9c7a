"""Pillar voxelisation and the multi-scale BEV backbone.

Points are bucketed into vertical pillars on a regular x/y grid, run through
a shared per-point layer, max-pooled per pillar and scattered into a dense
``C x H0 x W0`` map. A stride-1 stem plus ``L - 1`` stride-2 blocks give the
pyramid; 1x1 lateral convs and a top-down pass (levels 2..L) form the FPN.
Level 1 is kept out of the top-down pass so it stays equivariant to
single-pillar shifts.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from .autodiff import Conv2d, Linear, Module, Tensor, ops
from .scene import PointCloud

N_POINT_FEATURES = 7  # z, intensity, offsets to pillar mean (3), offsets to pillar centre (2)


@dataclass(frozen=True)
class GridConfig:
    pillar_size: tuple[float, float] = (0.2, 0.2)
    x_range: tuple[float, float] = (-35.2, 35.2)
    y_range: tuple[float, float] = (-10.0, 10.0)
    z_range: tuple[float, float] = (-3.0, 1.0)
    max_points_per_pillar: int = 16

    def __post_init__(self):
        if min(self.pillar_size) <= 0:
            raise ValueError("pillar size must be positive")

    @property
    def shape(self) -> tuple[int, int]:
        """(H0, W0): rows along y, columns along x."""
        dx, dy = self.pillar_size
        return (int(round((self.y_range[1] - self.y_range[0]) / dy)),
                int(round((self.x_range[1] - self.x_range[0]) / dx)))

    def level_shapes(self, n_levels: int) -> list[tuple[int, int]]:
        shapes = [self.shape]
        for _ in range(n_levels - 1):
            h, w = shapes[-1]
            shapes.append((-(-h // 2), -(-w // 2)))
        return shapes

    def to_pixels(self, xy: np.ndarray, level: int) -> np.ndarray:
        """Metric (x, y) to continuous (col, row) pixel coordinates on ``level`` (0-based)."""
        xy = np.asarray(xy, dtype=np.float64)
        dx, dy = self.pillar_size
        col = (xy[..., 0] - self.x_range[0]) / dx - 0.5
        row = (xy[..., 1] - self.y_range[0]) / dy - 0.5
        f = 2 ** level
        return np.stack([col / f, row / f], axis=-1)


@dataclass
class PillarGrid:
    """Non-empty pillars of one cloud.

    ``coords`` (P, 2) holds (row, col) per pillar, ``features`` (N, 7) the
    augmented per-point features and ``point_pillar`` (N,) the owning pillar
    of every kept point.
    """

    config: GridConfig
    coords: np.ndarray
    features: np.ndarray
    point_pillar: np.ndarray

    @property
    def n_pillars(self) -> int:
        return len(self.coords)

    @property
    def shape(self) -> tuple[int, int]:
        return self.config.shape


def pillar_indices(xy: np.ndarray, config: GridConfig) -> np.ndarray:
    """Integer (row, col) of each point under the floor rule; no range check."""
    dx, dy = config.pillar_size
    col = np.floor((xy[:, 0] - config.x_range[0]) / dx).astype(np.int64)
    row = np.floor((xy[:, 1] - config.y_range[0]) / dy).astype(np.int64)
    return np.stack([row, col], axis=1)


def pillarize(cloud: PointCloud | np.ndarray, config: GridConfig, seed=0) -> PillarGrid:
    pts = cloud.points if isinstance(cloud, PointCloud) else np.asarray(cloud, dtype=np.float64).reshape(-1, 4)
    H, W = config.shape
    rc = pillar_indices(pts[:, :2], config)
    keep = ((rc[:, 0] >= 0) & (rc[:, 0] < H) & (rc[:, 1] >= 0) & (rc[:, 1] < W)
            & (pts[:, 2] >= config.z_range[0]) & (pts[:, 2] < config.z_range[1]))
    pts, rc = pts[keep], rc[keep]
    if len(pts) == 0:
        return PillarGrid(config, np.zeros((0, 2), np.int64), np.zeros((0, N_POINT_FEATURES)),
                          np.zeros(0, np.int64))
    flat = rc[:, 0] * W + rc[:, 1]
    rng = np.random.default_rng(seed)
    order = np.lexsort((rng.random(len(flat)), flat))
    flat, pts = flat[order], pts[order]
    uniq, start, counts = np.unique(flat, return_index=True, return_counts=True)
    rank = np.arange(len(flat)) - np.repeat(start, counts)
    capped = rank < config.max_points_per_pillar
    flat, pts = flat[capped], pts[capped]
    pillar = np.searchsorted(uniq, flat)
    n_per = np.bincount(pillar, minlength=len(uniq)).astype(np.float64)
    mean = np.stack([np.bincount(pillar, weights=pts[:, k], minlength=len(uniq)) for k in range(3)], 1)
    mean /= n_per[:, None]
    rows, cols = uniq // W, uniq % W
    dx, dy = config.pillar_size
    cx = config.x_range[0] + (cols + 0.5) * dx
    cy = config.y_range[0] + (rows + 0.5) * dy
    feats = np.column_stack([
        pts[:, 2],
        pts[:, 3],
        pts[:, :3] - mean[pillar],
        pts[:, 0] - cx[pillar],
        pts[:, 1] - cy[pillar],
    ])
    return PillarGrid(config, np.stack([rows, cols], 1), feats, pillar)


class Pillarizer(TransformerMixin, BaseEstimator):
    """Transformer wrapper: point clouds in, :class:`PillarGrid` objects out."""

    def __init__(self, pillar_size=(0.2, 0.2), x_range=(-35.2, 35.2), y_range=(-10.0, 10.0),
                 z_range=(-3.0, 1.0), max_points_per_pillar=16, seed=0):
        self.pillar_size = pillar_size
        self.x_range = x_range
        self.y_range = y_range
        self.z_range = z_range
        self.max_points_per_pillar = max_points_per_pillar
        self.seed = seed

    def fit(self, X=None, y=None):
        self.config_ = GridConfig(tuple(self.pillar_size), tuple(self.x_range), tuple(self.y_range),
                                  tuple(self.z_range), int(self.max_points_per_pillar))
        self.grid_shape_ = self.config_.shape
        return self

    def transform(self, X):
        if not hasattr(self, "config_"):
            self.fit()
        return [pillarize(c, self.config_, seed=self.seed) for c in X]


@dataclass
class BevFeaturePyramid:
    levels: list[Tensor]

    def __post_init__(self):
        channels = {lvl.shape[0] for lvl in self.levels}
        if len(channels) != 1:
            raise ValueError(f"pyramid levels disagree on channel count: {channels}")

    @property
    def n_levels(self) -> int:
        return len(self.levels)

    @property
    def channels(self) -> int:
        return self.levels[0].shape[0]

    @property
    def shapes(self) -> list[tuple[int, int]]:
        return [tuple(lvl.shape[1:]) for lvl in self.levels]


class PillarBackbone(Module):
    def __init__(self, config: GridConfig, channels: int = 32, n_levels: int = 4, rng=None):
        rng = np.random.default_rng(rng)
        self.config = config
        self.channels = channels
        self.n_levels = n_levels
        self.point_net = Linear(N_POINT_FEATURES, channels, rng=rng)
        self.stem = Conv2d(channels, channels, 3, 1, rng=rng)
        self.down = [Conv2d(channels, channels, 3, 2, rng=rng) for _ in range(n_levels - 1)]
        self.lateral = [Conv2d(channels, channels, 1, 1, rng=rng) for _ in range(n_levels)]

    def scatter(self, grid: PillarGrid) -> Tensor:
        H, W = grid.shape
        C = self.channels
        if grid.n_pillars == 0:
            return Tensor(np.zeros((C, H, W)))
        feats = ops.relu(self.point_net(Tensor(grid.features)))
        pooled = ops.segment_max(feats, grid.point_pillar, grid.n_pillars)
        dense = ops.scatter_rows(pooled, grid.coords[:, 0] * W + grid.coords[:, 1], H * W)
        return ops.transpose(ops.reshape(dense, (H, W, C)), (2, 0, 1))

    def forward(self, grid: PillarGrid) -> BevFeaturePyramid:
        x = ops.relu(self.stem(self.scatter(grid)))
        feats = [x]
        for conv in self.down:
            x = ops.relu(conv(x))
            feats.append(x)
        out = [None] * self.n_levels
        top = None
        for lvl in range(self.n_levels - 1, -1, -1):
            lat = self.lateral[lvl](feats[lvl])
            if top is not None and lvl > 0:
                lat = lat + ops.upsample2x(top, lat.shape[1:])
            out[lvl] = lat
            top = lat
        return BevFeaturePyramid(out)


def encode(grid: PillarGrid, backbone: PillarBackbone) -> BevFeaturePyramid:
    return backbone(grid)
