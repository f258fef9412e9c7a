"""Classification/box heads and the Hungarian set loss.

Boxes are regressed as 8 parameters ``(x, y, z, l, w, h, sin 2yaw, cos 2yaw)``.
The doubled angle makes the encoding invariant to a half turn, which is
the symmetry of the BEV footprint.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment

from .autodiff import MLP, Module, Tensor, ops

SIZE_PRIOR = (4.5, 1.9, 1.6)
PRIOR_PROB = 0.01


def _softplus_inv(y: float) -> float:
    return math.log(math.expm1(y))


@dataclass
class Detection:
    class_scores: np.ndarray
    box: np.ndarray  # (x, y, z, l, w, h, yaw)
    source_query: int

    @property
    def score(self) -> float:
        return float(np.max(self.class_scores))


@dataclass
class MatchAssignment:
    gt_index: np.ndarray
    pred_index: np.ndarray
    cost: float

    def __len__(self) -> int:
        return len(self.gt_index)


@dataclass(frozen=True)
class LossWeights:
    cls: float = 2.0
    box: float = 0.25
    alpha: float = 0.25
    gamma: float = 2.0


class DetectionHead(Module):
    def __init__(self, dim: int, rng=None):
        rng = np.random.default_rng(rng)
        self.cls = MLP([dim, dim, 1], rng=rng)
        self.box = MLP([dim, dim, 8], rng=rng)
        self.cls.layers[-1].bias.data[...] = -math.log((1 - PRIOR_PROB) / PRIOR_PROB)
        self.box_offset = np.array([0.0, 0.0, 0.0, *(_softplus_inv(s) for s in SIZE_PRIOR), 0.0, 1.0])

    def logits(self, q: Tensor) -> Tensor:
        return ops.reshape(self.cls(q), (q.shape[0],))

    def forward(self, q: Tensor, refs) -> tuple[Tensor, Tensor]:
        """Class logits (N,) and box parameters (N, 8) relative to the query owner's frame."""
        refs = refs if isinstance(refs, Tensor) else Tensor(np.asarray(refs), dtype=q.dtype)
        raw = self.box(q) + self.box_offset.astype(q.dtype)
        n = q.shape[0]
        center = raw[:, 0:3] + refs
        size = ops.softplus(raw[:, 3:6])
        params = ops.concat([center, size, raw[:, 6:8]], axis=1)
        return self.logits(q), ops.reshape(params, (n, 8))


def frame_map(pose_in_ego) -> tuple[np.ndarray, np.ndarray]:
    """Affine map ``p @ A + b`` taking box parameters from a sender frame to the ego frame.

    ``pose_in_ego`` is the sender pose (x, y, z, yaw) expressed in the ego frame.
    """
    x, y, z, psi = (float(v) for v in pose_in_ego)
    c, s = math.cos(psi), math.sin(psi)
    c2, s2 = math.cos(2 * psi), math.sin(2 * psi)
    A = np.eye(8)
    A[0:2, 0:2] = np.array([[c, s], [-s, c]])
    A[6:8, 6:8] = np.array([[c2, -s2], [s2, c2]])
    b = np.zeros(8)
    b[:3] = (x, y, z)
    return A, b


def to_ego(params: Tensor, pose_in_ego) -> Tensor:
    A, b = frame_map(pose_in_ego)
    return params @ A.astype(params.dtype) + b.astype(params.dtype)


def params_to_boxes(params: np.ndarray) -> np.ndarray:
    p = np.atleast_2d(np.asarray(params, dtype=np.float64))
    yaw = 0.5 * np.arctan2(p[:, 6], p[:, 7])
    return np.column_stack([p[:, :6], yaw])


def boxes_to_params(boxes: np.ndarray) -> np.ndarray:
    b = np.atleast_2d(np.asarray(boxes, dtype=np.float64)).reshape(-1, 7)
    return np.column_stack([b[:, :6], np.sin(2 * b[:, 6]), np.cos(2 * b[:, 6])])


def detections(logits: Tensor | np.ndarray, params: Tensor | np.ndarray, source=None) -> list[Detection]:
    lg = logits.data if isinstance(logits, Tensor) else np.asarray(logits)
    pr = params.data if isinstance(params, Tensor) else np.asarray(params)
    scores = 1.0 / (1.0 + np.exp(-lg.astype(np.float64)))
    boxes = params_to_boxes(pr)
    src = np.arange(len(lg)) if source is None else np.asarray(source)
    return [Detection(np.array([scores[i]]), boxes[i], int(src[i])) for i in range(len(lg))]


def hungarian_match(costs: np.ndarray) -> MatchAssignment:
    """Minimum-cost injective assignment of every row (ground truth) to a column (prediction)."""
    costs = np.asarray(costs, dtype=np.float64)
    if costs.ndim != 2:
        raise ValueError("cost matrix must be 2-D")
    g, p = costs.shape
    if g > p:
        raise ValueError(f"{g} ground truths cannot be matched to {p} predictions")
    if not np.all(np.isfinite(costs)):
        raise ValueError("cost matrix must be finite")
    if g == 0:
        return MatchAssignment(np.zeros(0, np.int64), np.zeros(0, np.int64), 0.0)
    rows, cols = linear_sum_assignment(costs)
    return MatchAssignment(rows.astype(np.int64), cols.astype(np.int64), float(costs[rows, cols].sum()))


def exhaustive_match(costs: np.ndarray) -> MatchAssignment:
    """Reference assignment by enumerating every injection; only for small problems."""
    costs = np.asarray(costs, dtype=np.float64)
    g, p = costs.shape
    best, best_cols = math.inf, None
    for cols in itertools.permutations(range(p), g):
        c = costs[np.arange(g), cols].sum()
        if c < best:
            best, best_cols = c, cols
    return MatchAssignment(np.arange(g), np.asarray(best_cols if best_cols else [], np.int64), float(best if g else 0.0))


def match_costs(logits: np.ndarray, params: np.ndarray, gt_params: np.ndarray, w: LossWeights) -> np.ndarray:
    scores = 1.0 / (1.0 + np.exp(-np.asarray(logits, dtype=np.float64)))
    l1 = np.abs(np.asarray(gt_params)[:, None, :] - np.asarray(params)[None, :, :]).sum(-1)
    return w.cls * (-scores)[None, :] + w.box * l1


def focal_loss(logits: Tensor, targets: np.ndarray, alpha: float = 0.25, gamma: float = 2.0) -> Tensor:
    """Summed binary focal loss."""
    t = np.asarray(targets, dtype=logits.dtype)
    log_p = ops.log_sigmoid(logits)
    log_not_p = ops.log_sigmoid(-logits)
    pos = ops.exp(log_not_p * gamma)  # (1 - p)^gamma
    neg = ops.exp(log_p * gamma)  # p^gamma
    loss = -(pos * log_p * (alpha * t)) - (neg * log_not_p * ((1 - alpha) * (1 - t)))
    return ops.sum(loss)


def set_loss(logits: Tensor, params: Tensor, gt_boxes: np.ndarray, weights: LossWeights = LossWeights()):
    """Hungarian-matched focal + L1 loss, normalised by the ground-truth count.

    Returns ``(loss, assignment)``; the assignment is a constant of the graph.
    """
    gt_params = boxes_to_params(gt_boxes) if len(gt_boxes) else np.zeros((0, 8))
    costs = match_costs(logits.data, params.data, gt_params, weights)
    assign = hungarian_match(costs)
    n_pred = logits.shape[0]
    targets = np.zeros(n_pred)
    targets[assign.pred_index] = 1.0
    norm = 1.0 / max(len(gt_params), 1)
    loss = focal_loss(logits, targets, weights.alpha, weights.gamma) * (weights.cls * norm)
    if len(assign):
        diff = params[assign.pred_index] - gt_params[assign.gt_index].astype(params.dtype)
        loss = loss + ops.sum(ops.abs(diff)) * (weights.box * norm)
    return loss, assign
