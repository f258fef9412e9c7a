"""Cross-agent query matching and masked aggregation.

Every query (ego and received) is refined with the positional embedding of
its ego-frame reference point, compared against queries of the other
agents by the sigmoid of their cosine similarity and fused with the
matches above the threshold by masked attention. The fused set is then
ranked by classification confidence and truncated.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .attention import MultiHeadAttention
from .autodiff import Module, Tensor
from .decoder import ObjectQuery, PositionalEmbedding

logger = logging.getLogger(__name__)

SIMILARITY_MIN = float(1.0 / (1.0 + np.exp(1.0)))
SIMILARITY_MAX = float(1.0 / (1.0 + np.exp(-1.0)))


@dataclass
class RefinedQuery:
    base: ObjectQuery  # reference point already in the ego frame
    refined_feature: np.ndarray


@dataclass
class SimilarityMatrix:
    values: np.ndarray  # (n_centers, n_candidates)
    mask: np.ndarray  # admissible (center, candidate) pairs


@dataclass
class ObjectQueryGraph:
    center: int
    members: np.ndarray  # candidate indices

    def __len__(self) -> int:
        return len(self.members)


def refine(features, ego_refs, pe: PositionalEmbedding) -> Tensor:
    """``q + PE(r)`` for a batch of queries with ego-frame reference points."""
    features = features if isinstance(features, Tensor) else Tensor(features)
    refs = ego_refs if isinstance(ego_refs, Tensor) else Tensor(np.asarray(ego_refs), dtype=features.dtype)
    return features + pe(refs)


def refine_query(q: ObjectQuery, ego_ref, pe: PositionalEmbedding) -> RefinedQuery:
    feat = refine(Tensor(q.feature[None]), np.asarray(ego_ref, dtype=np.float64)[None], pe).data[0]
    base = ObjectQuery(q.feature, np.asarray(ego_ref, dtype=np.float64), q.owner_agent)
    return RefinedQuery(base, feat)


def similarity(a: np.ndarray, b: np.ndarray | None = None) -> np.ndarray:
    """Sigmoid of pairwise cosine similarity; pairs with a zero vector score 0.5."""
    a = np.asarray(a, dtype=np.float64)
    b = a if b is None else np.asarray(b, dtype=np.float64)
    na = np.linalg.norm(a, axis=1)
    nb = np.linalg.norm(b, axis=1)
    denom = na[:, None] * nb[None, :]
    zero = denom == 0
    if zero.any():
        logger.debug("%d similarity pairs involve a zero-norm query", int(zero.sum()))
    cos = np.where(zero, 0.0, (a @ b.T) / np.where(zero, 1.0, denom))
    return 1.0 / (1.0 + np.exp(-np.clip(cos, -1.0, 1.0)))


def match(refined: np.ndarray, owners: np.ndarray, mu: float) -> tuple[SimilarityMatrix, list[ObjectQueryGraph]]:
    """Similarity of every query against every other, thresholded at ``mu``.

    A query is a candidate for a center iff it comes from a different agent
    and its similarity reaches ``mu``.
    """
    if not 0.0 < mu:
        raise ValueError(f"matching threshold must be positive, got {mu}")
    owners = np.asarray(owners)
    s = similarity(refined)
    mask = (owners[:, None] != owners[None, :]) & (s >= mu)
    graphs = [ObjectQueryGraph(i, np.flatnonzero(mask[i])) for i in range(len(owners))]
    return SimilarityMatrix(s, mask), graphs


class QueryAggregator(Module):
    """Masked multi-head attention of every center over its matched candidates.

    Refined queries form the attention queries and keys; raw query features
    are the values. The result is added to the center's raw feature, and
    centers without candidates are returned unchanged.
    """

    def __init__(self, dim: int, n_heads: int = 8, rng=None):
        self.attn = MultiHeadAttention(dim, n_heads, rng=rng)

    def forward(self, raw: Tensor, refined: Tensor, mask: np.ndarray | None) -> Tensor:
        update = self.attn(refined, refined, raw, mask)
        if mask is not None:
            has_member = mask.any(axis=1).astype(raw.dtype)[:, None]
            update = update * has_member
        return raw + update


def aggregate(graph: ObjectQueryGraph, raw: Tensor, refined: Tensor, aggregator: QueryAggregator) -> Tensor:
    """Fused feature of a single graph's center."""
    mask = np.zeros((1, raw.shape[0]), dtype=bool)
    mask[0, graph.members] = True
    center = graph.center
    upd = aggregator.attn(refined[center:center + 1], refined, raw, mask)
    if len(graph) == 0:
        return raw[center:center + 1]
    return raw[center:center + 1] + upd


def select_top(confidence: np.ndarray, owners: np.ndarray, index: np.ndarray, n: int) -> np.ndarray:
    """Positions of the ``n`` most confident fused queries.

    Ties break by (agent id, query index).
    """
    order = np.lexsort((np.asarray(index), np.asarray(owners), -np.asarray(confidence, dtype=np.float64)))
    return order[:n]
