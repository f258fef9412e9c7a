"""Scaled dot-product attention with boolean masks, plus the multi-head wrapper."""
from __future__ import annotations

import math

import numpy as np

from .autodiff import Linear, Module, Tensor, ops


def mask_attention(q: Tensor, k: Tensor, v: Tensor, mask: np.ndarray | None = None,
                   n_heads: int = 1) -> Tensor:
    """``softmax(mask(q k^T) / sqrt(d_k)) v`` per head.

    ``q`` is (Nq, D), ``k`` and ``v`` are (Nk, D); ``mask`` (Nq, Nk) marks the
    admissible pairs. Rows with nothing admissible produce zeros.
    """
    nq, dim = q.shape
    nk = k.shape[0]
    if dim % n_heads:
        raise ValueError(f"dimension {dim} not divisible by {n_heads} heads")
    d = dim // n_heads
    qh = ops.transpose(ops.reshape(q, (nq, n_heads, d)), (1, 0, 2))
    kh = ops.transpose(ops.reshape(k, (nk, n_heads, d)), (1, 2, 0))
    vh = ops.transpose(ops.reshape(v, (nk, n_heads, d)), (1, 0, 2))
    logits = ops.scale(ops.matmul(qh, kh), 1.0 / math.sqrt(d))
    weights = ops.softmax(logits, axis=-1, mask=None if mask is None else mask[None])
    out = ops.matmul(weights, vh)  # (H, Nq, d)
    return ops.reshape(ops.transpose(out, (1, 0, 2)), (nq, dim))


class MultiHeadAttention(Module):
    def __init__(self, dim: int, n_heads: int, rng=None):
        rng = np.random.default_rng(rng)
        self.n_heads = n_heads
        self.q_proj = Linear(dim, dim, rng=rng)
        self.k_proj = Linear(dim, dim, rng=rng)
        self.v_proj = Linear(dim, dim, rng=rng)
        self.out_proj = Linear(dim, dim, rng=rng)

    def forward(self, query: Tensor, key: Tensor, value: Tensor, mask=None) -> Tensor:
        out = mask_attention(self.q_proj(query), self.k_proj(key), self.v_proj(value),
                             mask, self.n_heads)
        return self.out_proj(out)
