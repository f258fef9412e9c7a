"""AdamW with decoupled weight decay and a warm-up + cosine schedule."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor

logger = logging.getLogger(__name__)


@dataclass
class AdamState:
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


def sgd_adamw_step(
    params: list[np.ndarray],
    grads: list[np.ndarray | None],
    lr: float,
    weight_decay: float,
    state: AdamState,
    betas: tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
) -> bool:
    """One in-place AdamW update of ``params``.

    Returns False, leaving params and moments untouched, when any gradient is
    non-finite. ``None`` gradients are treated as zero.
    """
    if len(params) != len(grads):
        raise ValueError("params and grads differ in length")
    for p, g in zip(params, grads):
        if g is not None and g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {p.shape}")
    if any(g is not None and not np.all(np.isfinite(g)) for g in grads):
        logger.warning("non-finite gradient at step %d; update skipped", state.step + 1)
        return False
    if not state.m:
        state.m = [np.zeros_like(p) for p in params]
        state.v = [np.zeros_like(p) for p in params]
    b1, b2 = betas
    state.step += 1
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g is None:
            g = np.zeros_like(p)
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        if weight_decay:
            p *= 1.0 - lr * weight_decay
        p -= (lr * (m / c1) / (np.sqrt(v / c2) + eps)).astype(p.dtype, copy=False)
    return True


class AdamW:
    def __init__(self, params: list[Tensor], lr: float = 2e-4, weight_decay: float = 1e-2,
                 betas=(0.9, 0.999), eps: float = 1e-8, max_grad_norm: float | None = None):
        self.params = list(params)
        self.lr = lr
        self.weight_decay = weight_decay
        self.betas = betas
        self.eps = eps
        self.max_grad_norm = max_grad_norm
        self.state = AdamState()
        self.skipped = 0

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def grad_norm(self) -> float:
        return math.sqrt(sum(float((p.grad.astype(np.float64) ** 2).sum())
                             for p in self.params if p.grad is not None))

    def step(self) -> bool:
        grads = [p.grad for p in self.params]
        if self.max_grad_norm is not None:
            norm = self.grad_norm()
            if np.isfinite(norm) and norm > self.max_grad_norm:
                factor = self.max_grad_norm / (norm + 1e-12)
                grads = [None if g is None else g * factor for g in grads]
        ok = sgd_adamw_step([p.data for p in self.params], grads, self.lr, self.weight_decay,
                            self.state, self.betas, self.eps)
        if not ok:
            self.skipped += 1
        return ok


def warmup_cosine(step: int, total: int, base_lr: float, warmup: int, warmup_lr: float,
                  min_lr: float = 0.0) -> float:
    """Linear warm-up from ``warmup_lr`` to ``base_lr``, then cosine decay to ``min_lr``."""
    if warmup > 0 and step < warmup:
        return warmup_lr + (base_lr - warmup_lr) * step / warmup
    span = max(total - warmup, 1)
    t = min(max(step - warmup, 0), span) / span
    return min_lr + 0.5 * (base_lr - min_lr) * (1.0 + math.cos(math.pi * t))
