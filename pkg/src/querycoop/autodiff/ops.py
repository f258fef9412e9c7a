"""Differentiable operations over :class:`Tensor`.

Each op computes its forward value with numpy and registers a closure that
maps the output gradient to input gradients. Broadcasting follows numpy for
the elementwise ops; gradients are summed back to the input shape.
"""
from __future__ import annotations


import numpy as np

from .tensor import Tensor, as_tensor, make_result


class DimensionError(ValueError):
    """Operand shapes are incompatible for the requested op."""


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _const(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return as_tensor(np.asarray(x, dtype=like.dtype))


def _pair(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor):
        return a, _const(b, a)
    b = as_tensor(b)
    return _const(a, b), b


def _check_broadcast(a: Tensor, b: Tensor) -> tuple:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise DimensionError(f"cannot broadcast {a.shape} with {b.shape}") from exc


# --------------------------------------------------------------------------
# elementwise arithmetic

def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast(a, b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return make_result(a.data + b.data, (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast(a, b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return make_result(a.data - b.data, (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast(a, b)

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return make_result(a.data * b.data, (a, b), bw)


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast(a, b)
    out = a.data / b.data

    def bw(g):
        return (
            _unbroadcast(g / b.data, a.shape),
            _unbroadcast(-g * out / b.data, b.shape),
        )

    return make_result(out, (a, b), bw)


def neg(x: Tensor) -> Tensor:
    return make_result(-x.data, (x,), lambda g: (-g,))


def scale(x: Tensor, factor: float) -> Tensor:
    factor = x.dtype.type(factor)
    return make_result(x.data * factor, (x,), lambda g: (g * factor,))


def square(x: Tensor) -> Tensor:
    return make_result(x.data * x.data, (x,), lambda g: (2.0 * g * x.data,))


def sqrt(x: Tensor) -> Tensor:
    out = np.sqrt(x.data)
    return make_result(out, (x,), lambda g: (g * 0.5 / out,))


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return make_result(out, (x,), lambda g: (g * out,))


def log(x: Tensor) -> Tensor:
    return make_result(np.log(x.data), (x,), lambda g: (g / x.data,))


def abs(x: Tensor) -> Tensor:
    return make_result(np.abs(x.data), (x,), lambda g: (g * np.sign(x.data),))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return make_result(x.data * mask, (x,), lambda g: (g * mask,))


def sigmoid(x: Tensor) -> Tensor:
    out = _sigmoid(x.data)
    return make_result(out, (x,), lambda g: (g * out * (1.0 - out),))


def _sigmoid(z: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def log_sigmoid(x: Tensor) -> Tensor:
    z = x.data
    out = np.minimum(z, 0) - np.log1p(np.exp(-np.abs(z)))
    return make_result(out, (x,), lambda g: (g * (1.0 - _sigmoid(z)),))


def softplus(x: Tensor) -> Tensor:
    z = x.data
    out = np.maximum(z, 0) + np.log1p(np.exp(-np.abs(z)))
    return make_result(out, (x,), lambda g: (g * _sigmoid(z),))


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)
    return make_result(out, (x,), lambda g: (g * (1.0 - out * out),))


def sin(x: Tensor) -> Tensor:
    return make_result(np.sin(x.data), (x,), lambda g: (g * np.cos(x.data),))


def cos(x: Tensor) -> Tensor:
    return make_result(np.cos(x.data), (x,), lambda g: (-g * np.sin(x.data),))


def sin_cos(x: Tensor) -> Tensor:
    """``[sin(x), cos(x)]`` concatenated along the last axis."""
    s, c = np.sin(x.data), np.cos(x.data)
    n = x.shape[-1]

    def bw(g):
        return (g[..., :n] * c - g[..., n:] * s,)

    return make_result(np.concatenate([s, c], axis=-1), (x,), bw)


def maximum(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast(a, b)
    pick_a = a.data >= b.data

    def bw(g):
        return _unbroadcast(g * pick_a, a.shape), _unbroadcast(g * ~pick_a, b.shape)

    return make_result(np.where(pick_a, a.data, b.data), (a, b), bw)


# --------------------------------------------------------------------------
# reductions and shape manipulation

def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, x.ndim)
    out = x.data.sum(axis=axes, keepdims=keepdims)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, x.shape).copy(),)

    return make_result(np.asarray(out, dtype=x.dtype), (x,), bw)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, x.ndim)
    n = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    return scale(sum(x, axis=axis, keepdims=keepdims), 1.0 / max(n, 1))


def reshape(x: Tensor, shape) -> Tensor:
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(str(exc)) from exc
    return make_result(out, (x,), lambda g: (g.reshape(x.shape),))


def transpose(x: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    inv = np.argsort(axes)
    return make_result(x.data.transpose(axes), (x,), lambda g: (g.transpose(inv),))


def index(x: Tensor, idx) -> Tensor:
    if isinstance(idx, Tensor):
        idx = idx.data.astype(np.int64)
    out = x.data[idx]
    basic = _is_basic_index(idx)

    def bw(g):
        full = np.zeros_like(x.data)
        if basic:
            full[idx] += g
        else:
            np.add.at(full, idx, g)
        return (full,)

    return make_result(np.array(out, copy=True), (x,), bw)


def _is_basic_index(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(i, (int, slice, type(None), type(Ellipsis))) for i in items)


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise DimensionError(str(exc)) from exc
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=axis))

    return make_result(out, tuple(tensors), bw)


def stack(tensors, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.stack([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise DimensionError(str(exc)) from exc

    def bw(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return make_result(out, tuple(tensors), bw)


def pad2d(x: Tensor, pad: int) -> Tensor:
    """Zero-pad the last two axes."""
    width = [(0, 0)] * (x.ndim - 2) + [(pad, pad), (pad, pad)]
    out = np.pad(x.data, width)
    sl = (Ellipsis, slice(pad, pad + x.shape[-2]), slice(pad, pad + x.shape[-1]))
    return make_result(out, (x,), lambda g: (g[sl].copy(),))


# --------------------------------------------------------------------------
# linear algebra

def matmul(a, b) -> Tensor:
    a, b = _pair(a, b)
    if a.ndim < 1 or b.ndim < 1 or a.shape[-1] != b.shape[-2 if b.ndim > 1 else 0]:
        raise DimensionError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    out = np.matmul(a.data, b.data)

    def bw(g):
        ad, bd = a.data, b.data
        if ad.ndim == 1:
            ad = ad[None, :]
            g2 = g[..., None, :]
        else:
            g2 = g
        if bd.ndim == 1:
            bd = bd[:, None]
            g2 = g2[..., None]
        ga = np.matmul(g2, np.swapaxes(bd, -1, -2))
        gb = np.matmul(np.swapaxes(ad, -1, -2), g2)
        if a.ndim == 1:
            ga = ga[..., 0, :]
        if b.ndim == 1:
            gb = gb[..., 0]
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return make_result(out, (a, b), bw)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight + bias`` with ``weight`` shaped (in, out)."""
    out = matmul(x, weight)
    return out if bias is None else add(out, bias)


# --------------------------------------------------------------------------
# normalisation and attention primitives

def softmax(x: Tensor, axis: int = -1, mask: np.ndarray | None = None) -> Tensor:
    """Numerically stable softmax.

    ``mask`` (boolean, broadcastable to ``x``) marks admissible entries; the
    others get weight exactly zero, which is the same as a ``-inf`` logit.
    A slice with no admissible entry yields all zeros instead of NaN. NaN in
    the input propagates to the whole slice.
    """
    z = x.data
    if mask is not None:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), z.shape)
        z = np.where(mask, z, -np.inf)
    zmax = np.max(z, axis=axis, keepdims=True)
    zmax = np.where(np.isfinite(zmax), zmax, 0.0)
    e = np.exp(z - zmax)
    denom = e.sum(axis=axis, keepdims=True)
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.where(denom > 0, e / np.where(denom > 0, denom, 1.0), 0.0)
    out = out.astype(x.dtype, copy=False)
    if np.isnan(x.data).any():
        nan_rows = np.isnan(x.data).any(axis=axis, keepdims=True)
        out = np.where(nan_rows, np.nan, out).astype(x.dtype, copy=False)

    def bw(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return (out * (g - dot),)

    return make_result(out, (x,), bw)


def layer_norm(x: Tensor, axis: int = -1, eps: float = 1e-5) -> Tensor:
    """Normalise to zero mean / unit variance along ``axis`` (no affine)."""
    mu = x.data.mean(axis=axis, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=axis, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    n = x.shape[axis]

    def bw(g):
        gm = g.mean(axis=axis, keepdims=True)
        gx = (g * xhat).mean(axis=axis, keepdims=True)
        return (inv * (g - gm - xhat * gx),)

    return make_result(xhat.astype(x.dtype, copy=False), (x,), bw) if n else x


# --------------------------------------------------------------------------
# spatial ops

def _bilinear_corners(loc: np.ndarray, H: int, W: int):
    px = loc[..., 0] * (W - 1)
    py = loc[..., 1] * (H - 1)
    x0 = np.floor(px)
    y0 = np.floor(py)
    fx = px - x0
    fy = py - y0
    x0 = x0.astype(np.int64)
    y0 = y0.astype(np.int64)
    corners = []
    for dy, dx in ((0, 0), (0, 1), (1, 0), (1, 1)):
        xi, yi = x0 + dx, y0 + dy
        wx = fx if dx else 1.0 - fx
        wy = fy if dy else 1.0 - fy
        valid = (xi >= 0) & (xi < W) & (yi >= 0) & (yi < H)
        # d(weight)/d(px), d(weight)/d(py)
        dwx = (1.0 if dx else -1.0) * wy
        dwy = (1.0 if dy else -1.0) * wx
        corners.append((np.clip(yi, 0, H - 1), np.clip(xi, 0, W - 1), wx * wy * valid,
                        dwx * valid, dwy * valid))
    return corners


def bilinear_sample(feature_map: Tensor, loc) -> Tensor:
    """Sample a ``C x H x W`` map at normalised locations.

    ``loc[..., 0]`` is the horizontal coordinate u and ``loc[..., 1]`` the
    vertical v, both in [0, 1] with align-corners semantics: (u, v) lands on
    pixel (u * (W - 1), v * (H - 1)). Neighbours outside the map count as
    zero, so a sample far outside returns zeros. Output shape is
    ``loc.shape[:-1] + (C,)``. Differentiable in both the map and ``loc``.
    """
    fmap = as_tensor(feature_map)
    loc = as_tensor(loc, dtype=fmap.dtype)
    if fmap.ndim != 3:
        raise DimensionError(f"feature map must be C x H x W, got {fmap.shape}")
    if loc.shape[-1] != 2:
        raise DimensionError(f"locations must end in a pair, got {loc.shape}")
    C, H, W = fmap.shape
    flat_loc = loc.data.reshape(-1, 2)
    hwc = fmap.data.transpose(1, 2, 0)
    corners = _bilinear_corners(flat_loc, H, W)
    out = np.zeros((flat_loc.shape[0], C), dtype=fmap.dtype)
    for yi, xi, w, _, _ in corners:
        out += hwc[yi, xi] * w[:, None]

    def bw(g):
        g = g.reshape(-1, C)
        gmap = None
        if fmap.requires_grad:
            acc = np.zeros((H * W, C), dtype=fmap.dtype)
            for yi, xi, w, _, _ in corners:
                np.add.at(acc, yi * W + xi, g * w[:, None])
            gmap = acc.reshape(H, W, C).transpose(2, 0, 1).copy()
        gloc = None
        if loc.requires_grad:
            gpx = np.zeros(flat_loc.shape[0], dtype=fmap.dtype)
            gpy = np.zeros_like(gpx)
            for yi, xi, _, dwx, dwy in corners:
                dot = (hwc[yi, xi] * g).sum(axis=1)
                gpx += dot * dwx
                gpy += dot * dwy
            gloc = np.stack([gpx * (W - 1), gpy * (H - 1)], axis=1).reshape(loc.shape)
        return gmap, gloc

    return make_result(out.reshape(loc.shape[:-1] + (C,)), (fmap, loc), bw)


def conv2d(x: Tensor, weight: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation of a ``C x H x W`` input with ``O x C x k x k`` weights."""
    if x.ndim != 3 or weight.ndim != 4 or weight.shape[1] != x.shape[0]:
        raise DimensionError(f"conv2d shapes incompatible: {x.shape} * {weight.shape}")
    C, H, W = x.shape
    O, _, k, _ = weight.shape
    xp = np.pad(x.data, ((0, 0), (padding, padding), (padding, padding))) if padding else x.data
    Ho = (H + 2 * padding - k) // stride + 1
    Wo = (W + 2 * padding - k) // stride + 1
    cols = np.empty((C, k, k, Ho, Wo), dtype=x.dtype)
    for ky in range(k):
        for kx in range(k):
            cols[:, ky, kx] = xp[:, ky:ky + stride * Ho:stride, kx:kx + stride * Wo:stride]
    cols2 = cols.reshape(C * k * k, Ho * Wo)
    w2 = weight.data.reshape(O, C * k * k)
    out = (w2 @ cols2).reshape(O, Ho, Wo)

    def bw(g):
        g2 = g.reshape(O, Ho * Wo)
        gw = (g2 @ cols2.T).reshape(weight.shape) if weight.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = (w2.T @ g2).reshape(C, k, k, Ho, Wo)
            gxp = np.zeros_like(xp)
            for ky in range(k):
                for kx in range(k):
                    gxp[:, ky:ky + stride * Ho:stride, kx:kx + stride * Wo:stride] += gcols[:, ky, kx]
            gx = gxp[:, padding:padding + H, padding:padding + W].copy() if padding else gxp
        return gx, gw

    return make_result(out, (x, weight), bw)


def upsample2x(x: Tensor, out_hw: tuple[int, int]) -> Tensor:
    """Nearest-neighbour 2x upsampling of the last two axes, cropped to ``out_hw``."""
    H, W = out_hw
    if (x.shape[-2] * 2 < H) or (x.shape[-1] * 2 < W):
        raise DimensionError(f"cannot upsample {x.shape} to {out_hw}")
    up = x.data.repeat(2, axis=-2).repeat(2, axis=-1)[..., :H, :W]

    def bw(g):
        full = np.zeros(x.shape[:-2] + (x.shape[-2] * 2, x.shape[-1] * 2), dtype=g.dtype)
        full[..., :H, :W] = g
        s = full.reshape(x.shape[:-2] + (x.shape[-2], 2, x.shape[-1], 2)).sum(axis=(-3, -1))
        return (s,)

    return make_result(np.ascontiguousarray(up), (x,), bw)


def segment_max(x: Tensor, segment_ids: np.ndarray, n_segments: int) -> Tensor:
    """Row-wise max of ``x`` (rows x C) within each segment; empty segments give 0."""
    segment_ids = np.asarray(segment_ids, dtype=np.int64)
    C = x.shape[1]
    out = np.full((n_segments, C), -np.inf, dtype=x.dtype)
    np.maximum.at(out, segment_ids, x.data)
    out[np.isinf(out)] = 0.0
    # winner row per (segment, channel); ties resolve to the first row
    winners = np.full((n_segments, C), -1, dtype=np.int64)
    hit = x.data == out[segment_ids]
    rows = np.arange(x.shape[0])
    for c in range(C):
        r = rows[hit[:, c]][::-1]
        winners[segment_ids[r], c] = r

    def bw(g):
        gx = np.zeros_like(x.data)
        seg, ch = np.nonzero(winners >= 0)
        gx[winners[seg, ch], ch] = g[seg, ch]
        return (gx,)

    return make_result(out, (x,), bw)


def scatter_rows(x: Tensor, rows: np.ndarray, n_rows: int) -> Tensor:
    """Place row ``i`` of ``x`` at output row ``rows[i]``; untouched rows are zero."""
    rows = np.asarray(rows, dtype=np.int64)
    out = np.zeros((n_rows,) + x.shape[1:], dtype=x.dtype)
    out[rows] = x.data
    return make_result(out, (x,), lambda g: (g[rows].copy(),))


def detach(x: Tensor) -> Tensor:
    return x.detach()


__all__ = [name for name in dir() if not name.startswith("_") and name != "np"]
