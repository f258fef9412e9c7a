"""Planar geometry shared by scene synthesis and evaluation.

Boxes are 7-vectors ``(x, y, z, l, w, h, yaw)``; ``l`` runs along the
heading. All polygons are counter-clockwise.
"""
from __future__ import annotations

import math

import numpy as np


def wrap_angle(a):
    """Wrap to (-pi, pi]."""
    out = np.mod(np.asarray(a, dtype=np.float64) + np.pi, 2 * np.pi) - np.pi
    out = np.where(out == -np.pi, np.pi, out)
    return float(out) if np.ndim(out) == 0 else out


def rotation(yaw: float) -> np.ndarray:
    c, s = math.cos(yaw), math.sin(yaw)
    return np.array([[c, -s], [s, c]])


def box_corners_bev(box) -> np.ndarray:
    """Four BEV corners (4 x 2), counter-clockwise."""
    x, y, _, l, w, _, yaw = (float(v) for v in box[:7])
    # front-left, rear-left, rear-right, front-right
    local = np.array([[l, w], [-l, w], [-l, -w], [l, -w]]) * 0.5
    return local @ rotation(yaw).T + np.array([x, y])


def polygon_area(poly: np.ndarray) -> float:
    """Shoelace area (positive for counter-clockwise)."""
    if len(poly) < 3:
        return 0.0
    x, y = poly[:, 0], poly[:, 1]
    return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1)))


def clip_polygon(subject: np.ndarray, clipper: np.ndarray) -> np.ndarray:
    """Sutherland-Hodgman clip of ``subject`` by the convex ccw polygon ``clipper``."""
    out = [tuple(p) for p in subject]
    n = len(clipper)
    for i in range(n):
        if not out:
            break
        ax, ay = clipper[i]
        bx, by = clipper[(i + 1) % n]
        ex, ey = bx - ax, by - ay

        def side(p):
            return ex * (p[1] - ay) - ey * (p[0] - ax)

        inp = out
        out = []
        prev = inp[-1]
        sp = side(prev)
        for cur in inp:
            sc = side(cur)
            if sc >= 0:
                if sp < 0:
                    out.append(_intersect(prev, cur, sp, sc))
                out.append(cur)
            elif sp >= 0:
                out.append(_intersect(prev, cur, sp, sc))
            prev, sp = cur, sc
    return np.array(out, dtype=np.float64).reshape(-1, 2)


def _intersect(p, q, sp, sq):
    t = sp / (sp - sq)
    return (p[0] + t * (q[0] - p[0]), p[1] + t * (q[1] - p[1]))


def boxes_overlap_bev(a, b, margin: float = 0.0) -> bool:
    """Separating-axis test on BEV footprints grown by ``margin`` on every side."""
    a = np.array(a, dtype=np.float64)
    b = np.array(b, dtype=np.float64)
    a[3:5] += 2 * margin
    b[3:5] += 2 * margin
    ca, cb = box_corners_bev(a), box_corners_bev(b)
    for poly in (ca, cb):
        for i in range(4):
            edge = poly[(i + 1) % 4] - poly[i]
            axis = np.array([-edge[1], edge[0]])
            pa, pb = ca @ axis, cb @ axis
            if pa.max() < pb.min() or pb.max() < pa.min():
                return False
    return True


def box_edges(boxes: np.ndarray) -> np.ndarray:
    """Edge segments of all box footprints: (n_boxes, 4, 2, 2)."""
    edges = np.zeros((len(boxes), 4, 2, 2))
    for i, box in enumerate(boxes):
        c = box_corners_bev(box)
        edges[i, :, 0] = c
        edges[i, :, 1] = np.roll(c, -1, axis=0)
    return edges


def cast_rays(origin: np.ndarray, angles: np.ndarray, boxes: np.ndarray, max_range: float):
    """Nearest hit of each planar ray against the box footprints.

    Returns ``(distance, box_index)``; rays that hit nothing within
    ``max_range`` get ``inf`` and -1.
    """
    n = len(angles)
    dist = np.full(n, np.inf)
    hit = np.full(n, -1, dtype=np.int64)
    if len(boxes) == 0:
        return dist, hit
    d = np.stack([np.cos(angles), np.sin(angles)], axis=1)  # (R, 2)
    edges = box_edges(boxes)  # (B, 4, 2, 2)
    p0 = edges[:, :, 0].reshape(-1, 2) - origin  # (E, 2)
    seg = (edges[:, :, 1] - edges[:, :, 0]).reshape(-1, 2)
    owner = np.repeat(np.arange(len(boxes)), 4)
    # origin + t d = p0 + s seg  ->  solve for t, s
    denom = d[:, 0:1] * seg[None, :, 1] - d[:, 1:2] * seg[None, :, 0]  # (R, E)
    with np.errstate(divide="ignore", invalid="ignore"):
        t = (p0[None, :, 0] * seg[None, :, 1] - p0[None, :, 1] * seg[None, :, 0]) / denom
        s = (p0[None, :, 0] * d[:, 1:2] - p0[None, :, 1] * d[:, 0:1]) / denom
    valid = (np.abs(denom) > 1e-12) & (t > 1e-9) & (s >= 0) & (s <= 1) & (t <= max_range)
    t = np.where(valid, t, np.inf)
    best = np.argmin(t, axis=1)
    dist = t[np.arange(n), best]
    hit = np.where(np.isfinite(dist), owner[best], -1)
    return dist, hit


def segment_hits_box_interior(p: np.ndarray, q: np.ndarray, box, eps: float = 1e-6) -> bool:
    """True when the open segment p->q passes strictly through the box footprint.

    The footprint is shrunk by ``eps`` so touching the boundary (a surface
    return) does not count.
    """
    b = np.array(box, dtype=np.float64)
    b[3:5] -= 2 * eps
    if b[3] <= 0 or b[4] <= 0:
        return False
    c = box_corners_bev(b)
    # clip the segment against each half-plane (Cyrus-Beck)
    t0, t1 = 0.0, 1.0
    d = q - p
    for i in range(4):
        a_, b_ = c[i], c[(i + 1) % 4]
        edge = b_ - a_
        normal = np.array([edge[1], -edge[0]])  # outward for ccw polygon
        num = float(np.dot(normal, a_ - p))
        den = float(np.dot(normal, d))
        if abs(den) < 1e-15:
            if num < 0:
                return False
            continue
        t = num / den
        if den < 0:
            t0 = max(t0, t)
        else:
            t1 = min(t1, t)
        if t0 > t1:
            return False
    return t1 - t0 > 1e-9 and t0 < 1.0 - 1e-9 and t1 > 1e-9
