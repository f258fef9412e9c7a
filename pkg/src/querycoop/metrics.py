"""Rotated BEV IoU, rotated NMS and all-point average precision."""
from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .geometry import box_corners_bev, clip_polygon, polygon_area

logger = logging.getLogger(__name__)

IOU_THRESHOLDS = (0.3, 0.5, 0.7)
_EPS_AREA = 1e-9


def rotated_iou_bev(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    area_a = a[3] * a[4]
    area_b = b[3] * b[4]
    if area_a < _EPS_AREA or area_b < _EPS_AREA:
        logger.warning("degenerate box in IoU; returning 0")
        return 0.0
    ra = 0.5 * np.hypot(a[3], a[4])
    rb = 0.5 * np.hypot(b[3], b[4])
    if np.hypot(a[0] - b[0], a[1] - b[1]) >= ra + rb:
        return 0.0
    inter = polygon_area(clip_polygon(box_corners_bev(a), box_corners_bev(b)))
    inter = max(inter, 0.0)
    return float(min(inter / (area_a + area_b - inter), 1.0))


def iou_matrix(dets: np.ndarray, gts: np.ndarray) -> np.ndarray:
    out = np.zeros((len(dets), len(gts)))
    for i, d in enumerate(dets):
        for j, g in enumerate(gts):
            out[i, j] = rotated_iou_bev(d, g)
    return out


def rotated_nms(boxes: np.ndarray, scores: np.ndarray, iou_thresh: float = 0.5) -> np.ndarray:
    """Indices of kept boxes in descending score order."""
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 7)
    order = np.argsort(-np.asarray(scores), kind="stable")
    keep: list[int] = []
    for i in order:
        if all(rotated_iou_bev(boxes[i], boxes[k]) <= iou_thresh for k in keep):
            keep.append(int(i))
    return np.asarray(keep, dtype=np.int64)


@dataclass
class FrameResult:
    """Detections and ground truth of one evaluated frame, in the same frame."""

    boxes: np.ndarray
    scores: np.ndarray
    gt_boxes: np.ndarray


@dataclass
class EvalRecord:
    iou_thresh: float
    ap: float
    precision: np.ndarray
    recall: np.ndarray
    n_gt: int
    n_det: int
    iou: list = field(default_factory=list)  # per-frame IoU matrices


def _assign(frames: list[FrameResult], iou_thresh: float):
    """Greedy-by-score TP flags across all frames."""
    entries = []
    ious = []
    for f, fr in enumerate(frames):
        m = iou_matrix(np.asarray(fr.boxes).reshape(-1, 7), np.asarray(fr.gt_boxes).reshape(-1, 7))
        ious.append(m)
        for i, s in enumerate(np.asarray(fr.scores).reshape(-1)):
            entries.append((-float(s), f, i))
    entries.sort()
    claimed = [np.zeros(len(np.asarray(fr.gt_boxes).reshape(-1, 7)), bool) for fr in frames]
    tp = np.zeros(len(entries), bool)
    for k, (_, f, i) in enumerate(entries):
        m = ious[f]
        if m.shape[1] == 0:
            continue
        cand = np.where(claimed[f], -1.0, m[i])
        j = int(np.argmax(cand))
        if cand[j] >= iou_thresh:
            claimed[f][j] = True
            tp[k] = True
    scores = np.array([-e[0] for e in entries])
    return tp, scores, ious


def pr_curve(tp: np.ndarray, n_gt: int) -> tuple[np.ndarray, np.ndarray]:
    ctp = np.cumsum(tp)
    cfp = np.cumsum(~tp)
    recall = ctp / max(n_gt, 1)
    precision = ctp / np.maximum(ctp + cfp, 1)
    return precision, recall


def ap_from_pr(precision: np.ndarray, recall: np.ndarray) -> float:
    """All-point interpolation: area under the monotone envelope of the PR curve."""
    mrec = np.concatenate([[0.0], recall, [1.0]])
    mpre = np.concatenate([[0.0], precision, [0.0]])
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    idx = np.flatnonzero(mrec[1:] != mrec[:-1])
    return float(np.sum((mrec[idx + 1] - mrec[idx]) * mpre[idx + 1]))


def evaluate(frames: list[FrameResult], iou_thresh: float) -> EvalRecord:
    n_gt = int(sum(len(np.asarray(f.gt_boxes).reshape(-1, 7)) for f in frames))
    tp, scores, ious = _assign(frames, iou_thresh)
    n_det = len(tp)
    precision, recall = pr_curve(tp, n_gt)
    if n_gt == 0:
        if n_det == 0:
            logger.info("no ground truth and no detections; AP defined as 1")
        ap = 1.0 if n_det == 0 else 0.0
    else:
        ap = ap_from_pr(precision, recall) if n_det else 0.0
    return EvalRecord(iou_thresh, ap, precision, recall, n_gt, n_det, ious)


def average_precision(frames: list[FrameResult] | FrameResult, iou_thresh: float = 0.5) -> float:
    if isinstance(frames, FrameResult):
        frames = [frames]
    return evaluate(frames, iou_thresh).ap


def ap_table(frames: list[FrameResult], thresholds=IOU_THRESHOLDS) -> dict[str, float]:
    return {f"ap@{t}": evaluate(frames, t).ap for t in thresholds}


def write_ap_csv(path, rows: list[dict]) -> None:
    path = Path(path)
    keys = list(dict.fromkeys(k for r in rows for k in r))
    with path.open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=keys)
        w.writeheader()
        w.writerows(rows)


def write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, default=_jsonable))


def _jsonable(x):
    if isinstance(x, np.ndarray):
        return x.tolist()
    if isinstance(x, (np.floating, np.integer)):
        return x.item()
    raise TypeError(f"cannot serialise {type(x)}")
