import numpy as np
import pytest

from querycoop.metrics import (
    FrameResult,
    ap_from_pr,
    ap_table,
    average_precision,
    evaluate,
    rotated_iou_bev,
    rotated_nms,
)
from querycoop.scene import AgentPose, transform_boxes, WORLD
from tests.oracles import raster_iou


def _box(x, y, l, w, yaw=0.0):
    return np.array([x, y, 0.0, l, w, 1.5, yaw])


class TestRotatedIoU:
    def test_identical(self):
        assert rotated_iou_bev(_box(1, 2, 4, 2, 0.3), _box(1, 2, 4, 2, 0.3)) == pytest.approx(1.0, abs=1e-12)

    def test_disjoint(self):
        assert rotated_iou_bev(_box(0, 0, 2, 2), _box(10, 0, 2, 2)) == 0.0

    def test_half_overlap(self):
        assert rotated_iou_bev(_box(0, 0, 2, 2), _box(1, 0, 2, 2)) == pytest.approx(1 / 3, abs=1e-12)

    def test_against_rasterisation(self):
        rng = np.random.default_rng(0)
        for _ in range(30):
            a = _box(*rng.uniform(-1, 1, 2), *rng.uniform(1, 5, 2), rng.uniform(-np.pi, np.pi))
            b = _box(*rng.uniform(-1, 1, 2), *rng.uniform(1, 5, 2), rng.uniform(-np.pi, np.pi))
            assert abs(rotated_iou_bev(a, b) - raster_iou(a, b)) < 5e-3

    def test_symmetric_and_rigid_invariant(self):
        rng = np.random.default_rng(1)
        for _ in range(20):
            a = _box(*rng.uniform(-2, 2, 2), *rng.uniform(1, 5, 2), rng.uniform(-3, 3))
            b = _box(*rng.uniform(-2, 2, 2), *rng.uniform(1, 5, 2), rng.uniform(-3, 3))
            assert abs(rotated_iou_bev(a, b) - rotated_iou_bev(b, a)) < 1e-9
            pose = AgentPose(*rng.uniform(-20, 20, 2), 0.0, rng.uniform(-3, 3))
            ma, mb = transform_boxes(np.stack([a, b]), pose, WORLD)
            assert abs(rotated_iou_bev(ma, mb) - rotated_iou_bev(a, b)) < 1e-6

    def test_degenerate(self):
        assert rotated_iou_bev(_box(0, 0, 0.0, 2), _box(0, 0, 2, 2)) == 0.0


class TestAveragePrecision:
    def test_perfect(self):
        gt = np.stack([_box(0, 0, 4, 2), _box(10, 0, 4, 2)])
        assert average_precision(FrameResult(gt, np.array([0.9, 0.8]), gt), 0.5) == 1.0

    def test_all_below_threshold(self):
        gt = np.stack([_box(0, 0, 4, 2)])
        det = np.stack([_box(3.5, 0, 4, 2)])
        assert average_precision(FrameResult(det, np.array([0.9]), gt), 0.5) == 0.0

    def test_hand_enumerated(self):
        gt = np.stack([_box(0, 0, 4, 2), _box(10, 0, 4, 2), _box(20, 0, 4, 2)])
        det = np.stack([_box(0, 0, 4, 2), _box(50, 0, 4, 2), _box(10, 0, 4, 2), _box(20, 0, 4, 2)])
        scores = np.array([0.9, 0.8, 0.7, 0.6])
        # sweep: TP, FP, TP, TP -> precision 1, 1/2, 2/3, 3/4 at recall 1/3, 1/3, 2/3, 1
        # envelope: 1 on (0, 1/3], 3/4 on (1/3, 1]
        expected = 1 / 3 * 1.0 + 2 / 3 * 0.75
        rec = evaluate([FrameResult(det, scores, gt)], 0.5)
        assert rec.ap == pytest.approx(expected, abs=1e-12)
        np.testing.assert_allclose(rec.recall, [1 / 3, 1 / 3, 2 / 3, 1.0])
        assert np.all(np.diff(rec.recall) >= 0)

    def test_duplicate_is_false_positive(self):
        gt = np.stack([_box(0, 0, 4, 2)])
        det = np.stack([_box(0, 0, 4, 2), _box(0.1, 0, 4, 2)])
        rec = evaluate([FrameResult(det, np.array([0.9, 0.8]), gt)], 0.5)
        np.testing.assert_allclose(rec.precision, [1.0, 0.5])
        assert rec.ap == 1.0

    def test_empty_conventions(self):
        empty = np.zeros((0, 7))
        assert average_precision(FrameResult(empty, np.zeros(0), empty)) == 1.0
        assert average_precision(FrameResult(np.stack([_box(0, 0, 1, 1)]), np.array([0.5]), empty)) == 0.0

    def test_raising_a_tp_never_lowers_ap(self):
        rng = np.random.default_rng(3)
        gt = np.stack([_box(10 * i, 0, 4, 2) for i in range(5)])
        det = np.concatenate([gt[:4], np.stack([_box(100 + 10 * i, 0, 4, 2) for i in range(4)])])
        scores = rng.uniform(size=8)
        base = average_precision(FrameResult(det, scores, gt))
        for i in range(4):
            better = scores.copy()
            better[i] = min(1.0, better[i] + 0.3)
            assert average_precision(FrameResult(det, better, gt)) >= base - 1e-12

    def test_multiple_frames_and_table(self):
        gt = np.stack([_box(0, 0, 4, 2)])
        frames = [FrameResult(gt, np.array([0.9]), gt), FrameResult(np.zeros((0, 7)), np.zeros(0), gt)]
        table = ap_table(frames)
        assert set(table) == {"ap@0.3", "ap@0.5", "ap@0.7"}
        assert table["ap@0.5"] == pytest.approx(0.5)

    def test_ap_from_pr_monotone_envelope(self):
        assert ap_from_pr(np.array([0.5, 1.0]), np.array([0.5, 1.0])) == pytest.approx(1.0)


class TestNMS:
    def test_suppresses_overlap(self):
        boxes = np.stack([_box(0, 0, 4, 2), _box(0.2, 0, 4, 2), _box(10, 0, 4, 2)])
        keep = rotated_nms(boxes, np.array([0.5, 0.9, 0.4]), 0.5)
        assert keep.tolist() == [1, 2]

    def test_empty(self):
        assert len(rotated_nms(np.zeros((0, 7)), np.zeros(0))) == 0
