import math

import numpy as np
import pytest

from querycoop.autodiff import Tensor, backward, default_dtype
from querycoop.geometry import wrap_angle
from querycoop.head import (
    SIZE_PRIOR,
    DetectionHead,
    LossWeights,
    boxes_to_params,
    detections,
    exhaustive_match,
    focal_loss,
    hungarian_match,
    params_to_boxes,
    set_loss,
    to_ego,
)
from querycoop.scene import WORLD, AgentPose, transform_boxes
from tests.fd import numeric_grad, rel_close


def _zero_box_head(dim=8):
    head = DetectionHead(dim, rng=0)
    for lin in head.box.layers:
        lin.zero_()
    return head


class TestDecode:
    def test_zeroed_box_mlp(self):
        head = _zero_box_head()
        refs = np.array([[1.0, -2.0, -1.0], [10.0, 3.0, -0.8]])
        logits, params = head(Tensor(np.random.default_rng(0).normal(size=(2, 8))), refs)
        boxes = params_to_boxes(params.data)
        np.testing.assert_allclose(boxes[:, :3], refs, atol=1e-6)
        np.testing.assert_allclose(boxes[:, 3:6], np.broadcast_to(SIZE_PRIOR, (2, 3)), atol=1e-5)
        assert (boxes[:, 6] == 0.0).all()

    def test_scores_bounded_and_sizes_positive(self):
        head = DetectionHead(8, rng=1)
        q = Tensor(np.random.default_rng(1).normal(0, 30, size=(50, 8)))
        logits, params = head(q, np.zeros((50, 3)))
        dets = detections(logits, params)
        assert all(0.0 <= d.score <= 1.0 for d in dets)
        assert all((d.box[3:6] > 0).all() for d in dets)

    def test_decode_gradient(self):
        rng = np.random.default_rng(2)
        with default_dtype(np.float64):
            head = DetectionHead(6, rng=2)
            q0 = rng.normal(size=(3, 6))
            refs = rng.normal(size=(3, 3))
            wl, wp = rng.normal(size=3), rng.normal(size=(3, 8))

            def f(q):
                lg, p = head(q if isinstance(q, Tensor) else Tensor(q), refs)
                return (lg * wl).sum() + (p * wp).sum()

            q = Tensor(q0.copy(), requires_grad=True)
            backward(f(q))
            num = numeric_grad(lambda a: float(f(a).data), [q0.copy()])[0]
        assert rel_close(q.grad, num)

    def test_params_round_trip(self):
        boxes = np.array([[1.0, 2.0, -1.0, 4.0, 2.0, 1.5, 0.3], [0, 0, 0, 1, 1, 1, -1.2]])
        np.testing.assert_allclose(params_to_boxes(boxes_to_params(boxes)), boxes, atol=1e-12)

    def test_frame_change_matches_box_transform(self):
        rng = np.random.default_rng(3)
        boxes = np.column_stack([rng.uniform(-20, 20, (5, 3)), rng.uniform(1, 5, (5, 3)),
                                 rng.uniform(-1.5, 1.5, 5)])
        sender = AgentPose(12.0, -3.0, 0.2, 2.4)
        with default_dtype(np.float64):
            out = params_to_boxes(to_ego(Tensor(boxes_to_params(boxes)), sender.as_array()).data)
        ref = transform_boxes(boxes, sender, WORLD)
        np.testing.assert_allclose(out[:, :6], ref[:, :6], atol=1e-9)
        # the doubled-angle encoding fixes yaw up to a half turn
        diff = wrap_angle(2 * (out[:, 6] - ref[:, 6]))
        np.testing.assert_allclose(diff, 0.0, atol=1e-9)


class TestHungarian:
    def test_single_pair(self):
        m = hungarian_match(np.array([[3.5]]))
        assert m.gt_index.tolist() == [0] and m.pred_index.tolist() == [0] and m.cost == 3.5

    def test_diagonal_zeros(self):
        c = np.ones((3, 3)) * 5 - np.eye(3) * 5
        assert hungarian_match(c).pred_index.tolist() == [0, 1, 2]

    @pytest.mark.parametrize("seed", range(8))
    def test_matches_exhaustive(self, seed):
        rng = np.random.default_rng(seed)
        g = int(rng.integers(1, 7))
        c = rng.uniform(0, 10, size=(g, 8))
        fast, slow = hungarian_match(c), exhaustive_match(c)
        assert fast.cost == pytest.approx(slow.cost, abs=1e-12)
        assert len(set(fast.pred_index.tolist())) == g

    def test_row_constant_invariance(self):
        rng = np.random.default_rng(1)
        c = rng.uniform(size=(4, 7))
        shifted = c.copy()
        shifted[2] += 17.0
        assert hungarian_match(c).pred_index.tolist() == hungarian_match(shifted).pred_index.tolist()

    def test_no_worse_than_identity(self):
        c = np.random.default_rng(2).uniform(size=(5, 5))
        assert hungarian_match(c).cost <= np.trace(c) + 1e-12

    def test_too_many_ground_truths(self):
        with pytest.raises(ValueError):
            hungarian_match(np.zeros((3, 2)))

    def test_empty(self):
        assert len(hungarian_match(np.zeros((0, 4)))) == 0


class TestSetLoss:
    def test_perfect_predictions(self):
        gt = np.array([[1.0, 2.0, -1.0, 4.0, 2.0, 1.5, 0.3], [10, -3, -1, 4.5, 1.9, 1.6, -0.5]])
        params = np.zeros((5, 8))
        params[[3, 1]] = boxes_to_params(gt)
        params[[0, 2, 4]] = boxes_to_params(np.array([[0, 0, 0, 1, 1, 1, 0]] * 3))
        logits = np.full(5, -12.0)
        logits[[3, 1]] = 12.0
        w = LossWeights()
        loss, assign = set_loss(Tensor(logits), Tensor(params), gt, w)
        assert float(loss.data) < 1e-2 * w.cls
        assert sorted(zip(assign.gt_index.tolist(), assign.pred_index.tolist())) == [(0, 3), (1, 1)]

    def test_empty_ground_truth_closed_form(self):
        w = LossWeights()
        with default_dtype(np.float64):
            loss, _ = set_loss(Tensor(np.zeros(7)), Tensor(np.zeros((7, 8))), np.zeros((0, 7)), w)
        expected = w.cls * 7 * (1 - w.alpha) * 0.5 ** w.gamma * math.log(2)
        assert float(loss.data) == pytest.approx(expected, rel=1e-12)

    def test_permutation_invariance(self):
        rng = np.random.default_rng(0)
        gt = np.column_stack([rng.uniform(-5, 5, (3, 3)), rng.uniform(1, 4, (3, 3)), rng.uniform(-1, 1, 3)])
        logits = rng.normal(size=6)
        params = boxes_to_params(np.column_stack([rng.uniform(-5, 5, (6, 3)), rng.uniform(1, 4, (6, 3)),
                                                  rng.uniform(-1, 1, 6)]))
        with default_dtype(np.float64):
            base, _ = set_loss(Tensor(logits), Tensor(params), gt)
            p = rng.permutation(6)
            g = rng.permutation(3)
            other, _ = set_loss(Tensor(logits[p]), Tensor(params[p]), gt[g])
        assert float(other.data) == pytest.approx(float(base.data), rel=1e-12)

    def test_focal_matches_formula(self):
        x = np.array([-2.0, 0.3, 1.7])
        t = np.array([1.0, 0.0, 1.0])
        with default_dtype(np.float64):
            got = float(focal_loss(Tensor(x), t).data)
        p = 1 / (1 + np.exp(-x))
        pt = np.where(t == 1, p, 1 - p)
        at = np.where(t == 1, 0.25, 0.75)
        assert got == pytest.approx(float(np.sum(-at * (1 - pt) ** 2 * np.log(pt))), rel=1e-12)

    def test_loss_gradient(self):
        rng = np.random.default_rng(5)
        gt = np.array([[1.0, 2.0, -1.0, 4.0, 2.0, 1.5, 0.3]])
        lg0, p0 = rng.normal(size=4), rng.normal(size=(4, 8)) + boxes_to_params(gt)
        with default_dtype(np.float64):
            lg, p = Tensor(lg0.copy(), requires_grad=True), Tensor(p0.copy(), requires_grad=True)
            loss, _ = set_loss(lg, p, gt)
            backward(loss)
            f = lambda a, b: float(set_loss(Tensor(a), Tensor(b), gt)[0].data)
            n_lg, n_p = numeric_grad(f, [lg0.copy(), p0.copy()], step=1e-6)
        assert rel_close(lg.grad, n_lg) and rel_close(p.grad, n_p)
