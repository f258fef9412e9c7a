import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from querycoop.estimator import CooperativeDetector
from querycoop.experiments import eval_scenes, make_scenes
from querycoop.metrics import FrameResult
from tests.tiny import tiny_config


@pytest.fixture(scope="module")
def fitted():
    cfg = tiny_config()
    est = CooperativeDetector(config=cfg, random_state=0).fit(make_scenes(cfg, 2, stream=0))
    return cfg, est


class TestParams:
    def test_get_set_params(self):
        est = CooperativeDetector(mode="late_fusion", mu=0.5)
        params = est.get_params()
        assert params["mode"] == "late_fusion" and params["mu"] == 0.5
        est.set_params(mode="coop")
        assert est.mode == "coop"

    def test_clone_is_unfitted(self, fitted):
        _, est = fitted
        twin = clone(est)
        assert twin.get_params()["random_state"] == 0
        with pytest.raises(NotFittedError):
            twin.predict(eval_scenes(tiny_config(), 1))


class TestValidation:
    def test_rejects_non_scenes(self):
        with pytest.raises(TypeError):
            CooperativeDetector(config=tiny_config()).fit([np.zeros((3, 4))])

    def test_rejects_empty(self):
        with pytest.raises(ValueError):
            CooperativeDetector(config=tiny_config()).fit([])

    def test_rejects_bad_mode(self):
        cfg = tiny_config()
        with pytest.raises(ValueError):
            CooperativeDetector(config=cfg, mode="early").fit(make_scenes(cfg, 1, stream=0))

    def test_rejects_bad_config_type(self):
        with pytest.raises(TypeError):
            CooperativeDetector(config=42).fit(make_scenes(tiny_config(), 1, stream=0))


class TestFitPredict:
    def test_fit_records_curve(self, fitted):
        cfg, est = fitted
        assert len(est.loss_curve_) == est.n_steps_ == cfg.train.epochs * 2

    def test_predict(self, fitted):
        cfg, est = fitted
        out = est.predict(eval_scenes(cfg, 2))
        assert len(out) == 2 and all(isinstance(r, FrameResult) for r in out)
        assert all(r.boxes.shape[1] == 7 and len(r.scores) == len(r.boxes) for r in out)

    def test_score_in_unit_interval(self, fitted):
        cfg, est = fitted
        s = est.score(eval_scenes(cfg, 2))
        assert 0.0 <= s <= 1.0

    def test_zero_budget_matches_no_fusion(self, fitted):
        cfg, est = fitted
        scenes = eval_scenes(cfg, 2)
        coop = clone(est).set_params(budget=0)
        coop.model_, coop.config_ = est.model_, est.config_
        solo = clone(est).set_params(mode="no_fusion")
        solo.model_, solo.config_ = est.model_, est.config_
        for a, b in zip(coop.predict(scenes), solo.predict(scenes)):
            np.testing.assert_array_equal(a.boxes, b.boxes)

    def test_save_load(self, fitted, tmp_path):
        cfg, est = fitted
        path = est.save(tmp_path / "det.npz")
        again = CooperativeDetector.load(path)
        scenes = eval_scenes(cfg, 2)
        for a, b in zip(est.predict(scenes), again.predict(scenes)):
            np.testing.assert_array_equal(a.boxes, b.boxes)
            np.testing.assert_array_equal(a.scores, b.scores)
