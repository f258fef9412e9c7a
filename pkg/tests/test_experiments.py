import csv
import json

import numpy as np
import pytest

from querycoop import experiments
from querycoop.autodiff import Tensor
from querycoop.comms import payload_bytes, to_mb
from querycoop.experiments import (
    CheckpointError,
    NumericalError,
    build_model,
    eval_scenes,
    load_checkpoint,
    make_scenes,
    run_eval,
    run_report,
    run_sweep,
    run_train,
    save_checkpoint,
    train_model,
)
from querycoop.model import Received, TrainingSample, run_frame
from querycoop.scene import hidden_from_ego, relative_pose
from tests.tiny import tiny_config


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    cfg = tiny_config()
    out = tmp_path_factory.mktemp("run")
    result = run_train(cfg, out)
    return cfg, out, result


def _rows(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


class TestScenes:
    def test_deterministic(self):
        cfg = tiny_config()
        a, b = make_scenes(cfg, 3, stream=1), make_scenes(cfg, 3, stream=1)
        for s, t in zip(a, b):
            np.testing.assert_array_equal(s.box_array(), t.box_array())
            np.testing.assert_array_equal(s.clouds[0].points, t.clouds[0].points)

    def test_streams_differ(self):
        cfg = tiny_config()
        a, b = make_scenes(cfg, 1, stream=0)[0], make_scenes(cfg, 1, stream=1)[0]
        assert not np.array_equal(a.box_array(), b.box_array())

    def test_eval_suite_is_occluded(self):
        cfg = tiny_config()
        for s in eval_scenes(cfg):
            assert 2 <= s.n_agents <= 3
            assert hidden_from_ego(s).any()

    def test_worker_pool_matches_serial(self):
        cfg = tiny_config()
        serial = make_scenes(cfg, 3, stream=1)
        pooled = make_scenes(cfg.replace(workers=2), 3, stream=1)
        for s, t in zip(serial, pooled):
            np.testing.assert_array_equal(s.box_array(), t.box_array())


class TestTrain:
    def test_outputs(self, trained):
        cfg, out, result = trained
        rows = _rows(out / "loss.csv")
        assert len(rows) == result.steps == cfg.train.epochs * cfg.train.n_scenes
        assert (out / "checkpoint.npz").exists() and (out / "config.yaml").exists()
        assert all(np.isfinite(float(r["loss"])) for r in rows)

    def test_identical_seeds_identical_curves(self, trained, tmp_path):
        cfg, _, first = trained
        again = run_train(cfg, tmp_path)
        assert [r["loss"] for r in again.losses] == [r["loss"] for r in first.losses]

    def test_zero_lr_constant_curve(self):
        cfg = tiny_config(train={"n_scenes": 1, "epochs": 6, "lr": 0.0, "warmup_lr": 0.0, "min_lr": 0.0})
        model = build_model(cfg)
        samples = [TrainingSample.from_scene(make_scenes(cfg, 1, stream=0)[0])]
        losses = [r["loss"] for r in train_model(model, samples, cfg, log_every=0).losses]
        assert len(set(losses)) == 1

    def test_overfit_single_scene(self):
        cfg = tiny_config(train={"n_scenes": 1, "epochs": 200, "lr": 1e-3, "warmup_epochs": 0})
        samples = [TrainingSample.from_scene(make_scenes(cfg, 1, stream=0)[0])]
        losses = [r["loss"] for r in train_model(build_model(cfg), samples, cfg, log_every=0).losses]
        assert len(losses) == 200
        assert losses[-1] < losses[0]
        assert np.mean(losses[-10:]) < 0.5 * np.mean(losses[:10])

    def test_nan_aborts_with_dump(self, tmp_path, monkeypatch):
        cfg = tiny_config()

        def broken(*args, **kwargs):
            return Tensor(np.array(np.nan, np.float32)), {}

        monkeypatch.setattr(experiments, "scene_loss", broken)
        with pytest.raises(NumericalError):
            run_train(cfg, tmp_path)
        dump = json.loads((tmp_path / "diagnostics.json").read_text())
        assert "non-finite" in dump["error"] and dump["config"]["seed"] == cfg.seed

    def test_pose_noise_augmentation(self):
        cfg = tiny_config(train={"n_scenes": 2, "epochs": 2, "pose_noise_xyz": 0.5})
        samples = [TrainingSample.from_scene(s) for s in make_scenes(cfg, 2, stream=0)]
        run = lambda c: [r["loss"] for r in train_model(build_model(c), samples, c, log_every=0).losses]
        noisy = run(cfg)
        assert noisy == run(cfg)
        assert noisy != run(cfg.replace(train={"pose_noise_xyz": 0.0}))

    def test_time_budget(self):
        cfg = tiny_config(train={"epochs": 1000, "max_minutes": 0.0})
        samples = [TrainingSample.from_scene(s) for s in make_scenes(cfg, 1, stream=0)]
        assert train_model(build_model(cfg), samples, cfg).steps == 0


class TestCheckpoint:
    def test_round_trip(self, trained, tmp_path):
        cfg, _, result = trained
        path = save_checkpoint(result.model, cfg, tmp_path / "m.npz")
        model, stored = load_checkpoint(path, cfg)
        for k, v in result.model.state_dict().items():
            np.testing.assert_array_equal(model.state_dict()[k], v)
        assert stored.to_dict() == cfg.to_dict()

    def test_incompatible_config(self, trained):
        cfg, out, _ = trained
        with pytest.raises(CheckpointError):
            load_checkpoint(out / "checkpoint.npz", cfg.replace(model={"n_queries": 12}))

    def test_missing_and_corrupt(self, tmp_path):
        with pytest.raises(CheckpointError):
            load_checkpoint(tmp_path / "nope.npz")
        bad = tmp_path / "bad.npz"
        bad.write_bytes(b"not a zip")
        with pytest.raises(CheckpointError):
            load_checkpoint(bad)

    def test_eval_rejects_mismatch(self, trained):
        cfg, out, _ = trained
        with pytest.raises(CheckpointError):
            run_eval(cfg.replace(model={"query_dim": 32}), out / "checkpoint.npz", "coop")


class TestEval:
    @pytest.mark.parametrize("mode", ["no_fusion", "late_fusion", "coop", "no_sqm"])
    def test_report_has_ap_and_bytes(self, trained, mode, tmp_path):
        cfg, out, _ = trained
        rep = run_eval(cfg, out / "checkpoint.npz", mode, out_dir=tmp_path)
        assert {"ap@0.3", "ap@0.5", "ap@0.7", "mean_payload_bytes", "log2_mean_payload"} <= set(rep)
        on_disk = json.loads((tmp_path / f"eval_{mode}.json").read_text())
        assert on_disk["ap@0.5"] == rep["ap@0.5"]
        assert len(_rows(tmp_path / f"eval_{mode}.csv")) == 1
        if mode == "no_fusion":
            assert rep["mean_payload_bytes"] == 0
        else:
            assert rep["mean_payload_bytes"] > 0

    def test_unknown_mode(self, trained):
        cfg, out, _ = trained
        with pytest.raises(ValueError):
            run_eval(cfg, out / "checkpoint.npz", "early_fusion")

    def test_single_agent_coop_equals_no_fusion(self, trained):
        cfg, _, result = trained
        one = tiny_config(scene={"agents": [1, 1], "occluder_policy": "random"})
        scenes = make_scenes(one, 4, stream=1)
        for i, s in enumerate(scenes):
            a = run_frame(result.model, s, "coop", seed=i).result
            b = run_frame(result.model, s, "no_fusion", seed=i).result
            np.testing.assert_array_equal(a.boxes, b.boxes)
            np.testing.assert_array_equal(a.scores, b.scores)
        ra = run_eval(one, result.model, "coop", scenes=scenes)
        rb = run_eval(one, result.model, "no_fusion", scenes=scenes)
        assert ra["ap@0.5"] == rb["ap@0.5"] and ra["ap@0.3"] == rb["ap@0.3"]

    def test_deterministic(self, trained):
        cfg, out, _ = trained
        a = run_eval(cfg, out / "checkpoint.npz", "coop")
        b = run_eval(cfg, out / "checkpoint.npz", "coop")
        assert a["ap@0.5"] == b["ap@0.5"] and a["comm"] == b["comm"]


class TestSweep:
    def test_noise_rows(self, trained, tmp_path):
        cfg, out, _ = trained
        rows = run_sweep(cfg, out / "checkpoint.npz", "noise", out_dir=tmp_path)
        coop = [r for r in _rows(tmp_path / "sweep_noise.csv") if r["mode"] == "coop"]
        assert [float(r["setting"]) for r in coop] == list(cfg.eval.noise_sweep)
        assert len(rows) == 2 * len(cfg.eval.noise_sweep)
        assert all("ap@0.5" in r and "mean_payload_bytes" in r for r in rows)

    def test_zero_budget_equals_no_fusion(self, trained):
        cfg, out, _ = trained
        rows = run_sweep(cfg, out / "checkpoint.npz", "budget")
        zero = {r["mode"]: r for r in rows if r["setting"] == 0}
        assert zero["coop"]["ap@0.5"] == zero["no_fusion"]["ap@0.5"]
        assert zero["coop"]["ap@0.3"] == zero["no_fusion"]["ap@0.3"]
        assert zero["coop"]["mean_payload_bytes"] == 0

    def test_mu_above_similarity_range(self, trained):
        cfg, _, result = trained
        model = result.model
        for s in eval_scenes(cfg):
            qs = [model.queries(s.clouds[a], a) for a in range(s.n_agents)]
            recv = [Received(q.features, q.refs.data.astype(np.float64), a,
                             relative_pose(s.poses[a], s.poses[0]).as_array()) for a, q in enumerate(qs) if a]
            fused = model.fuse(qs[0], recv, mu=1.0)
            alone = model.ego_only(qs[0])
            assert (fused.n_members == 0).all()
            ego = fused.owners == 0
            idx = fused.selected[ego]
            pos = {int(j): k for k, j in enumerate(alone.selected)}
            rows = [pos[int(j)] for j in idx]
            np.testing.assert_array_equal(fused.scores[ego], alone.scores[rows])
            np.testing.assert_array_equal(fused.boxes[ego], alone.boxes[rows])

    def test_query_count_bytes(self, tmp_path):
        cfg = tiny_config(model={"query_dim": 64, "n_heads": 8, "fusion_heads": 8},
                          train={"epochs": 0}, eval={"nq_sweep": [90, 180], "n_scenes": 1})
        rows = run_sweep(cfg, None, "n_queries", out_dir=tmp_path, modes=("coop",))
        assert [r["message_payload_mb"] for r in rows] == [0.023, 0.046]
        assert [r["message_payload_bytes"] for r in rows] == [payload_bytes(90, 64), payload_bytes(180, 64)]
        assert rows[1]["mean_payload_bytes"] % payload_bytes(180, 64) == 0
        assert to_mb(rows[0]["message_payload_bytes"]) == 0.023

    def test_unknown_axis(self, trained):
        cfg, out, _ = trained
        with pytest.raises(ValueError):
            run_sweep(cfg, out / "checkpoint.npz", "lr")


class TestReport:
    def test_collects_outputs(self, trained):
        cfg, out, _ = trained
        run_eval(cfg, out / "checkpoint.npz", "coop", out_dir=out)
        run_sweep(cfg, out / "checkpoint.npz", "mu", out_dir=out)
        summary = run_report(out)
        assert "coop" in summary["evals"] and "mu" in summary["sweeps"]
        assert summary["training"]["steps"] == cfg.train.epochs * cfg.train.n_scenes
        assert (out / "report.json").exists()

    def test_missing_dir(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            run_report(tmp_path / "absent")
