"""scikit-learn style wrapper around the cooperative detector."""
from __future__ import annotations

from pathlib import Path

from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from .config import ExperimentConfig, from_dict, load_config
from .experiments import build_model, evaluate_model, load_checkpoint, save_checkpoint, train_model
from .metrics import FrameResult
from .model import MODES, TrainingSample, run_frame
from .scene import Scene


def _check_scenes(scenes) -> list[Scene]:
    if isinstance(scenes, Scene):
        scenes = [scenes]
    scenes = list(scenes)
    if not scenes:
        raise ValueError("expected at least one scene")
    for i, s in enumerate(scenes):
        if not isinstance(s, Scene):
            raise TypeError(f"item {i} is {type(s).__name__}, expected Scene")
        if len(s.clouds) != s.n_agents or s.n_agents < 1:
            raise ValueError(f"scene {i} has {len(s.clouds)} clouds for {s.n_agents} agents")
    return scenes


class CooperativeDetector(BaseEstimator):
    """Trainable cooperative detector with the fit/predict/score protocol.

    Parameters
    ----------
    config : ExperimentConfig, dict, path or None
        Experiment settings; ``None`` uses the defaults.
    mode : str
        Inference mode, one of ``no_fusion``, ``late_fusion``, ``coop``, ``no_sqm``.
    mu : float or None
        Similarity threshold override.
    budget : float or None
        Per-frame payload budget in bytes, ``None`` for the config value.
    random_state : int
        Seed for model initialisation and data order.
    """

    def __init__(self, config=None, mode: str = "coop", mu: float | None = None,
                 budget: float | None = None, random_state: int = 0):
        self.config = config
        self.mode = mode
        self.mu = mu
        self.budget = budget
        self.random_state = random_state

    def _resolved_config(self) -> ExperimentConfig:
        cfg = self.config
        if cfg is None:
            cfg = ExperimentConfig().validate()
        elif isinstance(cfg, dict):
            cfg = from_dict(cfg)
        elif isinstance(cfg, (str, Path)):
            cfg = load_config(cfg)
        elif not isinstance(cfg, ExperimentConfig):
            raise TypeError(f"config must be ExperimentConfig, dict, path or None, not {type(cfg).__name__}")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.mu is not None and not 0 < self.mu < 1.5:
            raise ValueError("mu must be in (0, 1.5)")
        if self.budget is not None and self.budget < 0:
            raise ValueError("budget must be non-negative")
        return cfg.replace(seed=int(self.random_state))

    def _check_fitted(self):
        if not hasattr(self, "model_"):
            raise NotFittedError("CooperativeDetector is not fitted; call fit or load first")

    def fit(self, scenes, y=None):
        """Train on ``scenes``; ground truth is read from the scenes themselves."""
        scenes = _check_scenes(scenes)
        cfg = self._resolved_config()
        self.config_ = cfg
        self.model_ = build_model(cfg)
        samples = [TrainingSample.from_scene(s) for s in scenes]
        result = train_model(self.model_, samples, cfg, log_every=0)
        self.loss_curve_ = [row["loss"] for row in result.losses]
        self.n_steps_ = result.steps
        return self

    def _frame(self, scene: Scene, seed: int):
        cfg = self.config_
        mu = cfg.fusion.mu if self.mu is None else self.mu
        budget = cfg.budget if self.budget is None else float(self.budget)
        return run_frame(self.model_, scene, self.mode, mu=mu, budget=budget, noise=cfg.pose_noise(),
                         seed=seed, nms_iou=cfg.fusion.nms_iou if self.mode in ("coop", "no_sqm") else None,
                         late_nms_iou=cfg.fusion.late_nms_iou)

    def predict(self, scenes) -> list[FrameResult]:
        """Ego-frame boxes and scores per scene (``FrameResult`` with the evaluation targets)."""
        self._check_fitted()
        scenes = _check_scenes(scenes)
        return [self._frame(s, seed=i).result for i, s in enumerate(scenes)]

    def score(self, scenes, y=None, iou: float = 0.5) -> float:
        """AP at the given BEV IoU threshold."""
        self._check_fitted()
        scenes = _check_scenes(scenes)
        cfg = self.config_.replace(eval={"iou_thresholds": (iou,)})
        kwargs = {}
        if self.mu is not None:
            kwargs["mu"] = self.mu
        if self.budget is not None:
            kwargs["budget"] = float(self.budget)
        return float(evaluate_model(self.model_, scenes, cfg, self.mode, **kwargs)[f"ap@{iou}"])

    def save(self, path) -> Path:
        self._check_fitted()
        return save_checkpoint(self.model_, self.config_, path)

    @classmethod
    def load(cls, path, mode: str = "coop", **kwargs) -> "CooperativeDetector":
        model, cfg = load_checkpoint(path)
        est = cls(config=cfg, mode=mode, random_state=cfg.seed, **kwargs)
        est.config_ = cfg
        est.model_ = model
        return est
