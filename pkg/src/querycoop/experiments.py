"""Training, evaluation and sweeps driven by an :class:`ExperimentConfig`."""
from __future__ import annotations

import csv
import json
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .autodiff import AdamW, backward, warmup_cosine
from .comms import MB, log2_bytes, log_comm_volume, payload_bytes, to_mb
from .config import ExperimentConfig, from_dict
from .metrics import ap_table, write_ap_csv, write_json
from .model import MODES, CoopModel, TrainingSample, run_frame, scene_loss
from .scene import PoseNoiseSpec, Scene, generate_scene

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "querycoop-checkpoint/1"


class NumericalError(RuntimeError):
    """Raised when training produces a non-finite loss."""


class CheckpointError(ValueError):
    """Checkpoint missing, malformed or incompatible with the config."""


# --------------------------------------------------------------------------
# scenes

def _seeds(root: int, stream: int, n: int) -> list[int]:
    """``n`` independent 32-bit seeds for one named stream of the root seed."""
    children = np.random.SeedSequence([root, stream]).spawn(n)
    return [int(c.generate_state(1)[0]) for c in children]


def _scene_task(args):
    spec, seed = args
    return generate_scene(spec, seed)


def _map(fn, items, workers: int):
    if workers <= 1 or len(items) < 2:
        return [fn(x) for x in items]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def make_scenes(cfg: ExperimentConfig, n: int, stream: int, policy: str | None = None,
                agents: tuple[int, int] | None = None) -> list[Scene]:
    """Deterministic scene set for one stream (0 = train, 1 = eval, ...)."""
    lo, hi = agents or cfg.scene.agents
    seeds = _seeds(cfg.seed, stream, n)
    rng = np.random.default_rng([cfg.seed, stream])
    tasks = []
    for s in seeds:
        n_agents = int(rng.integers(lo, hi + 1))
        pol = policy or cfg.scene.occluder_policy
        if pol == "occlusion" and n_agents < 2:
            pol = "random"
        tasks.append((cfg.scene.spec(n_agents, pol), s))
    return _map(_scene_task, tasks, cfg.workers)


def training_scenes(cfg: ExperimentConfig) -> list[Scene]:
    n = cfg.train.n_scenes
    n_random = int(round(n * cfg.train.random_fraction))
    scenes = make_scenes(cfg, n - n_random, stream=0)
    if n_random:
        scenes += make_scenes(cfg, n_random, stream=2, policy="random")
    order = np.random.default_rng([cfg.seed, 3]).permutation(len(scenes))
    return [scenes[i] for i in order]


def eval_scenes(cfg: ExperimentConfig, n: int | None = None) -> list[Scene]:
    """The occlusion suite: every scene has an object hidden from the ego but seen by a helper."""
    return make_scenes(cfg, cfg.eval.n_scenes if n is None else n, stream=1, policy="occlusion")


# --------------------------------------------------------------------------
# model / checkpoint

def build_model(cfg: ExperimentConfig) -> CoopModel:
    return CoopModel(cfg.grid(), cfg.ref_range(), cfg.decoder(), cfg.model.fusion_heads, seed=cfg.seed)


def save_checkpoint(model: CoopModel, cfg: ExperimentConfig, path) -> Path:
    path = Path(path)
    meta = {"format": CHECKPOINT_FORMAT, "version": __version__, "config": cfg.to_dict()}
    arrays = {f"p/{k}": v for k, v in model.state_dict().items()}
    np.savez(path, __meta__=np.array(json.dumps(meta)), **arrays)
    return path


def load_checkpoint(path, cfg: ExperimentConfig | None = None) -> tuple[CoopModel, ExperimentConfig]:
    """Rebuild the model stored at ``path``; ``cfg``'s model section must match if given."""
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint {path} does not exist")
    try:
        with np.load(path, allow_pickle=False) as data:
            meta = json.loads(str(data["__meta__"]))
            state = {k[2:]: data[k] for k in data.files if k.startswith("p/")}
    except (OSError, KeyError, ValueError) as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if meta.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"unsupported checkpoint format {meta.get('format')!r}")
    stored = from_dict(meta["config"])
    if cfg is not None:
        mine, theirs = cfg.to_dict(), stored.to_dict()
        for sec in ("model",):
            if mine[sec] != theirs[sec]:
                raise CheckpointError(f"checkpoint {sec} section differs from the config")
        if mine["scene"]["range_scale"] != theirs["scene"]["range_scale"]:
            raise CheckpointError("checkpoint detection range differs from the config")
    model = build_model(stored if cfg is None else cfg)
    try:
        model.load_state_dict(state)
    except (KeyError, ValueError) as exc:
        raise CheckpointError(str(exc)) from exc
    return model, stored if cfg is None else cfg


# --------------------------------------------------------------------------
# training

@dataclass
class TrainResult:
    model: CoopModel
    losses: list[dict] = field(default_factory=list)
    checkpoint: Path | None = None
    seconds: float = 0.0
    steps: int = 0


def train_model(model: CoopModel, samples: list[TrainingSample], cfg: ExperimentConfig,
                log_every: int = 50, on_step=None) -> TrainResult:
    """Batch-size-1 AdamW with linear warm-up and cosine decay, one pass per epoch.

    Stops early when ``train.max_minutes`` elapses. Raises :class:`NumericalError`
    on a non-finite loss.
    """
    t = cfg.train
    total = t.epochs * len(samples)
    warmup = t.warmup_epochs * len(samples)
    opt = AdamW(model.parameters(), lr=t.lr, weight_decay=t.weight_decay, max_grad_norm=t.max_grad_norm)
    weights = cfg.loss_weights()
    rng = np.random.default_rng([cfg.seed, 4])
    noise_rng = np.random.default_rng([cfg.seed, 6])
    deadline = None if t.max_minutes is None else time.monotonic() + 60.0 * t.max_minutes
    start = time.monotonic()
    losses: list[dict] = []
    step = 0
    for epoch in range(t.epochs):
        for i in rng.permutation(len(samples)):
            if deadline is not None and time.monotonic() > deadline:
                logger.info("time budget reached after %d steps", step)
                return TrainResult(model, losses, None, time.monotonic() - start, step)
            lr = warmup_cosine(step, total, t.lr, warmup, t.warmup_lr, t.min_lr)
            opt.lr = lr
            noise = None
            if t.pose_noise_xyz > 0:
                noise = PoseNoiseSpec(float(noise_rng.uniform(0.0, t.pose_noise_xyz)), 0.0)
            loss, terms = scene_loss(model, samples[i], cfg.fusion.mu, weights, aux=t.aux_loss,
                                     single_weight=t.single_weight, seed=int(i), noise=noise, rng=noise_rng)
            value = float(loss.data)
            if not math.isfinite(value):
                raise NumericalError(f"non-finite loss {value} at step {step} (epoch {epoch}, scene {int(i)})")
            model.zero_grad()
            backward(loss)
            opt.step()
            row = {"step": step, "epoch": epoch, "scene": int(i), "lr": lr, "loss": value, **terms}
            losses.append(row)
            if on_step is not None:
                on_step(row)
            if log_every and step % log_every == 0:
                logger.info("step %d loss %.4f lr %.2e", step, value, lr)
            step += 1
    return TrainResult(model, losses, None, time.monotonic() - start, step)


def write_loss_csv(path, losses: list[dict]) -> None:
    keys = ["step", "epoch", "scene", "lr", "loss", "single", "coop"]
    with Path(path).open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=keys, extrasaction="ignore")
        w.writeheader()
        w.writerows(losses)


def run_train(cfg: ExperimentConfig, out_dir, scenes: list[Scene] | None = None) -> TrainResult:
    """Train from scratch, writing ``checkpoint.npz``, ``loss.csv`` and ``config.yaml`` to ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cfg.save(out / "config.yaml")
    scenes = training_scenes(cfg) if scenes is None else scenes
    samples = [TrainingSample.from_scene(s) for s in scenes]
    model = build_model(cfg)
    try:
        result = train_model(model, samples, cfg)
    except NumericalError as exc:
        dump = {"error": str(exc), "config": cfg.to_dict()}
        write_json(out / "diagnostics.json", dump)
        raise
    write_loss_csv(out / "loss.csv", result.losses)
    result.checkpoint = save_checkpoint(model, cfg, out / "checkpoint.npz")
    write_json(out / "train_summary.json", {"steps": result.steps, "seconds": result.seconds,
                                            "final_loss": result.losses[-1]["loss"] if result.losses else None})
    return result


# --------------------------------------------------------------------------
# evaluation

def evaluate_model(model: CoopModel, scenes: list[Scene], cfg: ExperimentConfig, mode: str,
                   noise: PoseNoiseSpec | None = None, budget: float | None = None,
                   mu: float | None = None, cache: dict | None = None) -> dict:
    """AP table plus exact byte accounting for one mode over a scene list.

    Pass the same ``cache`` dict to repeated calls on one model and scene list to
    reuse the per-agent decoder outputs.
    """
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}; expected one of {MODES}")
    noise = cfg.pose_noise() if noise is None else noise
    budget = cfg.budget if budget is None else budget
    mu = cfg.fusion.mu if mu is None else mu
    seeds = _seeds(cfg.seed, 5, len(scenes))
    frames, comm = [], []
    for k, (scene, seed) in enumerate(zip(scenes, seeds)):
        out = run_frame(model, scene, mode, mu=mu, budget=budget, noise=noise, seed=seed,
                        nms_iou=cfg.fusion.nms_iou if mode in ("coop", "no_sqm") else None,
                        late_nms_iou=cfg.fusion.late_nms_iou, cache=cache)
        frames.append(out.result)
        comm.append({"frame": k, "messages": len(out.messages) if mode != "no_fusion" else 0,
                     "payload_bytes": out.payload_bytes, "metadata_bytes": out.metadata_bytes})
    volume = log_comm_volume(comm)
    report = {"mode": mode, "n_scenes": len(scenes), "mu": mu,
              "sigma_xyz": noise.sigma_xyz, "sigma_heading": noise.sigma_heading,
              "budget_bytes": None if math.isinf(budget) else budget,
              **ap_table(frames, cfg.eval.iou_thresholds),
              "mean_payload_bytes": volume["mean_payload_bytes"],
              "mean_payload_mb": volume["mean_payload_mb"],
              "log2_mean_payload": volume["log2_mean_payload"],
              "comm": volume}
    report["frames"] = frames
    return report


def _public(report: dict) -> dict:
    return {k: v for k, v in report.items() if k != "frames"}


def run_eval(cfg: ExperimentConfig, checkpoint, mode: str, out_dir=None,
             scenes: list[Scene] | None = None) -> dict:
    model = checkpoint if isinstance(checkpoint, CoopModel) else load_checkpoint(checkpoint, cfg)[0]
    scenes = eval_scenes(cfg) if scenes is None else scenes
    report = evaluate_model(model, scenes, cfg, mode)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        write_json(out / f"eval_{mode}.json", _public(report))
        row = {k: v for k, v in _public(report).items() if k != "comm"}
        write_ap_csv(out / f"eval_{mode}.csv", [row])
    return report


SWEEP_AXES = ("noise", "heading", "mu", "budget", "n_queries")


def run_sweep(cfg: ExperimentConfig, checkpoint, axis: str, out_dir=None,
              scenes: list[Scene] | None = None, modes=("coop", "no_fusion")) -> list[dict]:
    """One row per (setting, mode) with AP and exact bytes.

    ``n_queries`` retrains a model per setting; the other axes reuse ``checkpoint``.
    """
    if axis not in SWEEP_AXES:
        raise ValueError(f"unknown sweep axis {axis!r}; expected one of {SWEEP_AXES}")
    scenes = eval_scenes(cfg) if scenes is None else scenes
    rows: list[dict] = []
    if axis == "n_queries":
        for nq in cfg.eval.nq_sweep:
            sub = cfg.replace(model={"n_queries": int(nq)})
            model = run_train(sub, Path(out_dir) / f"nq_{nq}" if out_dir else _tmpdir()).model
            cache: dict = {}
            for mode in modes:
                rep = evaluate_model(model, scenes, sub, mode, cache=cache)
                rows.append(_sweep_row(axis, nq, rep, query_bytes=payload_bytes(nq, sub.model.query_dim)))
    else:
        model = checkpoint if isinstance(checkpoint, CoopModel) else load_checkpoint(checkpoint, cfg)[0]
        cache = {}
        settings = {"noise": cfg.eval.noise_sweep, "heading": cfg.eval.heading_sweep,
                    "mu": cfg.eval.mu_sweep, "budget": cfg.eval.budget_sweep}[axis]
        for value in settings:
            kwargs = {}
            if axis == "noise":
                kwargs["noise"] = PoseNoiseSpec(float(value), cfg.eval.sigma_heading)
            elif axis == "heading":
                kwargs["noise"] = PoseNoiseSpec(cfg.eval.sigma_xyz, float(value))
            elif axis == "mu":
                kwargs["mu"] = float(value)
            else:
                kwargs["budget"] = float(value)
            for mode in modes:
                rep = evaluate_model(model, scenes, cfg, mode, cache=cache, **kwargs)
                rows.append(_sweep_row(axis, value, rep))
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        write_ap_csv(out / f"sweep_{axis}.csv", rows)
        write_json(out / f"sweep_{axis}.json", rows)
    return rows


def _sweep_row(axis, value, rep: dict, query_bytes: int | None = None) -> dict:
    row = {"axis": axis, "setting": value, "mode": rep["mode"]}
    row.update({k: v for k, v in rep.items() if k.startswith("ap@")})
    row["mean_payload_bytes"] = rep["mean_payload_bytes"]
    row["log2_mean_payload"] = rep["log2_mean_payload"]
    if query_bytes is not None:
        row["message_payload_bytes"] = query_bytes
        row["message_payload_mb"] = to_mb(query_bytes)
        row["message_log2"] = log2_bytes(query_bytes)
    return row


def _tmpdir() -> Path:
    import tempfile

    return Path(tempfile.mkdtemp(prefix="querycoop-"))


def run_report(run_dir) -> dict:
    """Collect every eval/sweep JSON under ``run_dir`` into ``report.json``."""
    run = Path(run_dir)
    if not run.is_dir():
        raise FileNotFoundError(f"run directory {run} does not exist")
    summary: dict = {"evals": {}, "sweeps": {}}
    for p in sorted(run.glob("eval_*.json")):
        rep = json.loads(p.read_text())
        summary["evals"][rep["mode"]] = {k: v for k, v in rep.items() if k != "comm"}
    for p in sorted(run.glob("sweep_*.json")):
        summary["sweeps"][p.stem[len("sweep_"):]] = json.loads(p.read_text())
    loss = run / "loss.csv"
    if loss.exists():
        with loss.open() as fh:
            vals = [float(r["loss"]) for r in csv.DictReader(fh)]
        summary["training"] = {"steps": len(vals), "first_loss": vals[0] if vals else None,
                               "last_loss": vals[-1] if vals else None}
    summary["bytes_per_mb"] = MB
    write_json(run / "report.json", summary)
    return summary
