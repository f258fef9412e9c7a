"""The cooperative detector: shared query generator, fusion and head, plus
the per-frame inference paths (ego only, late fusion, query fusion) and
the training loss.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Module, Tensor, no_grad, ops
from .comms import QueryMessage, deserialize, enforce_budget, make_message, serialize
from .decoder import DecoderConfig, PointDETR, QuerySet, RefRange
from .encoder import GridConfig
from .fusion import QueryAggregator, match, refine, select_top
from .head import DetectionHead, LossWeights, frame_map, params_to_boxes, set_loss
from .metrics import FrameResult, rotated_nms
from .scene import WORLD, AgentPose, PoseNoiseSpec, Scene, apply_pose_noise, relative_pose, transform_xyz

logger = logging.getLogger(__name__)

MODES = ("no_fusion", "late_fusion", "coop", "no_sqm")


@dataclass
class Received:
    """Queries of one agent as seen by the ego: raw features, owner-frame refs, owner pose in ego frame."""

    features: Tensor
    refs: np.ndarray
    owner: int
    pose_in_ego: np.ndarray

    @classmethod
    def from_message(cls, msg: QueryMessage, ego_pose: AgentPose) -> "Received":
        sender = AgentPose(*(float(v) for v in msg.sender_pose))
        rel = relative_pose(sender, ego_pose).as_array()
        return cls(Tensor(msg.queries), msg.reference_points.astype(np.float64), msg.sender, rel)


@dataclass
class FusedOutput:
    logits: Tensor  # (n,)
    params: Tensor  # (n, 8), ego frame
    selected: np.ndarray
    owners: np.ndarray
    n_members: np.ndarray = field(default_factory=lambda: np.zeros(0, np.int64))

    @property
    def scores(self) -> np.ndarray:
        return 1.0 / (1.0 + np.exp(-self.logits.data.astype(np.float64)))

    @property
    def boxes(self) -> np.ndarray:
        return params_to_boxes(self.params.data)


def _pose_of(p) -> AgentPose:
    return p if isinstance(p, AgentPose) else AgentPose(*(float(v) for v in p))


class CoopModel(Module):
    def __init__(self, grid: GridConfig, ref_range: RefRange, decoder: DecoderConfig,
                 fusion_heads: int = 8, seed=0):
        rng = np.random.default_rng(seed)
        self.grid = grid
        self.ref_range = ref_range
        self.decoder_cfg = decoder
        self.detr = PointDETR(grid, ref_range, decoder, seed=rng)
        self.aggregator = QueryAggregator(decoder.query_dim, fusion_heads, rng=rng)
        self.head = DetectionHead(decoder.query_dim, rng=rng)

    @property
    def n_queries(self) -> int:
        return self.decoder_cfg.n_queries

    def queries(self, cloud, owner: int = 0, seed=0) -> QuerySet:
        return self.detr(cloud, owner, seed)

    def _batched_to_ego(self, params: Tensor, poses: np.ndarray) -> Tensor:
        maps = [frame_map(p) for p in poses]
        A = np.stack([m[0] for m in maps]).astype(params.dtype)
        b = np.stack([m[1] for m in maps]).astype(params.dtype)
        n = params.shape[0]
        out = ops.matmul(ops.reshape(params, (n, 1, 8)), A)
        return ops.reshape(out, (n, 8)) + b

    def fuse(self, ego: QuerySet | Received, received: list[Received], mu: float,
             use_sqm: bool = True, n_select: int | None = None) -> FusedOutput:
        """Match, aggregate, rank and decode the pooled queries in the ego frame."""
        if isinstance(ego, QuerySet):
            ego = Received(ego.features, ego.refs.data.astype(np.float64), ego.owner, np.zeros(4))
        agents = [ego] + list(received)
        feats = ops.concat([a.features for a in agents], axis=0) if len(agents) > 1 else ego.features
        owner_refs = np.concatenate([a.refs for a in agents])
        ego_refs = np.concatenate([transform_xyz(a.refs, _pose_of(a.pose_in_ego), WORLD) for a in agents])
        owners = np.concatenate([np.full(len(a.refs), a.owner) for a in agents])
        index = np.concatenate([np.arange(len(a.refs)) for a in agents])
        poses = np.concatenate([np.repeat(a.pose_in_ego[None], len(a.refs), 0) for a in agents])
        refined = refine(feats, ego_refs, self.detr.pe)
        if use_sqm:
            sim, _ = match(refined.data, owners, mu)
            mask = sim.mask
            n_members = mask.sum(1)
        else:
            mask = None
            n_members = np.full(len(owners), len(owners))
        fused = self.aggregator(feats, refined, mask)
        all_logits = self.head.logits(fused)
        conf = 1.0 / (1.0 + np.exp(-all_logits.data.astype(np.float64)))
        sel = select_top(conf, owners, index, self.n_queries if n_select is None else n_select)
        _, params = self.head(fused[sel], owner_refs[sel])
        params = self._batched_to_ego(params, poses[sel])
        return FusedOutput(all_logits[sel], params, sel, owners[sel], n_members[sel])

    def ego_only(self, ego: QuerySet | Received) -> FusedOutput:
        """Head on the ego's own queries, ranked the same way as the fused output."""
        return self.fuse(ego, [], mu=1.0)

    def agent_detections(self, qs: QuerySet | Received):
        """Per-agent (logits, params in the agent's frame)."""
        feats = qs.features
        refs = qs.refs.data if isinstance(qs, QuerySet) else qs.refs
        return self.head(feats, refs)


# --------------------------------------------------------------------------
# per-frame inference

@dataclass
class FrameOutput:
    result: FrameResult
    messages: list[QueryMessage]
    payload_bytes: int
    metadata_bytes: int


def eval_ground_truth(scene: Scene, ego: int = 0) -> np.ndarray:
    """Boxes in the ego's range that at least one agent actually observes."""
    vis = scene.visibility()
    seen = vis.max(axis=0) >= scene.spec.min_points
    boxes = scene.boxes_in_frame(ego, in_range=False)
    keep = seen & scene.spec.detection_range.contains(boxes[:, :3]) if len(boxes) else seen
    return boxes[keep]


def _noisy_pose(pose: AgentPose, noise: PoseNoiseSpec | None, rng) -> AgentPose:
    if noise is None or (noise.sigma_xyz == 0 and noise.sigma_heading == 0):
        return pose
    return apply_pose_noise(pose, noise, rng)


def _agent_queries(model: CoopModel, scene: Scene, agent: int, seed: int, cache: dict | None) -> QuerySet:
    if cache is None:
        return model.queries(scene.clouds[agent], agent, seed)
    key = (id(scene), agent, seed)
    if key not in cache:
        # keep the scene alive so its id cannot be reused while cached
        cache[key] = (scene, model.queries(scene.clouds[agent], agent, seed))
    return cache[key][1]


def run_frame(model: CoopModel, scene: Scene, mode: str, mu: float = 0.3, budget: float = float("inf"),
              noise: PoseNoiseSpec | None = None, seed: int = 0, nms_iou: float | None = None,
              late_nms_iou: float = 0.5, score_floor: float = 0.0, cache: dict | None = None) -> FrameOutput:
    """Detect on one scene from agent 0's point of view.

    ``cache`` (optional dict) memoises per-agent query sets across calls with the
    same model, scene and seed, e.g. when several modes or noise levels are evaluated.
    """
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}; expected one of {MODES}")
    rng = np.random.default_rng(seed)
    gt = eval_ground_truth(scene)
    ego_pose = scene.poses[0]
    with no_grad():
        qsets = [_agent_queries(model, scene, 0, seed, cache)]
        if mode != "no_fusion":
            qsets += [_agent_queries(model, scene, a, seed, cache) for a in range(1, scene.n_agents)]
        ego = qsets[0]
        messages: list[QueryMessage] = []
        for a in range(1, len(qsets)):
            pose = _noisy_pose(scene.poses[a], noise, rng)
            wire = serialize(make_message(a, qsets[a].features.data, qsets[a].refs.data, pose))
            messages.append(deserialize(wire))
        messages = enforce_budget(messages, budget)
        received = [Received.from_message(m, ego_pose) for m in messages]
        if mode == "no_fusion" or (mode == "coop" and not received):
            out = model.ego_only(ego)
            boxes, scores = out.boxes, out.scores
        elif mode in ("coop", "no_sqm"):
            out = model.fuse(ego, received, mu, use_sqm=(mode == "coop"))
            boxes, scores = out.boxes, out.scores
        else:
            parts = [model.ego_only(ego)]
            parts += [model.fuse(r, [], mu=1.0) for r in received]
            boxes = np.concatenate([p.boxes for p in parts])
            scores = np.concatenate([p.scores for p in parts])
            nms_iou = late_nms_iou
    if score_floor > 0 or nms_iou is not None:
        keep = scores >= score_floor
        boxes, scores = boxes[keep], scores[keep]
    if nms_iou is not None and len(boxes):
        keep = rotated_nms(boxes, scores, nms_iou)
        boxes, scores = boxes[keep], scores[keep]
    payload = sum(m.payload_bytes for m in messages) if mode != "no_fusion" else 0
    meta = sum(m.metadata_bytes for m in messages) if mode != "no_fusion" else 0
    return FrameOutput(FrameResult(boxes, scores, gt), messages, payload, meta)


# --------------------------------------------------------------------------
# training loss

@dataclass
class TrainingSample:
    scene: Scene
    visible: list[np.ndarray]  # per agent: visible boxes in that agent's frame
    coop_gt: np.ndarray  # boxes in ego range seen by some agent, ego frame

    @classmethod
    def from_scene(cls, scene: Scene) -> "TrainingSample":
        vis = scene.visibility() >= scene.spec.min_points
        per_agent = []
        for a in range(scene.n_agents):
            boxes = scene.boxes_in_frame(a, in_range=False)
            keep = vis[a] & scene.spec.detection_range.contains(boxes[:, :3])
            per_agent.append(boxes[keep])
        return cls(scene, per_agent, eval_ground_truth(scene))


def scene_loss(model: CoopModel, sample: TrainingSample, mu: float, weights: LossWeights = LossWeights(),
               aux: bool = True, single_weight: float = 1.0, seed: int = 0, use_sqm: bool = True,
               noise: PoseNoiseSpec | None = None, rng=None):
    """Cooperative set loss on the fused output plus per-agent (optionally per-layer) losses.

    ``noise`` perturbs the helper poses used for fusion (drawn from ``rng``); the
    targets stay in the true ego frame.
    """
    scene = sample.scene
    qsets = [model.queries(scene.clouds[a], a, seed) for a in range(scene.n_agents)]
    terms = {}
    single = None
    for a, qs in enumerate(qsets):
        layers = qs.layers if aux else qs.layers[-1:]
        for feats, refs in layers:
            logits, params = model.head(feats, refs.data)
            l, _ = set_loss(logits, params, sample.visible[a], weights)
            single = l if single is None else single + l
    single = single * (1.0 / max(len(qsets), 1))
    terms["single"] = float(single.data)
    loss = single * single_weight
    if scene.n_agents > 1:
        rng = np.random.default_rng(seed) if rng is None else rng
        received = [Received(qs.features, qs.refs.data.astype(np.float64), a,
                             relative_pose(_noisy_pose(scene.poses[a], noise, rng), scene.poses[0]).as_array())
                    for a, qs in enumerate(qsets) if a > 0]
        fused = model.fuse(qsets[0], received, mu, use_sqm=use_sqm)
        coop, _ = set_loss(fused.logits, fused.params, sample.coop_gt, weights)
        terms["coop"] = float(coop.data)
        loss = loss + coop
    return loss, terms
