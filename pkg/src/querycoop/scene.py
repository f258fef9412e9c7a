"""Synthetic multi-agent road scenes with ray-cast LiDAR and pose noise.

The world is a straight multi-lane road along x. Agents and target vehicles
sit in lanes. Each agent scans with a planar ray fan; a ray stops at the
first box footprint it meets, and the hit is lifted into 3-D by the LiDAR
beam elevations that land on the box's side surface. Boxes therefore shadow
whatever lies behind them, which is what makes cooperation worthwhile.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from typing import Sequence

import numpy as np

from .geometry import boxes_overlap_bev, cast_rays, rotation, wrap_angle

logger = logging.getLogger(__name__)

SCENE_SCHEMA = "querycoop.scene/1"

# paper-scale detection range; desk runs shrink it with DetectionRange.scaled
PAPER_X_RANGE = (-140.8, 140.8)
PAPER_Y_RANGE = (-40.0, 40.0)
PAPER_Z_RANGE = (-3.0, 1.0)


class SceneGenerationError(RuntimeError):
    """The requested layout could not be realised within the retry limit."""


@dataclass(frozen=True)
class AgentPose:
    x: float
    y: float
    z: float = 0.0
    yaw: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "yaw", wrap_angle(self.yaw))

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.z, self.yaw], dtype=np.float64)


@dataclass(frozen=True)
class GroundTruthBox:
    center: tuple[float, float, float]
    size: tuple[float, float, float]
    yaw: float
    object_id: int

    def __post_init__(self):
        if min(self.size) <= 0:
            raise ValueError(f"box sizes must be positive, got {self.size}")
        object.__setattr__(self, "yaw", wrap_angle(self.yaw))

    def as_array(self) -> np.ndarray:
        return np.array([*self.center, *self.size, self.yaw], dtype=np.float64)

    @classmethod
    def from_array(cls, arr, object_id: int) -> "GroundTruthBox":
        arr = [float(v) for v in arr]
        return cls(tuple(arr[:3]), tuple(arr[3:6]), arr[6], object_id)


@dataclass
class PointCloud:
    """``points`` is (N, 4): x, y, z, intensity in the frame of agent ``frame``."""

    points: np.ndarray
    frame: int

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 4)

    def __len__(self) -> int:
        return len(self.points)


@dataclass(frozen=True)
class PoseNoiseSpec:
    sigma_xyz: float = 0.0
    sigma_heading: float = 0.0  # degrees
    noise_z: bool = False

    def __post_init__(self):
        if self.sigma_xyz < 0 or self.sigma_heading < 0:
            raise ValueError("pose noise standard deviations must be non-negative")


@dataclass(frozen=True)
class DetectionRange:
    x: tuple[float, float] = PAPER_X_RANGE
    y: tuple[float, float] = PAPER_Y_RANGE
    z: tuple[float, float] = PAPER_Z_RANGE

    @classmethod
    def scaled(cls, factor: float) -> "DetectionRange":
        return cls((PAPER_X_RANGE[0] * factor, PAPER_X_RANGE[1] * factor),
                   (PAPER_Y_RANGE[0] * factor, PAPER_Y_RANGE[1] * factor), PAPER_Z_RANGE)

    def contains(self, xyz: np.ndarray) -> np.ndarray:
        xyz = np.atleast_2d(xyz)
        return ((xyz[:, 0] >= self.x[0]) & (xyz[:, 0] < self.x[1])
                & (xyz[:, 1] >= self.y[0]) & (xyz[:, 1] < self.y[1])
                & (xyz[:, 2] >= self.z[0]) & (xyz[:, 2] < self.z[1]))


@dataclass(frozen=True)
class LidarSpec:
    angular_resolution_deg: float = 0.4
    beam_elevations_deg: tuple[float, ...] = tuple(np.round(np.linspace(-15.0, 3.0, 16), 4))
    max_range: float = 80.0
    range_noise: float = 0.0  # synthetic sensor noise, metres; off by default

    def angles(self) -> np.ndarray:
        n = int(round(360.0 / self.angular_resolution_deg))
        return np.arange(n) * (2 * np.pi / n) - np.pi


@dataclass(frozen=True)
class SceneSpec:
    n_agents: int = 2
    n_objects: int = 6
    detection_range: DetectionRange = field(default_factory=lambda: DetectionRange.scaled(0.25))
    lidar: LidarSpec = field(default_factory=LidarSpec)
    occluder_policy: str = "random"  # random | occlusion
    lane_width: float = 3.5
    n_lanes: int = 4
    sensor_height: float = 1.8
    min_points: int = 5
    min_gap: float = 0.6
    max_retries: int = 200

    def validate(self) -> "SceneSpec":
        if not 1 <= self.n_agents <= 5:
            raise ValueError(f"n_agents must be in 1..5, got {self.n_agents}")
        if not 1 <= self.n_objects <= 20:
            raise ValueError(f"n_objects must be in 1..20, got {self.n_objects}")
        if self.occluder_policy not in ("random", "occlusion"):
            raise ValueError(f"unknown occluder policy {self.occluder_policy!r}")
        if self.occluder_policy == "occlusion" and self.n_agents < 2:
            raise ValueError("the occlusion policy needs at least two agents")
        r = self.detection_range
        for lo, hi, plo, phi in ((*r.x, *PAPER_X_RANGE), (*r.y, *PAPER_Y_RANGE), (*r.z, *PAPER_Z_RANGE)):
            if not (plo <= lo < hi <= phi):
                raise ValueError("detection range must lie inside the paper-scale range")
        return self


@dataclass
class Scene:
    poses: list[AgentPose]
    boxes: list[GroundTruthBox]
    clouds: list[PointCloud]
    spec: SceneSpec
    seed: int | None = None

    @property
    def n_agents(self) -> int:
        return len(self.poses)

    def box_array(self) -> np.ndarray:
        if not self.boxes:
            return np.zeros((0, 7))
        return np.stack([b.as_array() for b in self.boxes])

    def boxes_in_frame(self, agent: int, in_range: bool = True) -> np.ndarray:
        """Ground-truth boxes expressed in ``agent``'s frame."""
        boxes = transform_boxes(self.box_array(), WORLD, self.poses[agent])
        if in_range and len(boxes):
            boxes = boxes[self.spec.detection_range.contains(boxes[:, :3])]
        return boxes

    def visibility(self) -> np.ndarray:
        """(n_agents, n_boxes) count of points each agent has on each box."""
        counts = np.zeros((self.n_agents, len(self.boxes)), dtype=np.int64)
        for a, cloud in enumerate(self.clouds):
            world = transform_points(cloud, self.poses[a], WORLD).points
            counts[a] = _points_per_box(world, self.box_array())
        return counts


WORLD = AgentPose(0.0, 0.0, 0.0, 0.0)


# --------------------------------------------------------------------------
# frames

def _to_world(xyz: np.ndarray, pose: AgentPose) -> np.ndarray:
    out = np.empty_like(xyz)
    out[:, :2] = xyz[:, :2] @ rotation(pose.yaw).T + [pose.x, pose.y]
    out[:, 2] = xyz[:, 2] + pose.z
    return out


def _from_world(xyz: np.ndarray, pose: AgentPose) -> np.ndarray:
    out = np.empty_like(xyz)
    out[:, :2] = (xyz[:, :2] - [pose.x, pose.y]) @ rotation(pose.yaw)
    out[:, 2] = xyz[:, 2] - pose.z
    return out


def transform_xyz(xyz: np.ndarray, src: AgentPose, dst: AgentPose) -> np.ndarray:
    xyz = np.asarray(xyz, dtype=np.float64).reshape(-1, 3)
    return _from_world(_to_world(xyz, src), dst)


def transform_points(cloud: PointCloud, src: AgentPose, dst: AgentPose) -> PointCloud:
    """Re-express a cloud given in ``src``'s frame in ``dst``'s frame (SE(2) x z)."""
    pts = cloud.points.copy()
    pts[:, :3] = transform_xyz(pts[:, :3], src, dst)
    return PointCloud(pts, cloud.frame)


def transform_boxes(boxes: np.ndarray, src: AgentPose, dst: AgentPose) -> np.ndarray:
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 7).copy()
    if len(boxes):
        boxes[:, :3] = transform_xyz(boxes[:, :3], src, dst)
        boxes[:, 6] = wrap_angle(boxes[:, 6] + src.yaw - dst.yaw)
    return boxes


def relative_pose(src: AgentPose, dst: AgentPose) -> AgentPose:
    """Pose of ``src``'s origin expressed in ``dst``'s frame."""
    xyz = transform_xyz(np.zeros(3), src, dst)[0]
    return AgentPose(*xyz, yaw=src.yaw - dst.yaw)


def apply_pose_noise(pose: AgentPose, spec: PoseNoiseSpec, seed=None) -> AgentPose:
    """Gaussian localisation/heading error on a communicated pose."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    dx, dy, dz = rng.normal(0.0, spec.sigma_xyz, size=3) if spec.sigma_xyz > 0 else (0.0, 0.0, 0.0)
    dyaw = rng.normal(0.0, math.radians(spec.sigma_heading)) if spec.sigma_heading > 0 else 0.0
    return AgentPose(pose.x + dx, pose.y + dy, pose.z + (dz if spec.noise_z else 0.0), pose.yaw + dyaw)


# --------------------------------------------------------------------------
# LiDAR simulation

def _points_per_box(world_xyz: np.ndarray, boxes: np.ndarray, tol: float = 1e-3) -> np.ndarray:
    counts = np.zeros(len(boxes), dtype=np.int64)
    for i, b in enumerate(boxes):
        local = (world_xyz[:, :2] - b[:2]) @ rotation(b[6])
        inside = (np.abs(local[:, 0]) <= b[3] / 2 + tol) & (np.abs(local[:, 1]) <= b[4] / 2 + tol)
        counts[i] = int(inside.sum())
    return counts


def simulate_scan(pose: AgentPose, boxes: np.ndarray, lidar: LidarSpec, sensor_height: float,
                  intensities: Sequence[float] | None = None, rng=None) -> np.ndarray:
    """Ray-cast one agent's scan; returns (N, 4) points in the agent frame, unfiltered."""
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 7)
    local_boxes = transform_boxes(boxes, WORLD, pose)
    dist, hit = cast_rays(np.zeros(2), lidar.angles(), local_boxes, lidar.max_range)
    rays = np.nonzero(hit >= 0)[0]
    if len(rays) == 0:
        return np.zeros((0, 4))
    if intensities is None:
        intensities = np.full(len(boxes), 0.5)
    tan_el = np.tan(np.radians(np.asarray(lidar.beam_elevations_deg)))
    out = []
    angles = lidar.angles()
    ground = -sensor_height
    for r in rays:
        t = dist[r]
        b = local_boxes[hit[r]]
        z = t * tan_el
        lo, hi = b[2] - b[5] / 2, b[2] + b[5] / 2
        z = z[(z >= lo) & (z <= hi) & (z >= ground)]
        if len(z) == 0:
            continue
        tt = np.full(len(z), t)
        if lidar.range_noise > 0 and rng is not None:
            tt = tt + rng.normal(0.0, lidar.range_noise, size=len(z))
        xy = np.stack([tt * math.cos(angles[r]), tt * math.sin(angles[r])], axis=1)
        out.append(np.column_stack([xy, z, np.full(len(z), intensities[hit[r]])]))
    return np.concatenate(out) if out else np.zeros((0, 4))


def scan_agent(pose: AgentPose, boxes: np.ndarray, spec: SceneSpec, agent: int,
               intensities=None, rng=None) -> PointCloud:
    pts = simulate_scan(pose, boxes, spec.lidar, spec.sensor_height, intensities, rng)
    if len(pts):
        pts = pts[spec.detection_range.contains(pts[:, :3])]
    return PointCloud(pts, agent)


# --------------------------------------------------------------------------
# layout sampling

_AGENT_SIZE = (4.6, 1.9, 1.6)


def _lane_centers(spec: SceneSpec) -> np.ndarray:
    return (np.arange(spec.n_lanes) - (spec.n_lanes - 1) / 2) * spec.lane_width


def _heading_for_lane(lane_y: float, rng) -> float:
    # right-hand traffic: lanes with y < 0 drive along +x
    base = 0.0 if lane_y < 0 else math.pi
    return base + rng.uniform(-0.15, 0.15)


def _sample_vehicle(rng, spec: SceneSpec, x_lo: float, x_hi: float, lane_y=None) -> np.ndarray:
    lanes = _lane_centers(spec)
    if lane_y is None:
        lane_y = float(rng.choice(lanes))
    l, w, h = rng.uniform(3.8, 5.2), rng.uniform(1.7, 2.1), rng.uniform(1.4, 1.9)
    x = rng.uniform(x_lo, x_hi)
    y = lane_y + rng.uniform(-0.3, 0.3)
    z = -spec.sensor_height + h / 2
    return np.array([x, y, z, l, w, h, _heading_for_lane(lane_y, rng)])


def _free(candidate: np.ndarray, placed: list[np.ndarray], gap: float) -> bool:
    return not any(boxes_overlap_bev(candidate, other, margin=gap / 2) for other in placed)


def _sample_layout(rng, spec: SceneSpec):
    r = spec.detection_range
    span = (r.x[1] - r.x[0]) / 2
    lanes = _lane_centers(spec)
    footprints: list[np.ndarray] = []
    poses: list[AgentPose] = []
    # ego at the origin of the world frame, in a lane
    ego_lane = float(rng.choice(lanes))
    ego_yaw = _heading_for_lane(ego_lane, rng)
    poses.append(AgentPose(0.0, ego_lane, 0.0, ego_yaw))
    footprints.append(np.array([0.0, ego_lane, 0.0, *_AGENT_SIZE, ego_yaw]))
    for _ in range(spec.n_agents - 1):
        for _attempt in range(50):
            lane = float(rng.choice(lanes))
            x = rng.uniform(-0.7 * span, 0.7 * span)
            yaw = _heading_for_lane(lane, rng)
            fp = np.array([x, lane, 0.0, *_AGENT_SIZE, yaw])
            if _free(fp, footprints, spec.min_gap + 4.0):
                poses.append(AgentPose(x, lane, 0.0, yaw))
                footprints.append(fp)
                break
        else:
            return None
    boxes: list[np.ndarray] = []
    n_random = spec.n_objects
    if spec.occluder_policy == "occlusion":
        pair = _sample_occlusion_pair(rng, spec, footprints)
        if pair is None:
            return None
        boxes.extend(pair)
        n_random -= min(2, n_random)
    for _ in range(n_random):
        for _attempt in range(50):
            cand = _sample_vehicle(rng, spec, r.x[0] + 1.0, r.x[1] - 1.0)
            if _free(cand, footprints + boxes, spec.min_gap):
                boxes.append(cand)
                break
        else:
            return None
    return poses, boxes


def _sample_occlusion_pair(rng, spec: SceneSpec, footprints):
    """An occluder in the ego's lane-of-sight plus a vehicle right behind it."""
    ego = footprints[0]
    r = spec.detection_range
    direction = rng.choice([-1.0, 1.0])
    lanes = _lane_centers(spec)
    lane = float(lanes[np.argmin(np.abs(lanes - ego[1]))])
    near = rng.uniform(7.0, 0.35 * (r.x[1] - r.x[0]) / 2 + 7.0)
    occluder = _sample_vehicle(rng, spec, 0.0, 0.0, lane_y=lane)
    occluder[0] = ego[0] + direction * near
    occluder[1] = lane + rng.uniform(-0.1, 0.1)
    hidden = _sample_vehicle(rng, spec, 0.0, 0.0, lane_y=lane)
    hidden[0] = occluder[0] + direction * (occluder[3] / 2 + hidden[3] / 2 + rng.uniform(1.0, 4.0))
    hidden[1] = lane + rng.uniform(-0.15, 0.15)
    if not (r.x[0] + 1 < hidden[0] < r.x[1] - 1):
        return None
    for cand in (occluder, hidden):
        if not _free(cand, footprints, spec.min_gap):
            return None
    return [occluder, hidden]


def generate_scene(spec: SceneSpec, seed: int) -> Scene:
    """Sample a scene; deterministic in ``(spec, seed)``.

    Retries until every box is seen (``min_points``) by some agent and, for
    the ``occlusion`` policy, at least one box in the ego's range is hidden
    from the ego but seen by another agent.
    """
    spec.validate()
    rng = np.random.default_rng(seed)
    for attempt in range(spec.max_retries):
        layout = _sample_layout(rng, spec)
        if layout is None:
            continue
        poses, boxes = layout
        box_arr = np.stack(boxes)
        intensities = rng.uniform(0.2, 0.9, size=len(boxes))
        clouds = [scan_agent(p, box_arr, spec, a, intensities, rng) for a, p in enumerate(poses)]
        scene = Scene(poses, [GroundTruthBox.from_array(b, i) for i, b in enumerate(boxes)],
                      clouds, spec, seed)
        vis = scene.visibility()
        if not (vis.max(axis=0) >= spec.min_points).all():
            continue
        if spec.occluder_policy == "occlusion" and not _has_hidden_object(scene, vis):
            continue
        logger.debug("scene seed=%s accepted after %d attempts", seed, attempt + 1)
        return scene
    raise SceneGenerationError(f"no feasible layout after {spec.max_retries} attempts (seed={seed})")


def _has_hidden_object(scene: Scene, vis: np.ndarray) -> bool:
    in_range = scene.spec.detection_range.contains(scene.boxes_in_frame(0, in_range=False)[:, :3])
    hidden = (vis[0] < scene.spec.min_points) & (vis[1:].max(axis=0) >= scene.spec.min_points)
    return bool((hidden & in_range).any())


def hidden_from_ego(scene: Scene, agent: int = 0) -> np.ndarray:
    """Boolean mask over boxes: in ``agent``'s range but below ``min_points`` for it."""
    vis = scene.visibility()
    in_range = scene.spec.detection_range.contains(scene.boxes_in_frame(agent, in_range=False)[:, :3])
    return in_range & (vis[agent] < scene.spec.min_points)


# --------------------------------------------------------------------------
# JSON round trip

def _spec_to_dict(spec: SceneSpec) -> dict:
    return asdict(spec)


def _spec_from_dict(d: dict) -> SceneSpec:
    d = dict(d)
    rng = d.pop("detection_range")
    lidar = d.pop("lidar")
    lidar["beam_elevations_deg"] = tuple(lidar["beam_elevations_deg"])
    return SceneSpec(detection_range=DetectionRange(tuple(rng["x"]), tuple(rng["y"]), tuple(rng["z"])),
                     lidar=LidarSpec(**lidar), **d)


def scene_to_dict(scene: Scene) -> dict:
    return {
        "schema": SCENE_SCHEMA,
        "seed": scene.seed,
        "spec": _spec_to_dict(scene.spec),
        "agents": [{"id": i, "pose": asdict(p)} for i, p in enumerate(scene.poses)],
        "boxes": [{"id": b.object_id, "center": list(b.center), "size": list(b.size), "yaw": b.yaw}
                  for b in scene.boxes],
        "clouds": [{"agent": c.frame, "points": c.points.tolist()} for c in scene.clouds],
    }


def scene_from_dict(d: dict) -> Scene:
    if d.get("schema") != SCENE_SCHEMA:
        raise ValueError(f"unsupported scene schema {d.get('schema')!r}")
    poses = [AgentPose(**a["pose"]) for a in sorted(d["agents"], key=lambda a: a["id"])]
    boxes = [GroundTruthBox(tuple(b["center"]), tuple(b["size"]), b["yaw"], b["id"]) for b in d["boxes"]]
    clouds = [PointCloud(np.asarray(c["points"], dtype=np.float64).reshape(-1, 4), c["agent"])
              for c in sorted(d["clouds"], key=lambda c: c["agent"])]
    return Scene(poses, boxes, clouds, _spec_from_dict(d["spec"]), d.get("seed"))


def save_scene(scene: Scene, path) -> None:
    with open(path, "w") as fh:
        json.dump(scene_to_dict(scene), fh)


def load_scene(path) -> Scene:
    with open(path) as fh:
        return scene_from_dict(json.load(fh))


def single_agent_view(scene: Scene, agent: int = 0) -> Scene:
    """The same world seen by one agent only (used for identity checks)."""
    return Scene([scene.poses[agent]], scene.boxes, [PointCloud(scene.clouds[agent].points, 0)],
                 replace(scene.spec, n_agents=1, occluder_policy="random"), scene.seed)
