"""Binary query messages, budget enforcement and byte accounting.

Wire layout (little-endian)::

    magic  b"CQRY"       4 B
    version  u16         2 B
    sender   u16         2 B
    n_queries u32        4 B
    query_dim u32        4 B
    pose  4 x f32        (x, y, z, yaw)
    refs  n x 3 f32      row-major
    feats n x C f32      row-major

``payload_bytes`` counts only the query features; the header, pose and
reference points are reported as ``metadata_bytes``.
"""
from __future__ import annotations

import math
import struct
import threading
from dataclasses import dataclass, field

import numpy as np

from .scene import AgentPose

MAGIC = b"CQRY"
VERSION = 1
BYTES_PER_FLOAT = 4
MB = 10**6
_HEADER = struct.Struct("<4sHHII")
_POSE = struct.Struct("<4f")


class DecodeError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class QueryMessage:
    sender: int
    queries: np.ndarray  # (n, C) float32
    reference_points: np.ndarray  # (n, 3) float32
    sender_pose: np.ndarray  # (4,) float32: x, y, z, yaw

    def __post_init__(self):
        q = np.ascontiguousarray(self.queries, dtype="<f4")
        r = np.ascontiguousarray(self.reference_points, dtype="<f4")
        if q.ndim != 2 or r.shape != (q.shape[0], 3):
            raise ValueError(f"inconsistent message shapes {q.shape} / {r.shape}")
        object.__setattr__(self, "queries", q)
        object.__setattr__(self, "reference_points", r)
        pose = self.sender_pose
        if isinstance(pose, AgentPose):
            pose = pose.as_array()
        object.__setattr__(self, "sender_pose", np.asarray(pose, dtype="<f4").reshape(4))

    @property
    def n_queries(self) -> int:
        return self.queries.shape[0]

    @property
    def query_dim(self) -> int:
        return self.queries.shape[1]

    @property
    def payload_bytes(self) -> int:
        return payload_bytes(self.n_queries, self.query_dim)

    @property
    def metadata_bytes(self) -> int:
        return _HEADER.size + _POSE.size + self.n_queries * 3 * BYTES_PER_FLOAT

    @property
    def wire_bytes(self) -> int:
        return self.payload_bytes + self.metadata_bytes

    def __eq__(self, other) -> bool:
        if not isinstance(other, QueryMessage):
            return NotImplemented
        return (self.sender == other.sender
                and self.queries.shape == other.queries.shape
                and self.queries.tobytes() == other.queries.tobytes()
                and self.reference_points.tobytes() == other.reference_points.tobytes()
                and self.sender_pose.tobytes() == other.sender_pose.tobytes())


def payload_bytes(n_queries: int, query_dim: int, bytes_per_elem: int = BYTES_PER_FLOAT) -> int:
    return int(n_queries) * int(query_dim) * int(bytes_per_elem)


def to_mb(n_bytes: int, digits: int = 3) -> float:
    return round(n_bytes / MB, digits)


def bev_baseline_bytes(H: int, W: int, C: int, bytes_per_elem: int = 1) -> int:
    """Size of one dense BEV feature map."""
    if min(H, W, C, bytes_per_elem) <= 0:
        raise ValueError("dimensions must be positive")
    return int(H) * int(W) * int(C) * int(bytes_per_elem)


def make_message(sender: int, queries, reference_points, pose) -> QueryMessage:
    return QueryMessage(int(sender), np.asarray(queries), np.asarray(reference_points), pose)


def serialize(msg: QueryMessage) -> bytes:
    if not 0 <= msg.sender < 2**16:
        raise ValueError(f"sender id {msg.sender} does not fit in u16")
    head = _HEADER.pack(MAGIC, VERSION, msg.sender, msg.n_queries, msg.query_dim)
    return b"".join([head, _POSE.pack(*msg.sender_pose.tolist()),
                     msg.reference_points.tobytes(), msg.queries.tobytes()])


def deserialize(buf: bytes) -> QueryMessage:
    if len(buf) < _HEADER.size + _POSE.size:
        raise DecodeError("message shorter than header")
    magic, version, sender, n, c = _HEADER.unpack_from(buf, 0)
    if magic != MAGIC:
        raise DecodeError(f"bad magic {magic!r}")
    if version != VERSION:
        raise DecodeError(f"unsupported version {version}")
    expected = _HEADER.size + _POSE.size + 4 * n * (3 + c)
    if len(buf) != expected:
        raise DecodeError(f"expected {expected} bytes, got {len(buf)}")
    off = _HEADER.size
    pose = np.frombuffer(buf, "<f4", 4, off)
    off += _POSE.size
    refs = np.frombuffer(buf, "<f4", n * 3, off).reshape(n, 3)
    off += n * 3 * 4
    feats = np.frombuffer(buf, "<f4", n * c, off).reshape(n, c)
    return QueryMessage(sender, feats.copy(), refs.copy(), pose.copy())


def enforce_budget(messages: list[QueryMessage], budget: float) -> list[QueryMessage]:
    """Admit whole messages in ascending sender order while the payload total fits."""
    if budget < 0:
        raise ValueError("budget must be non-negative")
    admitted, used = [], 0
    for msg in sorted(messages, key=lambda m: m.sender):
        if used + msg.payload_bytes <= budget:
            admitted.append(msg)
            used += msg.payload_bytes
    return admitted


def log2_bytes(n: int) -> float | None:
    return math.log2(n) if n > 0 else None


@dataclass
class CommCollector:
    """Thread-safe per-frame byte tally."""

    frames: list[dict] = field(default_factory=list)
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False)

    def record(self, frame_id, messages: list[QueryMessage]) -> dict:
        payload = sum(m.payload_bytes for m in messages)
        meta = sum(m.metadata_bytes for m in messages)
        row = {"frame": frame_id, "messages": len(messages), "payload_bytes": payload,
               "metadata_bytes": meta, "log2_payload": log2_bytes(payload)}
        with self._lock:
            self.frames.append(row)
        return row

    def report(self) -> dict:
        return log_comm_volume(self.frames)


def log_comm_volume(frames: list[dict]) -> dict:
    """Per-frame and mean volumes, raw and log2-scaled."""
    totals = [int(f["payload_bytes"]) for f in frames]
    meta = [int(f.get("metadata_bytes", 0)) for f in frames]
    mean = float(np.mean(totals)) if totals else 0.0
    return {
        "n_frames": len(frames),
        "total_payload_bytes": int(sum(totals)),
        "total_metadata_bytes": int(sum(meta)),
        "mean_payload_bytes": mean,
        "mean_payload_mb": mean / MB,
        "log2_mean_payload": log2_bytes(mean),
        "per_frame": [{**f, "log2_payload": log2_bytes(int(f["payload_bytes"]))} for f in frames],
    }
