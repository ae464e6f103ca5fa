"""Oriented 3D boxes shared by the generator, detector heads, elimination
labels, and metrics.

Convention: size = (w, l, h); at yaw 0, w spans x, l spans y, h spans z.
Yaw is a right-handed rotation about +z, normalized into (-pi, pi].
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .exceptions import ConfigError


def normalize_yaw(yaw: float) -> float:
    """Wrap into (-pi, pi]."""
    y = math.fmod(yaw + math.pi, 2.0 * math.pi)
    if y <= 0.0:
        y += 2.0 * math.pi
    return y - math.pi


@dataclass
class Box3D:
    center: tuple[float, float, float]
    size: tuple[float, float, float]
    yaw: float
    velocity: tuple[float, float] = (0.0, 0.0)
    class_id: int = 0
    score: float | None = None

    def __post_init__(self):
        self.center = tuple(float(v) for v in self.center)
        self.size = tuple(float(v) for v in self.size)
        if any(s <= 0 for s in self.size):
            raise ConfigError(f"box size must be strictly positive, got {self.size}")
        self.yaw = normalize_yaw(float(self.yaw))
        self.velocity = tuple(float(v) for v in self.velocity)

    def corners(self) -> np.ndarray:
        """The 8 corners, [8, 3]."""
        w, l, h = self.size
        sx = np.array([1, 1, 1, 1, -1, -1, -1, -1]) * (w / 2)
        sy = np.array([1, 1, -1, -1, 1, 1, -1, -1]) * (l / 2)
        sz = np.array([1, -1, 1, -1, 1, -1, 1, -1]) * (h / 2)
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        x = c * sx - s * sy + self.center[0]
        y = s * sx + c * sy + self.center[1]
        z = sz + self.center[2]
        return np.stack([x, y, z], axis=1)

    def bev_distance(self) -> float:
        return math.hypot(self.center[0], self.center[1])

    def to_dict(self) -> dict:
        d = {
            "center": list(self.center),
            "size": list(self.size),
            "yaw": self.yaw,
            "velocity": list(self.velocity),
            "class": self.class_id,
        }
        if self.score is not None:
            d["score"] = self.score
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "Box3D":
        return cls(center=tuple(d["center"]), size=tuple(d["size"]), yaw=d["yaw"],
                   velocity=tuple(d.get("velocity", (0.0, 0.0))),
                   class_id=int(d.get("class", 0)), score=d.get("score"))


def points_in_boxes(points: np.ndarray, boxes: list[Box3D],
                    dilation: float = 1.0) -> np.ndarray:
    """True for points inside any box after scaling each box's size by
    ``dilation`` about its center (inclusive boundaries)."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    inside = np.zeros(len(pts), dtype=bool)
    for box in boxes:
        d = pts - np.asarray(box.center)
        c, s = math.cos(box.yaw), math.sin(box.yaw)
        local_x = c * d[:, 0] + s * d[:, 1]
        local_y = -s * d[:, 0] + c * d[:, 1]
        hw, hl, hh = (v * dilation / 2.0 for v in box.size)
        inside |= (
            (np.abs(local_x) <= hw)
            & (np.abs(local_y) <= hl)
            & (np.abs(d[:, 2]) <= hh)
        )
    return inside


@dataclass
class DetectionSet:
    """Fixed-cardinality prediction set for one scene: one box per query,
    plus the raw per-class logits."""

    boxes: list[Box3D]
    logits: np.ndarray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        if self.logits is not None:
            self.logits = np.asarray(self.logits, dtype=np.float64)
            if self.logits.shape[0] != len(self.boxes):
                raise ConfigError("logits rows must match box count")

    def __len__(self) -> int:
        return len(self.boxes)

    def filtered(self, score_floor: float) -> list[Box3D]:
        return [b for b in self.boxes if (b.score or 0.0) >= score_floor]
