"""Sparse map: frames, keyframes, 3D landmarks and their observation records.

The map enforces single-writer access through its lock; the tracking worker
holds it for a whole frame, the semantic worker acquires it between frames.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field

import numpy as np

from .clustering import ClusterMap
from .features import Feature
from .geometry import Pose


@dataclass
class Frame:
    id: int
    timestamp: float
    rgb: np.ndarray
    depth: np.ndarray
    features: list[Feature] = field(default_factory=list)
    pose: Pose | None = None  # camera-to-world, set after tracking
    cluster_map: ClusterMap | None = None

    def descriptors(self) -> np.ndarray:
        if not self.features:
            return np.zeros((0, 32), dtype=np.uint8)
        return np.stack([f.descriptor for f in self.features])

    def pixels(self) -> np.ndarray:
        if not self.features:
            return np.zeros((0, 2))
        return np.stack([f.pixel for f in self.features])


@dataclass
class MapPoint:
    id: int
    position: np.ndarray  # (3,) world meters
    descriptor: np.ndarray  # (32,) uint8
    observations: dict[int, int] = field(default_factory=dict)  # keyframe id -> feature index
    removed: bool = False  # status: static while False


class KeyFrame:
    """A retained frame with feature-to-map-point associations."""

    def __init__(self, frame: Frame):
        self.id = frame.id
        self.timestamp = frame.timestamp
        self.frame = frame
        self.pose: Pose = frame.pose
        # feature index -> map point id, -1 when unassociated
        self.point_ids = np.full(len(frame.features), -1, dtype=np.int64)
        self.semantic_filtered = False
        self.mask_attempts = 0

    @property
    def features(self) -> list[Feature]:
        return self.frame.features

    def tracked_point_count(self) -> int:
        return int((self.point_ids >= 0).sum())


class Map:
    """Keyframes plus landmarks with one-writer-at-a-time discipline."""

    def __init__(self):
        self.lock = threading.RLock()
        self.points: dict[int, MapPoint] = {}
        self.keyframes: dict[int, KeyFrame] = {}
        self._next_point_id = 0

    def new_point(self, position, descriptor) -> MapPoint:
        p = MapPoint(self._next_point_id, np.asarray(position, dtype=np.float64), descriptor)
        self._next_point_id += 1
        self.points[p.id] = p
        return p

    def add_keyframe(self, kf: KeyFrame):
        self.keyframes[kf.id] = kf

    def add_observation(self, point: MapPoint, kf: KeyFrame, feature_index: int):
        point.observations[kf.id] = feature_index
        kf.point_ids[feature_index] = point.id

    def remove_observation(self, point: MapPoint, kf_id: int):
        """Drop one observation; the point dies when none remain."""
        idx = point.observations.pop(kf_id, None)
        if idx is not None:
            kf = self.keyframes.get(kf_id)
            if kf is not None and kf.point_ids[idx] == point.id:
                kf.point_ids[idx] = -1
        if not point.observations and not point.removed:
            self.delete_point(point)

    def delete_point(self, point: MapPoint):
        point.removed = True
        for kf_id, idx in list(point.observations.items()):
            kf = self.keyframes.get(kf_id)
            if kf is not None and kf.point_ids[idx] == point.id:
                kf.point_ids[idx] = -1
        point.observations.clear()
        self.points.pop(point.id, None)

    def static_points(self) -> list[MapPoint]:
        return [p for p in self.points.values() if not p.removed]

    def points_of(self, kf: KeyFrame) -> list[MapPoint]:
        out = []
        for pid in kf.point_ids:
            if pid >= 0:
                p = self.points.get(int(pid))
                if p is not None and not p.removed:
                    out.append(p)
        return out

    def covisible_keyframes(self, kf: KeyFrame, min_shared: int = 15) -> list[KeyFrame]:
        """Keyframes sharing at least ``min_shared`` map points with ``kf``."""
        shared: dict[int, int] = {}
        for pid in kf.point_ids:
            if pid < 0:
                continue
            p = self.points.get(int(pid))
            if p is None:
                continue
            for other_id in p.observations:
                if other_id != kf.id:
                    shared[other_id] = shared.get(other_id, 0) + 1
        return [
            self.keyframes[k] for k, n in sorted(shared.items()) if n >= min_shared and k in self.keyframes
        ]

    def local_points(self, kf: KeyFrame, min_shared: int = 15) -> list[MapPoint]:
        """Union of the reference keyframe's points and its covisible
        neighbours' points."""
        seen: dict[int, MapPoint] = {}
        for p in self.points_of(kf):
            seen[p.id] = p
        for nb in self.covisible_keyframes(kf, min_shared):
            for p in self.points_of(nb):
                seen[p.id] = p
        return [seen[k] for k in sorted(seen)]

    def audit(self):
        """Consistency check; raises AssertionError on violation."""
        for p in self.points.values():
            assert not p.removed, f"removed point {p.id} still registered"
            assert len(p.observations) >= 1, f"static point {p.id} has no observations"
            assert np.all(np.isfinite(p.position)), f"point {p.id} has non-finite position"
            for kf_id, idx in p.observations.items():
                kf = self.keyframes.get(kf_id)
                assert kf is not None, f"point {p.id} observes missing keyframe {kf_id}"
                assert kf.point_ids[idx] == p.id, (
                    f"keyframe {kf_id} slot {idx} does not point back to {p.id}"
                )
        for kf in self.keyframes.values():
            for idx, pid in enumerate(kf.point_ids):
                if pid < 0:
                    continue
                p = self.points.get(int(pid))
                assert p is not None, f"keyframe {kf.id} references removed point {pid}"
                assert p.observations.get(kf.id) == idx, (
                    f"association {kf.id}:{idx} missing from point {pid}"
                )
