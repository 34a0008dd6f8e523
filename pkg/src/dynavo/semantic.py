"""Semantic mask ingestion and movable-object filtering of keyframes.

Masks come either from disk (one indexed PNG per keyframe timestamp) or from
a remote segmentation service. Segmentation itself happens elsewhere; this
module only consumes label images, derives the movable-class mask and purges
matching features and map points. Movable objects are removed even when they
are currently still: a parked car is not map-worthy.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import cv2
import numpy as np
import requests

from .features import MotionState
from .mapping import KeyFrame, Map

log = logging.getLogger(__name__)

VOC_CLASS_COUNT = 21  # background + 20 object classes

# person/vehicle/animal classes of the 20-class VOC labeling (0 = background)
DEFAULT_MOVABLE_CLASSES = frozenset(
    {
        1,  # aeroplane
        2,  # bicycle
        3,  # bird
        4,  # boat
        6,  # bus
        7,  # car
        8,  # cat
        10,  # cow
        12,  # dog
        13,  # horse
        14,  # motorbike
        15,  # person
        17,  # sheep
        19,  # train
    }
)
DEFAULT_DILATION_RADIUS = 3
REMOTE_TIMEOUT = 5.0
MAX_MASK_ATTEMPTS = 2


class MaskUnavailableError(Exception):
    """Mask could not be produced now; the keyframe stays unfiltered."""


class MaskProtocolError(MaskUnavailableError):
    """Provider answered with something that violates the mask contract."""


@dataclass(frozen=True)
class SemanticMask:
    labels: np.ndarray  # (H, W) uint8 class indices
    class_count: int = VOC_CLASS_COUNT

    def __post_init__(self):
        if self.labels.size and int(self.labels.max()) >= self.class_count:
            raise MaskProtocolError(
                f"label {int(self.labels.max())} outside {self.class_count} classes"
            )


@dataclass(frozen=True)
class MovableClassSet:
    classes: frozenset[int] = DEFAULT_MOVABLE_CLASSES
    dilation_radius: int = DEFAULT_DILATION_RADIUS

    def __post_init__(self):
        if self.dilation_radius < 0:
            raise ValueError("dilation_radius must be >= 0")


def mask_filename(timestamp: float) -> str:
    return f"{timestamp:.6f}.png"


class DirectoryMaskProvider:
    """Masks stored as indexed 8-bit PNG files named by frame timestamp."""

    def __init__(self, directory, class_count: int = VOC_CLASS_COUNT):
        self.directory = Path(directory)
        self.class_count = class_count

    def provide(self, timestamp: float, rgb: np.ndarray) -> SemanticMask:
        path = self.directory / mask_filename(timestamp)
        if not path.exists():
            raise MaskUnavailableError(f"no mask file {path}")
        labels = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
        if labels is None:
            raise MaskProtocolError(f"unreadable mask file {path}")
        if labels.ndim != 2 or labels.dtype != np.uint8:
            raise MaskProtocolError(f"mask {path} is not single-channel 8-bit")
        if labels.shape != rgb.shape[:2]:
            raise MaskProtocolError(
                f"mask {labels.shape} does not match frame {rgb.shape[:2]}"
            )
        return SemanticMask(labels, self.class_count)


class RemoteMaskProvider:
    """POSTs the RGB frame to ``<endpoint>/segment``; the body of a success
    response is the mask PNG in the same encoding as the file provider."""

    def __init__(self, endpoint: str, class_count: int = VOC_CLASS_COUNT,
                 timeout: float = REMOTE_TIMEOUT):
        self.url = endpoint.rstrip("/") + "/segment"
        self.class_count = class_count
        self.timeout = timeout

    def provide(self, timestamp: float, rgb: np.ndarray) -> SemanticMask:
        ok, buf = cv2.imencode(".png", rgb)
        if not ok:
            raise MaskUnavailableError("could not encode frame")
        try:
            resp = requests.post(
                self.url,
                data=buf.tobytes(),
                headers={"Content-Type": "image/png"},
                timeout=self.timeout,
            )
        except requests.RequestException as exc:
            raise MaskUnavailableError(f"segmentation request failed: {exc}") from exc
        if resp.status_code != 200:
            raise MaskUnavailableError(f"segmentation service returned {resp.status_code}")
        data = np.frombuffer(resp.content, dtype=np.uint8)
        labels = cv2.imdecode(data, cv2.IMREAD_UNCHANGED)
        if labels is None:
            raise MaskProtocolError("response is not a decodable image")
        if labels.ndim != 2 or labels.dtype != np.uint8:
            raise MaskProtocolError("mask is not single-channel 8-bit")
        if labels.shape != rgb.shape[:2]:
            raise MaskProtocolError(
                f"mask {labels.shape} does not match frame {rgb.shape[:2]}"
            )
        return SemanticMask(labels, self.class_count)


def disk_kernel(radius: int) -> np.ndarray:
    """Boolean disk: offsets with dx^2 + dy^2 <= (radius + 1/2)^2."""
    if radius == 0:
        return np.ones((1, 1), dtype=np.uint8)
    span = np.arange(-radius, radius + 1)
    dy, dx = np.meshgrid(span, span, indexing="ij")
    return (dx * dx + dy * dy <= (radius + 0.5) ** 2).astype(np.uint8)


def movable_mask(mask: SemanticMask, classes: MovableClassSet) -> np.ndarray:
    """Binary image of movable-class pixels, dilated to cover segmentation
    boundary leakage."""
    binary = np.isin(mask.labels, list(classes.classes)).astype(np.uint8)
    if classes.dilation_radius > 0 and binary.any():
        binary = cv2.dilate(binary, disk_kernel(classes.dilation_radius))
    return binary.astype(bool)


@dataclass(frozen=True)
class FilterResult:
    features_masked: int
    observations_removed: int
    points_deleted: int


def filter_keyframe(kf: KeyFrame, movable: np.ndarray, world_map: Map) -> FilterResult:
    """Mark masked features dynamic and purge their map-point observations.

    Map points keep living while any unmasked observation remains; a point
    whose last observation is removed disappears from the map. Idempotent:
    a second pass with the same mask changes nothing.
    """
    h, w = movable.shape
    features_masked = 0
    observations_removed = 0
    points_deleted = 0
    for idx, feat in enumerate(kf.features):
        u = min(max(int(round(feat.pixel[0])), 0), w - 1)
        v = min(max(int(round(feat.pixel[1])), 0), h - 1)
        if not movable[v, u]:
            continue
        if feat.status is not MotionState.DYNAMIC:
            feat.status = MotionState.DYNAMIC
            features_masked += 1
        pid = int(kf.point_ids[idx])
        if pid >= 0:
            point = world_map.points.get(pid)
            if point is not None:
                observations_removed += 1
                world_map.remove_observation(point, kf.id)
                if point.removed:
                    points_deleted += 1
    return FilterResult(features_masked, observations_removed, points_deleted)


class SemanticWorker:
    """Applies keyframe mask filtering, inline or on a polling schedule.

    A keyframe is retried once after a mask-unavailable answer, then skipped
    for good with a warning. ``poll`` runs pending work under the map lock
    and is the only entry point, so sync mode is deterministic.
    """

    def __init__(self, provider, classes: MovableClassSet, world_map: Map):
        self.provider = provider
        self.classes = classes
        self.map = world_map
        self.pending: list[KeyFrame] = []

    def submit(self, kf: KeyFrame):
        self.pending.append(kf)

    def poll(self) -> list[FilterResult]:
        results = []
        still_pending = []
        for kf in self.pending:
            kf.mask_attempts += 1
            try:
                mask = self.provider.provide(kf.timestamp, kf.frame.rgb)
            except MaskUnavailableError as exc:
                if kf.mask_attempts >= MAX_MASK_ATTEMPTS:
                    log.warning(
                        "keyframe %d left unfiltered after %d mask attempts: %s",
                        kf.id, kf.mask_attempts, exc,
                    )
                else:
                    still_pending.append(kf)
                continue
            movable = movable_mask(mask, self.classes)
            with self.map.lock:
                results.append(filter_keyframe(kf, movable, self.map))
                kf.semantic_filtered = True
        self.pending = still_pending
        return results
