"""Cluster-wise dynamic-object detection from reprojection errors.

For every depth cluster, the average robust reprojection error of its matched
features is computed against the current pose hypothesis. Clusters whose
error stands out relative to the others are marked dynamic and their features
are withheld from pose estimation and mapping.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace

import numpy as np

from . import geometry
from .clustering import ClusterMap
from .features import Feature, MotionState
from .geometry import CameraIntrinsics, Pose

log = logging.getLogger(__name__)

DEFAULT_LAMBDA = 2.0
DEFAULT_MIN_MATCHES = 5


@dataclass(frozen=True)
class ClusterVerdict:
    cluster_id: int
    r: float  # average robust reprojection error, robust-cost units
    m: int  # matched feature count
    state: MotionState = MotionState.UNKNOWN


@dataclass(frozen=True)
class DetectionPolicy:
    """Threshold rule: dynamic iff r > max(tau_abs, lambda_rel * mean r).

    The absolute floor stops noise-only frames (mean r near zero) from
    producing spurious dynamic clusters.
    """

    lambda_rel: float = DEFAULT_LAMBDA
    tau_abs: float = 4.0  # huber cost of a 3 px residual at delta 2
    min_matches: int = DEFAULT_MIN_MATCHES

    def __post_init__(self):
        if self.lambda_rel <= 1:
            raise ValueError("lambda_rel must exceed 1")
        if self.tau_abs < 0:
            raise ValueError("tau_abs must be non-negative")
        if self.min_matches < 1:
            raise ValueError("min_matches must be >= 1")

    @staticmethod
    def for_delta(delta: float, lambda_rel: float = DEFAULT_LAMBDA,
                  min_matches: int = DEFAULT_MIN_MATCHES) -> "DetectionPolicy":
        """Absolute floor pinned to the robust cost of a 3 px residual."""
        return DetectionPolicy(lambda_rel, geometry.huber(9.0, delta), min_matches)


def compute_cluster_errors(
    pixels: np.ndarray,
    world_points: np.ndarray,
    cluster_ids: np.ndarray,
    pose: Pose,
    intr: CameraIntrinsics,
    cmap: ClusterMap,
    delta: float = geometry.DEFAULT_HUBER_DELTA,
) -> list[ClusterVerdict]:
    """Average robust reprojection error per cluster (states left unset).

    ``pixels`` are observed feature positions, ``world_points`` their matched
    3D correspondences, ``cluster_ids`` the feature-to-cluster assignment
    (-1 skips the feature). Points landing behind the camera under ``pose``
    are dropped from their cluster's average.
    """
    n_clusters = cmap.n_clusters
    pixels = np.asarray(pixels, dtype=np.float64).reshape(-1, 2)
    world_points = np.asarray(world_points, dtype=np.float64).reshape(-1, 3)
    cluster_ids = np.asarray(cluster_ids, dtype=np.int64).reshape(-1)

    cam_points = geometry.apply(geometry.inverse(pose), world_points)
    proj, in_front = geometry.project_many(cam_points, intr)
    usable = (cluster_ids >= 0) & in_front
    behind = int(((cluster_ids >= 0) & ~in_front).sum())
    if behind:
        log.debug("dropping %d matches behind the camera", behind)

    totals = np.zeros(n_clusters)
    counts = np.zeros(n_clusters, dtype=np.int64)
    if np.any(usable):
        err2 = ((pixels[usable] - proj[usable]) ** 2).sum(axis=1)
        cost = geometry.huber(err2, delta)
        cid = cluster_ids[usable]
        totals = np.bincount(cid, weights=cost, minlength=n_clusters)
        counts = np.bincount(cid, minlength=n_clusters)

    verdicts = []
    for j in range(n_clusters):
        m = int(counts[j])
        r = float(totals[j] / m) if m else 0.0
        verdicts.append(ClusterVerdict(cluster_id=j, r=r, m=m))
    return verdicts


def classify(verdicts: list[ClusterVerdict], policy: DetectionPolicy) -> list[ClusterVerdict]:
    """Set the static/dynamic/unknown state on each verdict.

    Clusters with too few matches stay unknown. If every eligible cluster
    would be dynamic, the frame is assumed to have a bad pose rather than a
    fully dynamic scene and nothing is rejected.
    """
    eligible = [v for v in verdicts if v.m >= policy.min_matches]
    if not eligible:
        return [replace(v, state=MotionState.UNKNOWN) for v in verdicts]

    mean_r = float(np.mean([v.r for v in eligible]))
    threshold = max(policy.tau_abs, policy.lambda_rel * mean_r)

    out = []
    n_dynamic = 0
    for v in verdicts:
        if v.m < policy.min_matches:
            out.append(replace(v, state=MotionState.UNKNOWN))
        elif v.r > threshold:
            out.append(replace(v, state=MotionState.DYNAMIC))
            n_dynamic += 1
        else:
            out.append(replace(v, state=MotionState.STATIC))

    if n_dynamic and n_dynamic == len(eligible):
        # global-motion safeguard: a uniformly bad fit is not a dynamic scene
        out = [
            replace(v, state=MotionState.STATIC) if v.state is MotionState.DYNAMIC else v
            for v in out
        ]
    return out


def mark_features(features: list[Feature], verdicts: list[ClusterVerdict]) -> int:
    """Propagate cluster states onto features; returns the dynamic count.

    Features in dynamic clusters become dynamic, features in static clusters
    become static; unknown clusters and unassigned features are untouched.
    A dynamic feature is never flipped back within a frame.
    """
    state_of = {v.cluster_id: v.state for v in verdicts}
    n_dynamic = 0
    for f in features:
        if f.cluster_id is None:
            continue
        state = state_of.get(f.cluster_id)
        if state is MotionState.DYNAMIC:
            f.status = MotionState.DYNAMIC
            n_dynamic += 1
        elif state is MotionState.STATIC and f.status is not MotionState.DYNAMIC:
            f.status = MotionState.STATIC
    return n_dynamic


def dump_verdicts(frame_id: int, verdicts: list[ClusterVerdict]) -> str:
    """One text line per cluster for offline inspection."""
    return "\n".join(
        f"{frame_id} {v.cluster_id} {v.m} {v.r:.6f} {v.state.value}" for v in verdicts
    )
