import math

import numpy as np
import pytest

from dynavo.clustering import ClusterMap
from dynavo.dynamics import (
    ClusterVerdict,
    DetectionPolicy,
    classify,
    compute_cluster_errors,
    dump_verdicts,
    mark_features,
)
from dynavo.features import Feature, MotionState
from dynavo.geometry import CameraIntrinsics, Pose, apply, compose, se3_exp

INTR = CameraIntrinsics(fx=525.0, fy=525.0, cx=319.5, cy=239.5, width=640, height=480)


def dummy_cmap(n_clusters):
    return ClusterMap(
        labels=np.zeros((1, 1), np.int32),
        centroids=np.zeros((n_clusters, 3)),
        counts=np.zeros(n_clusters, np.int64),
        n_clusters=n_clusters,
        stride=4,
        image_shape=(480, 640),
        objective_history=[],
    )


def make_scene(rng, n_points, pose):
    """World points visible from ``pose`` plus their exact projections."""
    cam = np.column_stack(
        [rng.uniform(-1, 1, n_points), rng.uniform(-0.8, 0.8, n_points), rng.uniform(1.0, 5.0, n_points)]
    )
    world = apply(pose, cam)
    pix = np.column_stack(
        [INTR.fx * cam[:, 0] / cam[:, 2] + INTR.cx, INTR.fy * cam[:, 1] / cam[:, 2] + INTR.cy]
    )
    return world, pix


def random_pose(rng):
    w = rng.normal(size=3) * 0.3
    return se3_exp(np.concatenate([w, rng.normal(size=3)]))


def test_exact_reprojection_gives_zero_errors():
    rng = np.random.default_rng(0)
    pose = random_pose(rng)
    world, pix = make_scene(rng, 60, pose)
    cids = rng.integers(0, 4, 60)
    verdicts = compute_cluster_errors(pix, world, cids, pose, INTR, dummy_cmap(4))
    for v in verdicts:
        assert v.r == pytest.approx(0.0, abs=1e-18)


def test_displaced_cluster_hand_oracle():
    # 10 observations displaced by exactly 5 px: huber(25, delta=2) = 2*(5-1) = 8
    rng = np.random.default_rng(1)
    pose = Pose.identity()
    world, pix = make_scene(rng, 30, pose)
    cids = np.array([0] * 10 + [1] * 10 + [2] * 10)
    pix = pix.copy()
    pix[:10, 0] += 3.0
    pix[:10, 1] += 4.0  # displacement norm exactly 5 px
    verdicts = compute_cluster_errors(pix, world, cids, pose, INTR, dummy_cmap(3), delta=2.0)
    assert verdicts[0].r == pytest.approx(8.0, abs=1e-12)
    assert verdicts[0].m == 10
    assert verdicts[1].r == pytest.approx(0.0, abs=1e-12)
    assert verdicts[2].r == pytest.approx(0.0, abs=1e-12)


def test_empty_cluster_reported_zero():
    rng = np.random.default_rng(2)
    pose = Pose.identity()
    world, pix = make_scene(rng, 10, pose)
    cids = np.zeros(10, dtype=int)  # cluster 1 gets nothing
    verdicts = compute_cluster_errors(pix, world, cids, pose, INTR, dummy_cmap(2))
    assert verdicts[1].r == 0.0
    assert verdicts[1].m == 0


def test_behind_camera_match_skipped():
    pose = Pose.identity()
    world = np.array([[0.0, 0.0, 2.0], [0.0, 0.0, -1.0]])
    pix = np.array([[319.5, 239.5], [100.0, 100.0]])
    cids = np.array([0, 0])
    verdicts = compute_cluster_errors(pix, world, cids, pose, INTR, dummy_cmap(1))
    assert verdicts[0].m == 1  # the behind-camera term dropped


def huber_scalar(s, delta):
    r = math.sqrt(s)
    return 0.5 * s if r <= delta else delta * (r - 0.5 * delta)


def brute_force_cluster_errors(pix, world, cids, pose, intr, n_clusters, delta):
    """Independent per-feature recomputation with scalar math."""
    r_cw = pose.rotation.T
    t_cw = -r_cw @ pose.translation
    totals = [0.0] * n_clusters
    counts = [0] * n_clusters
    for (u, v), p, c in zip(pix, world, cids):
        if c < 0:
            continue
        q = r_cw @ p + t_cw
        if q[2] <= 1e-12:
            continue
        du = u - (intr.fx * q[0] / q[2] + intr.cx)
        dv = v - (intr.fy * q[1] / q[2] + intr.cy)
        totals[c] += huber_scalar(du * du + dv * dv, delta)
        counts[c] += 1
    return [(totals[j] / counts[j] if counts[j] else 0.0, counts[j]) for j in range(n_clusters)]


def test_matches_brute_force_oracle():
    rng = np.random.default_rng(3)
    for _ in range(20):
        pose = random_pose(rng)
        n = int(rng.integers(20, 150))
        world, pix = make_scene(rng, n, pose)
        pix = pix + rng.normal(0, 4.0, size=pix.shape)
        cids = rng.integers(-1, 8, n)
        got = compute_cluster_errors(pix, world, cids, pose, INTR, dummy_cmap(8), delta=2.0)
        want = brute_force_cluster_errors(pix, world, cids, pose, INTR, 8, 2.0)
        for v, (r, m) in zip(got, want):
            assert v.m == m
            assert abs(v.r - r) < 1e-12


def test_quadratic_branch_scales_quadratically():
    # residuals below the knee: scaling them by k scales each r_j by k^2
    rng = np.random.default_rng(4)
    pose = Pose.identity()
    world, pix = make_scene(rng, 40, pose)
    cids = rng.integers(0, 3, 40)
    offsets = rng.normal(0, 0.2, size=pix.shape)  # well below delta=2
    r1 = compute_cluster_errors(pix + offsets, world, cids, pose, INTR, dummy_cmap(3))
    r2 = compute_cluster_errors(pix + 2 * offsets, world, cids, pose, INTR, dummy_cmap(3))
    for a, b in zip(r1, r2):
        if a.m:
            assert b.r == pytest.approx(4.0 * a.r, rel=1e-9)


def test_classify_arithmetic_oracle():
    verdicts = [ClusterVerdict(i, r, 10) for i, r in enumerate([0.1, 0.1, 0.1, 2.0])]
    policy = DetectionPolicy(lambda_rel=2.0, tau_abs=0.5, min_matches=5)
    out = classify(verdicts, policy)
    # mean = 0.575, threshold = max(0.5, 1.15) = 1.15
    assert [v.state for v in out] == [
        MotionState.STATIC,
        MotionState.STATIC,
        MotionState.STATIC,
        MotionState.DYNAMIC,
    ]


def test_classify_all_zero_static():
    verdicts = [ClusterVerdict(i, 0.0, 8) for i in range(5)]
    out = classify(verdicts, DetectionPolicy())
    assert all(v.state is MotionState.STATIC for v in out)


def test_single_eligible_cluster_never_dynamic():
    for r in (0.0, 5.0, 1e6):
        out = classify([ClusterVerdict(0, r, 99)], DetectionPolicy())
        assert out[0].state is MotionState.STATIC


def test_never_all_eligible_dynamic():
    # the safeguard plus lambda > 1 guarantee at least one eligible cluster
    # always survives as static, whatever the error distribution
    rng = np.random.default_rng(77)
    policy = DetectionPolicy(lambda_rel=1.000001, tau_abs=0.0001, min_matches=5)
    for _ in range(200):
        n = int(rng.integers(1, 10))
        verdicts = [ClusterVerdict(i, float(rng.uniform(0, 100)), 10) for i in range(n)]
        out = classify(verdicts, policy)
        assert any(v.state is MotionState.STATIC for v in out)


def test_too_few_matches_unknown():
    verdicts = [ClusterVerdict(0, 1.0, 2), ClusterVerdict(1, 0.1, 9)]
    out = classify(verdicts, DetectionPolicy(min_matches=5))
    assert out[0].state is MotionState.UNKNOWN
    assert out[1].state is MotionState.STATIC


def test_no_eligible_clusters_all_unknown():
    verdicts = [ClusterVerdict(0, 1.0, 1), ClusterVerdict(1, 2.0, 0)]
    out = classify(verdicts, DetectionPolicy(min_matches=5))
    assert all(v.state is MotionState.UNKNOWN for v in out)


def test_classify_invariant_to_order():
    rng = np.random.default_rng(6)
    verdicts = [ClusterVerdict(i, float(rng.uniform(0, 10)), int(rng.integers(0, 20))) for i in range(12)]
    policy = DetectionPolicy()
    base = {v.cluster_id: v.state for v in classify(verdicts, policy)}
    for seed in range(5):
        perm = list(np.random.default_rng(seed).permutation(12))
        shuffled = classify([verdicts[i] for i in perm], policy)
        assert {v.cluster_id: v.state for v in shuffled} == base


def test_zero_error_cluster_never_dynamic():
    verdicts = [ClusterVerdict(0, 0.0, 50), ClusterVerdict(1, 0.0, 50), ClusterVerdict(2, 9.0, 50)]
    out = classify(verdicts, DetectionPolicy(lambda_rel=2.0, tau_abs=0.1))
    assert out[0].state is MotionState.STATIC
    assert out[1].state is MotionState.STATIC
    assert out[2].state is MotionState.DYNAMIC  # 9 > 2 * 3


def make_features(cids):
    return [
        Feature(pixel=np.zeros(2), response=1.0, descriptor=np.zeros(32, np.uint8), cluster_id=c)
        for c in cids
    ]


def test_mark_features_no_dynamic_clusters():
    feats = make_features([0, 1, None])
    verdicts = [ClusterVerdict(0, 0.0, 9, MotionState.STATIC), ClusterVerdict(1, 0.0, 9, MotionState.STATIC)]
    n = mark_features(feats, verdicts)
    assert n == 0
    assert feats[0].status is MotionState.STATIC
    assert feats[2].status is MotionState.UNKNOWN


def test_mark_features_dynamic_cluster():
    feats = make_features([0] * 12 + [1] * 5)
    verdicts = [ClusterVerdict(0, 9.0, 12, MotionState.DYNAMIC), ClusterVerdict(1, 0.0, 5, MotionState.STATIC)]
    n = mark_features(feats, verdicts)
    assert n == 12
    assert all(f.status is MotionState.DYNAMIC for f in feats[:12])
    assert all(f.status is MotionState.STATIC for f in feats[12:])


def test_mark_features_never_unmarks_dynamic():
    feats = make_features([0])
    feats[0].status = MotionState.DYNAMIC
    verdicts = [ClusterVerdict(0, 0.0, 9, MotionState.STATIC)]
    mark_features(feats, verdicts)
    assert feats[0].status is MotionState.DYNAMIC


def test_dump_verdicts_format():
    verdicts = [ClusterVerdict(0, 1.25, 7, MotionState.STATIC)]
    line = dump_verdicts(3, verdicts)
    assert line == "3 0 7 1.250000 static"


def test_policy_validation():
    with pytest.raises(ValueError):
        DetectionPolicy(lambda_rel=1.0)
    with pytest.raises(ValueError):
        DetectionPolicy(tau_abs=-1)
    with pytest.raises(ValueError):
        DetectionPolicy(min_matches=0)


def test_policy_for_delta():
    p = DetectionPolicy.for_delta(2.0)
    assert p.tau_abs == pytest.approx(4.0)  # huber(9) = 2*(3-1)
