"""Sparse corner detection, binary description and Hamming matching.

The detector is a segment-test corner detector on an image pyramid. Two
firing rules are used: the classic contiguous-arc test, and a junction rule
for four-quadrant corners (checkerboard-style X-junctions), which the pure
arc test is blind to by construction. The descriptor is a 256-bit
intensity-comparison code with a fixed comparison pattern so that identical
input always yields identical output.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

import cv2
import numpy as np

PYRAMID_LEVELS = 8
PYRAMID_SCALE = 1.2
DESCRIPTOR_BITS = 256
DESCRIPTOR_BYTES = DESCRIPTOR_BITS // 8
PATCH_RADIUS = 13
_BORDER = PATCH_RADIUS + 3  # descriptor patch plus detector circle

DEFAULT_GRID = 32
DEFAULT_PER_CELL_CAP = 4
DEFAULT_THRESHOLD = 20.0
DEFAULT_MAX_DISTANCE = 64
DEFAULT_RATIO = 0.8

# Bresenham circle of radius 3, clockwise from 12 o'clock.
_CIRCLE = np.array(
    [
        (0, -3), (1, -3), (2, -2), (3, -1), (3, 0), (3, 1), (2, 2), (1, 3),
        (0, 3), (-1, 3), (-2, 2), (-3, 1), (-3, 0), (-3, -1), (-2, -2), (-1, -3),
    ],
    dtype=np.int64,
)
_ARC_MIN = 9  # contiguous same-side pixels for the segment test
_JUNCTION_MIN = 4  # per-side count for the junction rule
_JUNCTION_MAX_RUN = 5  # junction arcs must stay short, else it is an edge


class MotionState(Enum):
    STATIC = "static"
    DYNAMIC = "dynamic"
    UNKNOWN = "unknown"


@dataclass
class Feature:
    """One detected corner in level-0 pixel coordinates."""

    pixel: np.ndarray  # (2,) sub-pixel (u, v)
    response: float
    descriptor: np.ndarray  # (32,) uint8, 256 bits
    depth: float | None = None  # meters, None when the depth map has no reading
    cluster_id: int | None = None
    status: MotionState = MotionState.UNKNOWN


@dataclass(frozen=True)
class Match:
    feature_index: int
    target: int
    hamming_distance: int


def _splitmix64(state: int):
    state = (state + 0x9E3779B97F4A7C15) & 0xFFFFFFFFFFFFFFFF
    z = state
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & 0xFFFFFFFFFFFFFFFF
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & 0xFFFFFFFFFFFFFFFF
    return state, z ^ (z >> 31)


def _make_pattern():
    # Self-contained generator: the table must never change between versions.
    state = 0xD1B54A32D192ED03
    offsets = np.empty((DESCRIPTOR_BITS, 4), dtype=np.int64)
    n = 0
    while n < DESCRIPTOR_BITS:
        vals = []
        for _ in range(4):
            state, z = _splitmix64(state)
            vals.append(int(z % (2 * PATCH_RADIUS + 1)) - PATCH_RADIUS)
        if vals[:2] == vals[2:]:
            continue
        offsets[n] = vals
        n += 1
    return offsets


_PATTERN = _make_pattern()


def _to_gray(image: np.ndarray) -> np.ndarray:
    if image.ndim == 3:
        image = cv2.cvtColor(image, cv2.COLOR_BGR2GRAY)
    return image


def _build_maxrun_lut() -> np.ndarray:
    """Max circular run length of set bits for every 16-bit ring pattern."""
    codes = np.arange(1 << 16, dtype=np.uint64)
    run = codes | (codes << np.uint64(16))
    out = np.zeros(1 << 16, dtype=np.uint8)
    for length in range(1, 17):
        out[(run & np.uint64(0xFFFF)) != 0] = length
        run &= run >> np.uint64(1)
    return out


_MAXRUN = _build_maxrun_lut()
_POW2 = (1 << np.arange(16, dtype=np.uint32)).astype(np.uint32)


def _pack_ring(flags: np.ndarray) -> np.ndarray:
    return flags.astype(np.uint32) @ _POW2


def _detect_level(gray: np.ndarray, threshold: float):
    """Corner pixels and responses at one pyramid level."""
    h, w = gray.shape
    img = gray.astype(np.int16)
    center8 = gray[_BORDER : h - _BORDER, _BORDER : w - _BORDER]

    # cheap prefilter on every second circle pixel; the diagonals matter for
    # axis-aligned junctions whose cardinal points sit on the edges themselves.
    # Both firing rules guarantee at least 4 differing pixels at even indices.
    differs = np.zeros(center8.shape, dtype=np.uint8)
    for k in range(0, 16, 2):
        dx, dy = _CIRCLE[k]
        shifted = gray[_BORDER + dy : h - _BORDER + dy, _BORDER + dx : w - _BORDER + dx]
        differs += cv2.absdiff(shifted, center8) > threshold
    cand_v, cand_u = np.nonzero(differs >= 4)
    if len(cand_v) == 0:
        return np.empty((0, 2)), np.empty(0), np.empty((0, 2), dtype=np.int64)
    cv_ = cand_v + _BORDER
    cu_ = cand_u + _BORDER

    flat = img.ravel()
    base = cv_.astype(np.int64) * w + cu_
    ring = np.empty((len(cv_), 16), dtype=np.int16)
    for k, (dx, dy) in enumerate(_CIRCLE):
        ring[:, k] = flat[base + (dy * w + dx)]
    c = flat[base][:, None]
    bright = ring > c + threshold
    dark = ring < c - threshold

    # count-based prune before the run-length logic: straight edges put all
    # their differing pixels on one side with fewer than 9 of them
    nb = bright.sum(axis=1)
    nd = dark.sum(axis=1)
    maybe = (nb >= _ARC_MIN) | (nd >= _ARC_MIN) | ((nb >= _JUNCTION_MIN) & (nd >= _JUNCTION_MIN))
    if not np.any(maybe):
        return np.empty((0, 2)), np.empty(0), np.empty((0, 2), dtype=np.int64)
    midx = np.nonzero(maybe)[0]
    b_m, d_m = bright[midx], dark[midx]

    run_b = _MAXRUN[_pack_ring(b_m)]
    run_d = _MAXRUN[_pack_ring(d_m)]
    segment = (run_b >= _ARC_MIN) | (run_d >= _ARC_MIN)
    junction = (
        (nb[midx] >= _JUNCTION_MIN)
        & (nd[midx] >= _JUNCTION_MIN)
        & (run_b <= _JUNCTION_MAX_RUN)
        & (run_d <= _JUNCTION_MAX_RUN)
    )
    kidx = midx[segment | junction]
    if len(kidx) == 0:
        return np.empty((0, 2)), np.empty(0), np.empty((0, 2), dtype=np.int64)

    cv_, cu_, ring, c = cv_[kidx], cu_[kidx], ring[kidx], c[kidx]
    diff = np.abs((ring - c).astype(np.int32))
    response = (diff * (bright[kidx] | dark[kidx])).sum(axis=1).astype(np.float64) - 16 * threshold

    # 3x3 non-maximum suppression on the sparse response map
    rmap = np.zeros((h, w), dtype=np.float32)
    rmap[cv_, cu_] = response
    dilated = cv2.dilate(rmap, np.ones((3, 3), dtype=np.uint8))
    is_max = rmap[cv_, cu_] >= dilated[cv_, cu_]
    cv_, cu_, response = cv_[is_max], cu_[is_max], response[is_max]

    # sub-pixel: response-weighted centroid of the 5x5 neighbourhood, which
    # also centers the symmetric firing quadruple around X-junctions
    off = np.arange(-2, 3)
    ov, ou = np.meshgrid(off, off, indexing="ij")
    patch = rmap[cv_[:, None] + ov.ravel()[None, :], cu_[:, None] + ou.ravel()[None, :]]
    wsum = patch.sum(axis=1)
    fu = cu_ + (patch @ ou.ravel()) / wsum
    fv = cv_ + (patch @ ov.ravel()) / wsum
    return np.stack([fu, fv], axis=1), response, np.stack([cu_, cv_], axis=1)


def _describe(gray_blur: np.ndarray, pts: np.ndarray) -> np.ndarray:
    """256-bit codes for integer keypoints (N, 2) on a smoothed level image."""
    n = len(pts)
    out = np.zeros((n, DESCRIPTOR_BYTES), dtype=np.uint8)
    if n == 0:
        return out
    u = pts[:, 0][:, None]
    v = pts[:, 1][:, None]
    a = gray_blur[v + _PATTERN[:, 1][None, :], u + _PATTERN[:, 0][None, :]]
    b = gray_blur[v + _PATTERN[:, 3][None, :], u + _PATTERN[:, 2][None, :]]
    bits = (a < b).astype(np.uint8)
    return np.packbits(bits, axis=1)


def _dedup_cross_level(pix: np.ndarray, lvl: np.ndarray, shape) -> np.ndarray:
    """Keep the finest-level detection within a 2 px radius.

    Same-level detections are already >= 2 px apart (non-max suppression at
    that level times its scale), so clashes only happen across levels. That
    spacing also guarantees at most one accepted feature per integer pixel,
    letting occupancy live in a dense image.
    """
    h, w = shape
    occ_u = np.full((h + 6, w + 6), np.inf, dtype=np.float64)
    occ_v = np.full((h + 6, w + 6), np.inf, dtype=np.float64)
    offs = [(du, dv) for du in (-2, -1, 0, 1, 2) for dv in (-2, -1, 0, 1, 2)]
    kept = []
    for level in range(int(lvl.max()) + 1):
        idx = np.nonzero(lvl == level)[0]
        if len(idx) == 0:
            continue
        u = pix[idx, 0]
        v = pix[idx, 1]
        ru = np.clip(np.rint(u).astype(np.int64), 0, w - 1) + 3
        rv = np.clip(np.rint(v).astype(np.int64), 0, h - 1) + 3
        if level > 0:
            best = np.full(len(idx), np.inf)
            for du, dv in offs:
                ou = occ_u[rv + dv, ru + du]
                ov = occ_v[rv + dv, ru + du]
                d2 = (ou - u) ** 2 + (ov - v) ** 2
                best = np.minimum(best, d2)
            ok = ~(best < 4.0)
            idx, u, v, ru, rv = idx[ok], u[ok], v[ok], ru[ok], rv[ok]
        occ_u[rv, ru] = u
        occ_v[rv, ru] = v
        kept.append(idx)
    return np.sort(np.concatenate(kept)) if kept else np.empty(0, dtype=np.int64)


def detect_and_describe(
    image: np.ndarray,
    grid: int = DEFAULT_GRID,
    per_cell_cap: int = DEFAULT_PER_CELL_CAP,
    threshold: float = DEFAULT_THRESHOLD,
) -> list[Feature]:
    """Detect corners over an 8-level pyramid, keep the strongest per grid
    cell, and describe them. Deterministic for identical input."""
    gray = _to_gray(np.asarray(image))
    levels = [gray]
    for lvl in range(1, PYRAMID_LEVELS):
        s = PYRAMID_SCALE**lvl
        size = (max(2 * _BORDER + 2, int(round(gray.shape[1] / s))),
                max(2 * _BORDER + 2, int(round(gray.shape[0] / s))))
        levels.append(cv2.resize(gray, size, interpolation=cv2.INTER_LINEAR))

    all_pix = []
    all_resp = []
    all_ipts = []
    all_lvl = []
    for lvl, img in enumerate(levels):
        sub, resp, ipts = _detect_level(img, threshold)
        if len(sub) == 0:
            continue
        scale = gray.shape[1] / img.shape[1]
        all_pix.append((sub + 0.5) * scale - 0.5)  # pixel-center alignment
        all_resp.append(resp)
        all_ipts.append(ipts)
        all_lvl.append(np.full(len(sub), lvl))
    if not all_pix:
        return []

    pix = np.concatenate(all_pix)
    resp = np.concatenate(all_resp)
    ipts = np.concatenate(all_ipts)
    lvl = np.concatenate(all_lvl)

    keep_idx = _dedup_cross_level(pix, lvl, gray.shape)
    pix, resp, ipts, lvl = pix[keep_idx], resp[keep_idx], ipts[keep_idx], lvl[keep_idx]

    # bucket by level-0 grid cell: finest level first (best localization),
    # then strongest response, with deterministic tie-breaks
    ncols = (gray.shape[1] + grid - 1) // grid
    cells = (pix[:, 1] // grid).astype(np.int64) * ncols + (pix[:, 0] // grid).astype(np.int64)
    order = np.lexsort((pix[:, 0], pix[:, 1], -resp, lvl, cells))
    chosen = []
    count_in_cell = 0
    prev_cell = -1
    for i in order:
        c = cells[i]
        if c != prev_cell:
            prev_cell = c
            count_in_cell = 0
        if count_in_cell >= per_cell_cap:
            continue
        count_in_cell += 1
        chosen.append(i)
    chosen = np.array(chosen)

    # describe only the survivors, per level, on smoothed images
    desc = np.zeros((len(chosen), DESCRIPTOR_BYTES), dtype=np.uint8)
    for l in np.unique(lvl[chosen]):
        sel = np.nonzero(lvl[chosen] == l)[0]
        blur = cv2.GaussianBlur(levels[int(l)], (7, 7), 2.0)
        desc[sel] = _describe(blur, ipts[chosen[sel]])

    return [
        Feature(pixel=pix[i].copy(), response=float(resp[i]), descriptor=desc[k])
        for k, i in enumerate(chosen)
    ]


def hamming_distances(query: np.ndarray, candidates: np.ndarray) -> np.ndarray:
    """All-pairs Hamming distance matrix for packed (N, 32) uint8 codes."""
    q = np.ascontiguousarray(query).view(np.uint64).reshape(len(query), -1)
    c = np.ascontiguousarray(candidates).view(np.uint64).reshape(len(candidates), -1)
    return np.bitwise_count(q[:, None, :] ^ c[None, :, :]).sum(axis=2, dtype=np.int32)


def match_features(
    query: np.ndarray,
    candidates: np.ndarray,
    max_distance: int = DEFAULT_MAX_DISTANCE,
    ratio: float = DEFAULT_RATIO,
) -> list[Match]:
    """Mutually-consistent nearest-neighbour matching with a ratio test.

    Returns one-to-one matches; ties break to the lowest candidate index.
    """
    if not 0 < ratio <= 1:
        raise ValueError("ratio must be in (0, 1]")
    if max_distance > DESCRIPTOR_BITS:
        raise ValueError("max_distance cannot exceed the descriptor length")
    if len(query) == 0 or len(candidates) == 0:
        return []
    d = hamming_distances(query, candidates)
    best_c = d.argmin(axis=1)
    best_d = d[np.arange(len(query)), best_c]
    if d.shape[1] >= 2:
        part = np.partition(d, 1, axis=1)
        second = part[:, 1]
    else:
        second = np.full(len(query), DESCRIPTOR_BITS + 1)
    best_q = d.argmin(axis=0)

    matches = []
    for i in range(len(query)):
        j = int(best_c[i])
        if best_d[i] > max_distance:
            continue
        if best_d[i] > ratio * second[i]:
            continue
        if best_q[j] != i:  # cross-check
            continue
        matches.append(Match(feature_index=i, target=j, hamming_distance=int(best_d[i])))
    return matches


def descriptor_matrix(features: list[Feature]) -> np.ndarray:
    if not features:
        return np.zeros((0, DESCRIPTOR_BYTES), dtype=np.uint8)
    return np.stack([f.descriptor for f in features])
