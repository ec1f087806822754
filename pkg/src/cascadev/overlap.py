"""3D box overlap (axis-aligned and yaw-rotated IoU) and greedy NMS.

Rotated IoU is computed as BEV polygon intersection area times vertical
extent overlap: the two footprints are convex quadrilaterals, so the
intersection comes from Sutherland-Hodgman clipping. Near-zero BEV
intersection areas (< 1e-12) are treated as empty.

All functions are pure and thread-safe.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import WrongVariantError
from .geometry import OrientedBox

_AREA_EPS = 1e-12


@dataclass(frozen=True, slots=True)
class Detection:
    """A scored, classified box attributed to the decoder stage that produced it."""

    box: OrientedBox
    score: float
    class_id: int
    stage: int = 1

    def __post_init__(self) -> None:
        if not (math.isfinite(self.score) and 0.0 <= self.score <= 1.0):
            raise ValueError(f"detection score outside [0, 1]: {self.score}")


def _axis_overlap(c1: float, s1: float, c2: float, s2: float) -> float:
    lo = max(c1 - s1 / 2.0, c2 - s2 / 2.0)
    hi = min(c1 + s1 / 2.0, c2 + s2 / 2.0)
    return max(0.0, hi - lo)


def iou_aabb(a: OrientedBox, b: OrientedBox) -> float:
    """Axis-aligned 3D IoU. Both boxes must have yaw 0.

    Raises WrongVariantError for a rotated box; use iou_rotated there.
    """
    if a.yaw != 0.0 or b.yaw != 0.0:
        raise WrongVariantError(
            f"axis-aligned IoU called on rotated boxes (yaws {a.yaw}, {b.yaw})"
        )
    ox = _axis_overlap(a.center.x, a.size[0], b.center.x, b.size[0])
    oy = _axis_overlap(a.center.y, a.size[1], b.center.y, b.size[1])
    oz = _axis_overlap(a.center.z, a.size[2], b.center.z, b.size[2])
    inter = ox * oy * oz
    if inter <= 0.0:
        return 0.0
    union = a.volume + b.volume - inter
    return inter / union


def bev_corners(box: OrientedBox) -> np.ndarray:
    """The box footprint as a (4, 2) array of corners, counterclockwise."""
    w, l, _ = box.size
    c = math.cos(box.yaw)
    s = math.sin(box.yaw)
    local = np.array(
        [
            [w / 2.0, l / 2.0],
            [-w / 2.0, l / 2.0],
            [-w / 2.0, -l / 2.0],
            [w / 2.0, -l / 2.0],
        ]
    )
    rot = np.array([[c, -s], [s, c]])
    return local @ rot.T + np.array([box.center.x, box.center.y])


def _polygon_area(poly: list[tuple[float, float]]) -> float:
    """Shoelace area; positive for counterclockwise vertex order."""
    n = len(poly)
    if n < 3:
        return 0.0
    acc = 0.0
    for i in range(n):
        x1, y1 = poly[i]
        x2, y2 = poly[(i + 1) % n]
        acc += x1 * y2 - x2 * y1
    return acc / 2.0


def _clip_convex(subject: list[tuple[float, float]], clip: np.ndarray) -> list[tuple[float, float]]:
    """Sutherland-Hodgman: clip a polygon against a counterclockwise convex one."""
    output = subject
    n = len(clip)
    for i in range(n):
        if not output:
            break
        ax, ay = clip[i]
        bx, by = clip[(i + 1) % n]
        ex, ey = bx - ax, by - ay
        input_list = output
        output = []
        prev = input_list[-1]
        prev_side = ex * (prev[1] - ay) - ey * (prev[0] - ax)
        for cur in input_list:
            cur_side = ex * (cur[1] - ay) - ey * (cur[0] - ax)
            if cur_side >= 0.0:
                if prev_side < 0.0:
                    t = prev_side / (prev_side - cur_side)
                    output.append(
                        (prev[0] + t * (cur[0] - prev[0]), prev[1] + t * (cur[1] - prev[1]))
                    )
                output.append(cur)
            elif prev_side >= 0.0:
                t = prev_side / (prev_side - cur_side)
                output.append(
                    (prev[0] + t * (cur[0] - prev[0]), prev[1] + t * (cur[1] - prev[1]))
                )
            prev, prev_side = cur, cur_side
    return output


def bev_intersection_area(a: OrientedBox, b: OrientedBox) -> float:
    """Footprint intersection area of two boxes; < 1e-12 collapses to 0."""
    poly = _clip_convex([tuple(p) for p in bev_corners(a)], bev_corners(b))
    area = abs(_polygon_area(poly))
    return 0.0 if area < _AREA_EPS else area


def iou_rotated(a: OrientedBox, b: OrientedBox) -> float:
    """Yaw-aware 3D IoU: BEV polygon intersection times z-extent overlap."""
    if a.center == b.center and a.size == b.size and a.yaw == b.yaw:
        return 1.0
    oz = _axis_overlap(a.center.z, a.size[2], b.center.z, b.size[2])
    if oz <= 0.0:
        return 0.0
    # Footprints cannot meet when the center gap exceeds both circumradii.
    gap = math.hypot(a.center.x - b.center.x, a.center.y - b.center.y)
    if gap > (math.hypot(*a.size[:2]) + math.hypot(*b.size[:2])) / 2.0:
        return 0.0
    area = bev_intersection_area(a, b)
    if area <= 0.0:
        return 0.0
    inter = area * oz
    union = a.volume + b.volume - inter
    return inter / union


def iou_mc(a: OrientedBox, b: OrientedBox, n_samples: int, seed: int = 0) -> tuple[float, float]:
    """Monte-Carlo IoU estimate and its standard error.

    Samples uniformly inside box a, counts the fraction landing in b,
    converts the hit rate to an intersection volume, and propagates the
    binomial error through the IoU ratio. Slow by design; this is the
    measurement oracle the analytic IoU is validated against.
    """
    rng = np.random.default_rng(seed)
    u = rng.random((3, n_samples))
    qx = (u[0] - 0.5) * a.size[0]
    qy = (u[1] - 0.5) * a.size[1]
    qz = (u[2] - 0.5) * a.size[2]
    # One composed transform takes a-frame samples straight into b's
    # frame: Rz(b)^T Rz(a) = Rz(a - b), plus the rotated center offset.
    c = math.cos(a.yaw - b.yaw)
    s = math.sin(a.yaw - b.yaw)
    cb = math.cos(b.yaw)
    sb = math.sin(b.yaw)
    dx = a.center.x - b.center.x
    dy = a.center.y - b.center.y
    tx = cb * dx + sb * dy
    ty = -sb * dx + cb * dy
    tz = a.center.z - b.center.z
    hits = (
        (np.abs(c * qx - s * qy + tx) <= b.size[0] / 2.0)
        & (np.abs(s * qx + c * qy + ty) <= b.size[1] / 2.0)
        & (np.abs(qz + tz) <= b.size[2] / 2.0)
    )
    p = float(np.mean(hits))
    inter = p * a.volume
    union = a.volume + b.volume - inter
    if union <= 0.0:
        return 0.0, 0.0
    iou = inter / union
    se_p = math.sqrt(max(p * (1.0 - p), 0.0) / n_samples)
    # d(iou)/d(inter) with union = volA + volB - inter:
    se_iou = (a.volume + b.volume) / union**2 * a.volume * se_p
    return iou, se_iou


def nms(dets: list[Detection], iou_threshold: float) -> list[int]:
    """Greedy class-wise NMS; returns kept indices into the input list.

    Detections are visited by descending score (ties by lower input
    index); one is suppressed iff its rotated IoU with an already-kept
    detection of the same class strictly exceeds the threshold.
    """
    if not (0.0 < iou_threshold < 1.0):
        raise ValueError(f"NMS IoU threshold must lie in (0, 1), got {iou_threshold}")
    order = sorted(range(len(dets)), key=lambda i: (-dets[i].score, i))
    kept: list[int] = []
    for i in order:
        suppressed = False
        for k in kept:
            if dets[k].class_id != dets[i].class_id:
                continue
            if iou_rotated(dets[k].box, dets[i].box) > iou_threshold:
                suppressed = True
                break
        if not suppressed:
            kept.append(i)
    return kept
