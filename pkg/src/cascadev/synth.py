"""Procedural scenes and the noisy stand-in predictor.

A scene is a handful of non-overlapping oriented boxes in a desk-scale
workspace, surface points sampled uniformly over each box's faces
(area-weighted), and uniform clutter points that lie inside no box.
Per-point features concatenate the offset to the owning box center and
the box's class one-hot, each with Gaussian noise, padded with noise to
a fixed width; clutter features are pure standard-normal noise. Point
order is shuffled so no consumer can rely on generation order.

The oracle predictor replaces a trained network: it matches a proposal
point to its containing box (else the nearest center) and emits the
true regression targets corrupted by configurable noise. All
randomness flows through counter-based generators keyed by the seed,
so identical (config, seed) pairs reproduce scenes and predictions
bit for bit.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .cascade import Prediction, Proposal
from .errors import PlacementError
from .geometry import (
    Deltas,
    OrientedBox,
    Point3,
    centerness,
    contains_points,
    encode_deltas,
    points_as_array,
)
from .overlap import iou_rotated

# Gap enforced between placed boxes so pairwise rotated IoU is robustly zero.
_PLACEMENT_GAP = 0.04
_PLACEMENT_RETRIES = 1000
_MIN_DECODED_SIZE = 0.01


def _rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(key=seed))


@dataclass(frozen=True, slots=True)
class SceneConfig:
    """Everything the generator needs apart from the seed."""

    num_gt: tuple[int, int] = (2, 4)
    size_range: tuple[tuple[float, float], ...] = ((0.45, 1.3), (0.45, 1.3), (0.4, 1.1))
    yaw_enabled: bool = False
    points_per_box: int = 260
    num_clutter: int = 900
    workspace: tuple[tuple[float, float], ...] = ((-4.0, 4.0), (-4.0, 4.0), (0.0, 2.6))
    num_classes: int = 5
    sigma_feature: float = 0.05
    feature_dim: int = 16

    def __post_init__(self) -> None:
        lo, hi = self.num_gt
        if not (1 <= lo <= hi):
            raise ValueError(f"invalid num_gt range {self.num_gt}")
        if len(self.size_range) != 3 or len(self.workspace) != 3:
            raise ValueError("size_range and workspace need one (lo, hi) pair per axis")
        for a, b in self.size_range:
            if not (0.0 < a <= b):
                raise ValueError(f"invalid size range ({a}, {b})")
        for a, b in self.workspace:
            if not (a < b):
                raise ValueError(f"invalid workspace extent ({a}, {b})")
        if self.points_per_box < 1 or self.num_clutter < 0:
            raise ValueError("need points_per_box >= 1 and num_clutter >= 0")
        if self.num_classes < 1:
            raise ValueError("need at least one class")
        if self.sigma_feature < 0.0:
            raise ValueError("sigma_feature must be >= 0")
        if self.feature_dim < 3 + self.num_classes:
            raise ValueError(
                f"feature_dim {self.feature_dim} too small for offset + "
                f"{self.num_classes}-class one-hot"
            )


@dataclass(frozen=True, slots=True)
class SyntheticScene:
    """Ground truth, points, features, and per-point ownership labels.

    point_gt_labels[i] is the owning box index for surface points and
    -1 for clutter.
    """

    gt_boxes: list[OrientedBox]
    points: list[Point3]
    features: np.ndarray
    point_gt_labels: list[int]
    seed: int
    config: SceneConfig

    @property
    def num_points(self) -> int:
        return len(self.points)


@dataclass(frozen=True, slots=True)
class OracleNoise:
    """Noise knobs for the stand-in predictor. All zeros = exact oracle."""

    sigma_delta: float = 0.0
    sigma_heading: float = 0.0
    p_class_flip: float = 0.0
    centerness_bias: float = 0.0

    def __post_init__(self) -> None:
        if self.sigma_delta < 0.0 or self.sigma_heading < 0.0 or self.centerness_bias < 0.0:
            raise ValueError("noise magnitudes must be >= 0")
        if not (0.0 <= self.p_class_flip < 1.0):
            raise ValueError(f"p_class_flip must lie in [0, 1), got {self.p_class_flip}")

    @property
    def is_exact(self) -> bool:
        return (
            self.sigma_delta == 0.0
            and self.sigma_heading == 0.0
            and self.p_class_flip == 0.0
            and self.centerness_bias == 0.0
        )


def _place_boxes(cfg: SceneConfig, rng: np.random.Generator) -> list[OrientedBox]:
    count = int(rng.integers(cfg.num_gt[0], cfg.num_gt[1] + 1))
    boxes: list[OrientedBox] = []
    (x0, x1), (y0, y1), (z0, z1) = cfg.workspace
    for _ in range(count):
        placed = False
        for _ in range(_PLACEMENT_RETRIES):
            size = tuple(float(rng.uniform(a, b)) for a, b in cfg.size_range)
            yaw = float(rng.uniform(-math.pi, math.pi)) if cfg.yaw_enabled else 0.0
            # Keep the whole footprint inside the workspace: yawed boxes
            # reserve their circumradius, axis-aligned ones their half-extent.
            if cfg.yaw_enabled:
                rx = ry = math.hypot(size[0], size[1]) / 2.0
            else:
                rx, ry = size[0] / 2.0, size[1] / 2.0
            rz = size[2] / 2.0
            if x1 - x0 < 2 * rx or y1 - y0 < 2 * ry or z1 - z0 < 2 * rz:
                continue
            center = Point3(
                float(rng.uniform(x0 + rx, x1 - rx)),
                float(rng.uniform(y0 + ry, y1 - ry)),
                float(rng.uniform(z0 + rz, z1 - rz)),
            )
            cand = OrientedBox(center, size, yaw=yaw, class_id=int(rng.integers(cfg.num_classes)))
            # Checking slightly inflated boxes keeps a real gap between
            # neighbors, so the zero-IoU invariant survives any epsilon.
            grown = OrientedBox(
                center,
                tuple(s + _PLACEMENT_GAP for s in size),
                yaw=yaw,
            )
            ok = all(
                iou_rotated(
                    grown,
                    OrientedBox(b.center, tuple(s + _PLACEMENT_GAP for s in b.size), yaw=b.yaw),
                )
                == 0.0
                for b in boxes
            )
            if ok:
                boxes.append(cand)
                placed = True
                break
        if not placed:
            raise PlacementError(
                f"could not place box {len(boxes) + 1} of {count} after "
                f"{_PLACEMENT_RETRIES} attempts; workspace too crowded"
            )
    return boxes


def _surface_points(box: OrientedBox, count: int, rng: np.random.Generator) -> np.ndarray:
    w, l, h = box.size
    areas = np.array([l * h, l * h, w * h, w * h, w * l, w * l])
    per_face = rng.multinomial(count, areas / areas.sum())
    local = np.empty((count, 3))
    row = 0
    for face, n in enumerate(per_face):
        if n == 0:
            continue
        u = rng.uniform(-0.5, 0.5, size=n)
        v = rng.uniform(-0.5, 0.5, size=n)
        block = local[row : row + n]
        axis = face // 2
        sign = 1.0 if face % 2 == 0 else -1.0
        if axis == 0:
            block[:, 0] = sign * w / 2.0
            block[:, 1] = u * l
            block[:, 2] = v * h
        elif axis == 1:
            block[:, 0] = u * w
            block[:, 1] = sign * l / 2.0
            block[:, 2] = v * h
        else:
            block[:, 0] = u * w
            block[:, 1] = v * l
            block[:, 2] = sign * h / 2.0
        row += n
    c, s = math.cos(box.yaw), math.sin(box.yaw)
    world = np.empty_like(local)
    world[:, 0] = c * local[:, 0] - s * local[:, 1] + box.center.x
    world[:, 1] = s * local[:, 0] + c * local[:, 1] + box.center.y
    world[:, 2] = local[:, 2] + box.center.z
    return world


def _clutter_points(cfg: SceneConfig, boxes: list[OrientedBox], rng: np.random.Generator) -> np.ndarray:
    lows = np.array([a for a, _ in cfg.workspace])
    highs = np.array([b for _, b in cfg.workspace])
    out: list[np.ndarray] = []
    need = cfg.num_clutter
    while need > 0:
        batch = rng.uniform(lows, highs, size=(max(need * 2, 64), 3))
        inside_any = np.zeros(len(batch), dtype=bool)
        for b in boxes:
            inside_any |= contains_points(b, batch)
        keep = batch[~inside_any][:need]
        out.append(keep)
        need -= len(keep)
    return np.concatenate(out) if out else np.zeros((0, 3))


def gen_scene(cfg: SceneConfig, seed: int) -> SyntheticScene:
    """Generate one scene deterministically from (cfg, seed)."""
    rng = _rng(seed)
    boxes = _place_boxes(cfg, rng)
    pts_blocks: list[np.ndarray] = []
    labels: list[int] = []
    for gi, box in enumerate(boxes):
        pts_blocks.append(_surface_points(box, cfg.points_per_box, rng))
        labels.extend([gi] * cfg.points_per_box)
    clutter = _clutter_points(cfg, boxes, rng)
    pts_blocks.append(clutter)
    labels.extend([-1] * len(clutter))
    pts = np.concatenate(pts_blocks)
    n = len(pts)

    feats = np.empty((n, cfg.feature_dim))
    label_arr = np.array(labels)
    for gi, box in enumerate(boxes):
        rows = label_arr == gi
        k = int(rows.sum())
        center = np.array([box.center.x, box.center.y, box.center.z])
        block = np.zeros((k, cfg.feature_dim))
        block[:, :3] = center - pts[rows] + rng.normal(0.0, cfg.sigma_feature, size=(k, 3))
        block[:, 3 + box.class_id] = 1.0
        block[:, 3 : 3 + cfg.num_classes] += rng.normal(
            0.0, cfg.sigma_feature, size=(k, cfg.num_classes)
        )
        pad = cfg.feature_dim - 3 - cfg.num_classes
        if pad:
            block[:, -pad:] = rng.normal(0.0, cfg.sigma_feature, size=(k, pad))
        feats[rows] = block
    clutter_rows = label_arr == -1
    feats[clutter_rows] = rng.normal(0.0, 1.0, size=(int(clutter_rows.sum()), cfg.feature_dim))

    perm = rng.permutation(n)
    pts = pts[perm]
    feats = feats[perm]
    label_list = [int(label_arr[i]) for i in perm]
    return SyntheticScene(
        gt_boxes=boxes,
        points=[Point3.from_array(p) for p in pts],
        features=feats,
        point_gt_labels=label_list,
        seed=seed,
        config=cfg,
    )


def match_point_to_gt(p: Point3, gts: list[OrientedBox]) -> int:
    """Containing box (smallest volume on ties), else nearest center."""
    best = -1
    best_vol = math.inf
    for gi, gt in enumerate(gts):
        q = encode_deltas(p, gt)
        if min(q.faces()) >= -1e-9 and gt.volume < best_vol:
            best = gi
            best_vol = gt.volume
    if best >= 0:
        return best
    centers = np.array([[g.center.x, g.center.y, g.center.z] for g in gts])
    dist = np.linalg.norm(centers - np.array([p.x, p.y, p.z]), axis=1)
    return int(np.argmin(dist))


def _guard_extents(d: np.ndarray) -> np.ndarray:
    """Shift delta pairs so every implied extent stays decodable."""
    out = d.copy()
    for axis in range(3):
        a, b = 2 * axis, 2 * axis + 1
        total = out[a] + out[b]
        if total < _MIN_DECODED_SIZE:
            shift = (_MIN_DECODED_SIZE - total) / 2.0
            out[a] += shift
            out[b] += shift
    return out


def oracle_predictor(scene: SyntheticScene, noise: OracleNoise, seed: int = 0):
    """A Proposal -> Prediction callable built from the scene's ground truth.

    Looks up the proposal point's box (containing, else nearest center)
    and emits the true targets under the configured noise. Class
    probabilities carry a trailing background entry, always zero here.
    Noise draws come from a generator keyed by (scene seed, seed), so
    call order is the only thing that must stay fixed for
    reproducibility; the cascade calls predictors sequentially.
    """
    if not scene.gt_boxes:
        raise ValueError("oracle needs at least one ground-truth box")
    rng = _rng((scene.seed << 1) ^ seed)
    n_classes = scene.config.num_classes

    def predict(proposal: Proposal) -> Prediction:
        gt = scene.gt_boxes[match_point_to_gt(proposal.point, scene.gt_boxes)]
        true = encode_deltas(proposal.point, gt)
        d = np.array(true.faces())
        if noise.sigma_delta > 0.0:
            d = d * rng.normal(1.0, noise.sigma_delta, size=6)
            d = _guard_extents(d)
        heading = gt.yaw
        if noise.sigma_heading > 0.0:
            heading += float(rng.normal(0.0, noise.sigma_heading))
        cls = gt.class_id
        if noise.p_class_flip > 0.0 and n_classes > 1 and rng.random() < noise.p_class_flip:
            others = [c for c in range(n_classes) if c != cls]
            cls = int(others[rng.integers(len(others))])
        probs = np.zeros(n_classes + 1)
        probs[cls] = 1.0
        c_true = centerness(true)
        c_pred = c_true
        if noise.centerness_bias > 0.0:
            c_pred = float(np.clip(c_true + noise.centerness_bias * rng.normal(), 0.0, 1.0))
        return Prediction(
            class_probs=probs,
            deltas=Deltas(*d, heading=heading),
            heading=heading,
            centerness=c_pred,
        )

    return predict


def scene_proposals(
    scene: SyntheticScene,
    predicted_centerness: list[float] | np.ndarray,
    b: int,
    *,
    denoising: bool = False,
    denoising_k: int = 1,
) -> list[Proposal]:
    """Top-b scene points by predicted centerness, as stage-1 proposals.

    With denoising=True, the denoising_k points nearest each
    ground-truth center (l1 distance) are appended with a pinned
    assignment to that box; those points are reassigned, never kept as
    plain candidates too, so no point carries two labels. denoising_k=1
    is the plain nearest-point rule; larger groups give a trainable
    head broader positive coverage during cold start.
    """
    from .assignment import select_top_b

    if denoising_k < 1:
        raise ValueError(f"need denoising_k >= 1, got {denoising_k}")
    group: list[tuple[int, int]] = []
    taken: set[int] = set()
    if denoising:
        coords = np.stack([p.as_array() for p in scene.points])
        for gi, g in enumerate(scene.gt_boxes):
            dist = np.abs(coords - g.center.as_array()).sum(axis=1)
            order = np.argsort(dist, kind="stable")[: min(denoising_k, len(dist))]
            group.extend((gi, int(pi)) for pi in order)
            taken.update(int(pi) for pi in order)
    chosen = [i for i in select_top_b(list(predicted_centerness), b + len(taken))
              if i not in taken][:b]
    props = [
        Proposal(point=scene.points[i], feature=scene.features[i].copy(), origin_index=i)
        for i in chosen
    ]
    for gi, pi in group:
        props.append(
            Proposal(
                point=scene.points[pi],
                feature=scene.features[pi].copy(),
                origin_index=pi,
                is_denoising=True,
                denoising_gt=gi,
            )
        )
    return props


def oracle_seed_centerness(scene: SyntheticScene, noise: OracleNoise, seed: int = 0) -> np.ndarray:
    """Per-point predicted centerness used to pick stage-1 proposals.

    Mirrors what a trained point head would supply: the true centerness
    of each point against its matched box, with the oracle's centerness
    noise applied. Draws come from a separate stream keyed alongside
    the oracle's, keeping selection independent of prediction noise.
    """
    vals = np.empty(scene.num_points)
    for i, p in enumerate(scene.points):
        gt = scene.gt_boxes[match_point_to_gt(p, scene.gt_boxes)]
        vals[i] = centerness(encode_deltas(p, gt))
    if noise.centerness_bias > 0.0:
        rng = _rng((scene.seed << 1) ^ seed ^ 0x5EED)
        vals = np.clip(vals + noise.centerness_bias * rng.normal(size=len(vals)), 0.0, 1.0)
    return vals
