"""Average precision and cascade statistics.

AP follows the greedy score-ordered protocol: detections are visited by
descending score, each claims the highest-IoU unmatched ground truth of
its class when that IoU clears the threshold, and the per-class AP is
the area under the monotonized precision-recall curve (continuous
all-point interpolation by default, 11-point by option). Classes absent
from the ground truth are excluded from the mean. Multi-scene
evaluation matches per scene and pools the scored outcomes per class.

Cascade statistics reduce stage traces to the quantities behind the
assignment and update analyses: per-stage positive counts, proposal
centerness before/after the point update, and the rank correlation
between a proposal's centerness and the IoU of the box it regressed.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np
from scipy import stats as _scipy_stats

from .cascade import StageTrace
from .errors import DataError, WrongVariantError
from .geometry import OrientedBox, Point3, centerness, encode_deltas
from .overlap import Detection, iou_aabb, iou_rotated
from .synth import match_point_to_gt

IOU_VARIANTS = ("rotated", "aabb")
AP_MODES = ("continuous", "11point")


@dataclass(frozen=True, slots=True)
class ThresholdResult:
    """Per-class AP and PR samples at one IoU threshold."""

    iou_threshold: float
    ap_per_class: dict[int, float]
    mean_ap: float
    pr_curves: dict[int, tuple[list[float], list[float]]]


@dataclass(frozen=True, slots=True)
class ApResult:
    """AP results across one or more IoU thresholds."""

    results: list[ThresholdResult]

    def at(self, iou_threshold: float) -> ThresholdResult:
        for r in self.results:
            if math.isclose(r.iou_threshold, iou_threshold, abs_tol=1e-12):
                return r
        raise KeyError(f"no result at IoU threshold {iou_threshold}")

    def mean_ap(self, iou_threshold: float) -> float:
        return self.at(iou_threshold).mean_ap


def _iou_fn(variant: str):
    if variant not in IOU_VARIANTS:
        raise WrongVariantError(f"unknown IoU variant {variant!r}, expected one of {IOU_VARIANTS}")
    return iou_rotated if variant == "rotated" else iou_aabb


def _check_gt_classes(gts: list[OrientedBox]) -> None:
    for g in gts:
        if g.class_id is None:
            raise DataError("ground-truth boxes must carry class ids for AP evaluation")


def _match_one_scene(
    dets: list[Detection], gts: list[OrientedBox], iou_threshold: float, iou_fn
) -> list[tuple[int, float, bool]]:
    """Greedy matching for one scene.

    Returns (class_id, score, is_tp) per detection whose class occurs in
    the ground truth, in descending score order within the scene.
    """
    gt_classes = {g.class_id for g in gts}
    order = sorted(range(len(dets)), key=lambda i: (-dets[i].score, i))
    matched = [False] * len(gts)
    out: list[tuple[int, float, bool]] = []
    for i in order:
        det = dets[i]
        if det.class_id not in gt_classes:
            continue
        best_gi = -1
        best_iou = 0.0
        for gi, gt in enumerate(gts):
            if gt.class_id != det.class_id or matched[gi]:
                continue
            v = iou_fn(det.box, gt)
            if v > best_iou:
                best_iou = v
                best_gi = gi
        if best_gi >= 0 and best_iou >= iou_threshold:
            matched[best_gi] = True
            out.append((det.class_id, det.score, True))
        else:
            out.append((det.class_id, det.score, False))
    return out


def _ap_from_curve(recalls: np.ndarray, precisions: np.ndarray, mode: str) -> float:
    if len(recalls) == 0:
        return 0.0
    if mode == "continuous":
        mono = np.maximum.accumulate(precisions[::-1])[::-1]
        prev_r = 0.0
        ap = 0.0
        for r, p in zip(recalls, mono):
            ap += (r - prev_r) * p
            prev_r = r
        return float(ap)
    grid = np.linspace(0.0, 1.0, 11)
    vals = []
    for g in grid:
        ok = recalls >= g - 1e-12
        vals.append(float(precisions[ok].max()) if ok.any() else 0.0)
    return float(np.mean(vals))


def _evaluate_pooled(
    pooled: list[tuple[int, float, bool, int, int]],
    gt_counts: dict[int, int],
    iou_threshold: float,
    ap_mode: str,
) -> ThresholdResult:
    ap_per_class: dict[int, float] = {}
    pr_curves: dict[int, tuple[list[float], list[float]]] = {}
    for cls in sorted(gt_counts):
        n_gt = gt_counts[cls]
        rows = [r for r in pooled if r[0] == cls]
        rows.sort(key=lambda r: (-r[1], r[3], r[4]))
        tp_cum = 0
        recalls: list[float] = []
        precisions: list[float] = []
        for rank, row in enumerate(rows, start=1):
            tp_cum += int(row[2])
            recalls.append(tp_cum / n_gt)
            precisions.append(tp_cum / rank)
        ap_per_class[cls] = _ap_from_curve(np.array(recalls), np.array(precisions), ap_mode)
        pr_curves[cls] = (recalls, precisions)
    mean_ap = float(np.mean(list(ap_per_class.values()))) if ap_per_class else 0.0
    return ThresholdResult(
        iou_threshold=iou_threshold,
        ap_per_class=ap_per_class,
        mean_ap=mean_ap,
        pr_curves=pr_curves,
    )


def evaluate_scenes(
    scene_results: list[tuple[list[Detection], list[OrientedBox]]],
    iou_thresholds: list[float],
    *,
    iou: str = "rotated",
    ap: str = "continuous",
) -> ApResult:
    """Pooled AP over several (detections, ground truth) scene pairs."""
    if ap not in AP_MODES:
        raise WrongVariantError(f"unknown AP mode {ap!r}, expected one of {AP_MODES}")
    fn = _iou_fn(iou)
    for _, gts in scene_results:
        _check_gt_classes(gts)
    results = []
    for thr in iou_thresholds:
        if not (0.0 < thr < 1.0):
            raise ValueError(f"IoU threshold must lie in (0, 1), got {thr}")
        pooled: list[tuple[int, float, bool, int, int]] = []
        gt_counts: dict[int, int] = {}
        for si, (dets, gts) in enumerate(scene_results):
            for g in gts:
                gt_counts[g.class_id] = gt_counts.get(g.class_id, 0) + 1
            for di, (cls, score, is_tp) in enumerate(_match_one_scene(dets, gts, thr, fn)):
                pooled.append((cls, score, is_tp, si, di))
        results.append(_evaluate_pooled(pooled, gt_counts, thr, ap))
    return ApResult(results=results)


def average_precision(
    dets: list[Detection],
    gts: list[OrientedBox],
    iou_threshold: float,
    *,
    iou: str = "rotated",
    ap: str = "continuous",
) -> ApResult:
    """Single-scene AP at one IoU threshold."""
    return evaluate_scenes([(dets, gts)], [iou_threshold], iou=iou, ap=ap)


def _spearman(x: list[float], y: list[float]) -> float:
    if len(x) < 2:
        return float("nan")
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        rho = _scipy_stats.spearmanr(x, y).statistic
    return float(rho)


@dataclass(frozen=True, slots=True)
class StageStats:
    """Aggregates for one stage across all traces (denoising excluded)."""

    stage: int
    mu: float | None
    positives: int
    mean_centerness_before: float
    median_centerness_before: float
    mean_centerness_after: float
    median_centerness_after: float
    spearman_rho: float
    pairs: list[tuple[float, float]]


@dataclass(frozen=True, slots=True)
class CascadeStats:
    stages: list[StageStats]
    gain_fraction: float
    pooled_spearman_rho: float

    @property
    def total_pairs(self) -> int:
        return sum(len(s.pairs) for s in self.stages)


def cascade_stats(traces: list[StageTrace]) -> CascadeStats:
    """Reduce traces to per-stage assignment/centerness/IoU aggregates.

    Every trace must carry ground truth. Per proposal and stage, the
    reference box is the containing (else nearest-center) ground truth
    of the stage's input point; "before" and "after" centerness are
    measured against it, as is the IoU of the decoded detection.
    Denoising proposals are ignored throughout.
    """
    if not traces:
        raise ValueError("cascade_stats needs at least one trace")
    num_stages = traces[0].num_stages
    for t in traces:
        if t.gts is None:
            raise DataError("cascade statistics need traces recorded with ground truth")
        if t.num_stages != num_stages:
            raise DataError("all traces must have the same number of stages")

    per_stage_before: list[list[float]] = [[] for _ in range(num_stages)]
    per_stage_after: list[list[float]] = [[] for _ in range(num_stages)]
    per_stage_pairs: list[list[tuple[float, float]]] = [[] for _ in range(num_stages)]
    per_stage_pos = [0] * num_stages
    mus: list[float | None] = [None] * num_stages

    for trace in traces:
        gts = trace.gts
        for si, rec in enumerate(trace.stages):
            if rec.mu is not None:
                mus[si] = rec.mu
            if rec.assignment is not None:
                per_stage_pos[si] += rec.assignment.num_regular_positives
            for pi, prop in enumerate(rec.proposals_in):
                if prop.is_denoising:
                    continue
                ref = gts[match_point_to_gt(prop.point, gts)]
                before = centerness(encode_deltas(prop.point, ref))
                after = centerness(encode_deltas(rec.updated_points[pi], ref))
                iou = iou_rotated(rec.detections[pi].box, ref)
                per_stage_before[si].append(before)
                per_stage_after[si].append(after)
                per_stage_pairs[si].append((before, iou))

    stages = []
    for si in range(num_stages):
        before = per_stage_before[si]
        after = per_stage_after[si]
        pairs = per_stage_pairs[si]
        stages.append(
            StageStats(
                stage=si + 1,
                mu=mus[si],
                positives=per_stage_pos[si],
                mean_centerness_before=float(np.mean(before)) if before else float("nan"),
                median_centerness_before=float(np.median(before)) if before else float("nan"),
                mean_centerness_after=float(np.mean(after)) if after else float("nan"),
                median_centerness_after=float(np.median(after)) if after else float("nan"),
                spearman_rho=_spearman([p[0] for p in pairs], [p[1] for p in pairs]),
                pairs=pairs,
            )
        )
    all_before = [v for vs in per_stage_before for v in vs]
    all_after = [v for vs in per_stage_after for v in vs]
    all_pairs = [p for ps in per_stage_pairs for p in ps]
    gains = sum(1 for b, a in zip(all_before, all_after) if a > b)
    return CascadeStats(
        stages=stages,
        gain_fraction=gains / len(all_before) if all_before else float("nan"),
        pooled_spearman_rho=_spearman([p[0] for p in all_pairs], [p[1] for p in all_pairs]),
    )
