"""Instance-aware feature voting.

Each proposal re-estimates its feature as a weighted average over the
source points that fall inside its predicted box (yaw-aware, boundary
inclusive). Points outside the box get exactly zero influence, which is
what distinguishes this from radius-ball grouping: the aggregation
region adapts to the predicted object extent.

Two weighting variants are available:

* "exp_neg_dist" (default): w ~ exp(-distance to the updated point),
  nearer points count more.
* "literal": w ~ exp(+distance) after normalization, farther points
  count more. Kept for side-by-side comparison.
"""

from __future__ import annotations

import numpy as np

from .errors import WrongVariantError
from .geometry import OrientedBox, Point3, contains_points, points_as_array

WEIGHTINGS = ("exp_neg_dist", "literal")


def _as_feature_matrix(features) -> np.ndarray:
    if len(features) == 0:
        return np.zeros((0, 0))
    try:
        mat = np.array([np.asarray(f, dtype=np.float64) for f in features])
    except ValueError as e:
        raise ValueError(f"feature dimensions inconsistent: {e}") from None
    if mat.ndim != 2:
        raise ValueError("features must be fixed-length 1-D vectors")
    if not np.all(np.isfinite(mat)):
        raise ValueError("features contain non-finite entries")
    return mat


def ia_voting(
    updated_points: list[Point3],
    predicted_boxes: list[OrientedBox],
    source_points: list[Point3],
    source_features,
    *,
    weighting: str = "exp_neg_dist",
    prior_features=None,
) -> list[np.ndarray]:
    """Aggregate source features inside each proposal's predicted box.

    updated_points and predicted_boxes align 1:1 (proposal i), as do
    source_points and source_features (source j). A proposal whose box
    contains no source point keeps its prior feature: prior_features[i]
    when given, else source_features[i] when sources align positionally
    with proposals.
    """
    if weighting not in WEIGHTINGS:
        raise WrongVariantError(f"unknown weighting {weighting!r}, expected one of {WEIGHTINGS}")
    if len(updated_points) != len(predicted_boxes):
        raise ValueError("updated_points and predicted_boxes must align 1:1")
    if len(source_points) != len(source_features):
        raise ValueError("source_points and source_features must align 1:1")
    feats = _as_feature_matrix(source_features)
    priors = _as_feature_matrix(prior_features) if prior_features is not None else None
    if priors is not None and len(priors) != len(updated_points):
        raise ValueError("prior_features must align 1:1 with proposals")
    if priors is not None and len(feats) and priors.shape[1] != feats.shape[1]:
        raise ValueError(
            f"prior feature dimension {priors.shape[1]} != source dimension {feats.shape[1]}"
        )
    src = points_as_array(source_points) if source_points else np.zeros((0, 3))

    out: list[np.ndarray] = []
    for i, (p, box) in enumerate(zip(updated_points, predicted_boxes)):
        mask = contains_points(box, src, mu=0.5) if len(src) else np.zeros(0, dtype=bool)
        if not mask.any():
            if priors is not None:
                out.append(priors[i].copy())
            elif len(feats) == len(updated_points):
                out.append(feats[i].copy())
            else:
                raise ValueError(
                    f"proposal {i} has an empty vote mask and no prior feature to fall back to"
                )
            continue
        dist = np.linalg.norm(src[mask] - np.array([p.x, p.y, p.z]), axis=1)
        # Shift before exponentiating; the normalization cancels the shift.
        if weighting == "exp_neg_dist":
            w = np.exp(-(dist - dist.min()))
        else:
            w = np.exp(dist - dist.max())
        w /= w.sum()
        out.append(w @ feats[mask])
    return out
