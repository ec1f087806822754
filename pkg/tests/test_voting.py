import math

import numpy as np
import pytest

from cascadev.errors import WrongVariantError
from cascadev.geometry import OrientedBox, Point3, point_in_scaled_box
from cascadev.voting import ia_voting


def brute_force_vote(updated_point, box, source_points, source_features, weighting):
    # Direct double-loop evaluation of the weighted-average definition,
    # written without the shift trick or any vectorization.
    weights = []
    feats = []
    for p, f in zip(source_points, source_features):
        if not point_in_scaled_box(p, box, 0.5):
            continue
        d = math.dist((p.x, p.y, p.z), (updated_point.x, updated_point.y, updated_point.z))
        if weighting == "exp_neg_dist":
            weights.append(math.exp(-d))
        else:
            weights.append(-math.exp(d))
        feats.append(np.asarray(f, dtype=float))
    if not weights:
        return None
    total = sum(weights)
    return sum((w / total) * f for w, f in zip(weights, feats))


def rand_instance(rng, n_src=10, dim=4):
    box = OrientedBox(
        Point3(*rng.uniform(-1, 1, size=3)),
        tuple(rng.uniform(0.8, 2.5, size=3)),
        yaw=rng.uniform(-math.pi, math.pi),
    )
    pts = [Point3(*rng.uniform(-2, 2, size=3)) for _ in range(n_src)]
    feats = [rng.normal(size=dim) for _ in range(n_src)]
    p_upd = Point3(*rng.uniform(-1.5, 1.5, size=3))
    return p_upd, box, pts, feats


class TestVoting:
    def test_lone_inside_point_unchanged(self):
        box = OrientedBox(Point3(0, 0, 0), (1, 1, 1))
        pts = [Point3(0.1, 0.0, 0.0), Point3(5, 5, 5)]
        feats = [np.array([1.0, 2.0]), np.array([9.0, 9.0])]
        (out,) = ia_voting([Point3(0, 0, 0)], [box], pts, feats)
        assert out == pytest.approx(feats[0], abs=1e-12)

    def test_equidistant_pair_averages(self):
        box = OrientedBox(Point3(0, 0, 0), (2, 2, 2))
        pts = [Point3(0.5, 0, 0), Point3(-0.5, 0, 0)]
        feats = [np.array([2.0, 0.0]), np.array([0.0, 4.0])]
        (out,) = ia_voting([Point3(0, 0, 0)], [box], pts, feats)
        assert out == pytest.approx(np.array([1.0, 2.0]), abs=1e-12)

    @pytest.mark.parametrize("weighting", ["exp_neg_dist", "literal"])
    def test_matches_double_loop(self, weighting):
        rng = np.random.default_rng(41)
        checked = 0
        for _ in range(300):
            p_upd, box, pts, feats = rand_instance(rng)
            ref = brute_force_vote(p_upd, box, pts, feats, weighting)
            if ref is None:
                continue
            (out,) = ia_voting([p_upd], [box], pts, feats, weighting=weighting, prior_features=[np.zeros(4)])
            assert out == pytest.approx(ref, abs=1e-12)
            checked += 1
        assert checked > 100

    def test_output_in_componentwise_hull(self):
        rng = np.random.default_rng(42)
        for _ in range(100):
            p_upd, box, pts, feats = rand_instance(rng, n_src=15)
            inside = [f for p, f in zip(pts, feats) if point_in_scaled_box(p, box, 0.5)]
            if not inside:
                continue
            (out,) = ia_voting([p_upd], [box], pts, feats, prior_features=[np.zeros(4)])
            mat = np.array(inside)
            assert np.all(out >= mat.min(axis=0) - 1e-12)
            assert np.all(out <= mat.max(axis=0) + 1e-12)

    def test_outside_points_have_zero_influence(self):
        rng = np.random.default_rng(43)
        box = OrientedBox(Point3(0, 0, 0), (1.5, 1.5, 1.5), yaw=0.4)
        pts = [Point3(*rng.uniform(-3, 3, size=3)) for _ in range(30)]
        feats = [rng.normal(size=5) for _ in range(30)]
        p_upd = Point3(0.1, 0.1, 0.1)
        (base,) = ia_voting([p_upd], [box], pts, feats, prior_features=[np.zeros(5)])
        mutated = [
            f + 1000.0 if not point_in_scaled_box(p, box, 0.5) else f
            for p, f in zip(pts, feats)
        ]
        (after,) = ia_voting([p_upd], [box], pts, mutated, prior_features=[np.zeros(5)])
        assert after == pytest.approx(base, abs=1e-9)

    def test_source_permutation_invariance(self):
        rng = np.random.default_rng(44)
        p_upd, box, pts, feats = rand_instance(rng, n_src=20)
        (base,) = ia_voting([p_upd], [box], pts, feats, prior_features=[np.zeros(4)])
        perm = rng.permutation(20)
        (shuffled,) = ia_voting(
            [p_upd],
            [box],
            [pts[i] for i in perm],
            [feats[i] for i in perm],
            prior_features=[np.zeros(4)],
        )
        assert shuffled == pytest.approx(base, abs=1e-12)

    def test_empty_mask_keeps_prior(self):
        box = OrientedBox(Point3(50, 50, 50), (1, 1, 1))
        pts = [Point3(0, 0, 0)]
        feats = [np.array([3.0, 3.0])]
        prior = np.array([7.0, -1.0])
        (out,) = ia_voting([Point3(50, 50, 50)], [box], pts, feats, prior_features=[prior])
        assert out == pytest.approx(prior, abs=1e-12)

    def test_empty_mask_positional_fallback(self):
        # Sources align 1:1 with proposals, so the proposal's own feature
        # survives when its box is empty.
        box = OrientedBox(Point3(50, 50, 50), (1, 1, 1))
        pts = [Point3(0, 0, 0)]
        feats = [np.array([3.0, 4.0])]
        (out,) = ia_voting([Point3(0, 0, 0)], [box], pts, feats)
        assert out == pytest.approx(feats[0], abs=1e-12)

    def test_empty_mask_without_prior_errors(self):
        box = OrientedBox(Point3(50, 50, 50), (1, 1, 1))
        pts = [Point3(0, 0, 0), Point3(1, 1, 1)]
        feats = [np.array([1.0]), np.array([2.0])]
        with pytest.raises(ValueError):
            ia_voting([Point3(0, 0, 0)], [box], pts, feats)

    def test_literal_variant_prefers_far_points(self):
        box = OrientedBox(Point3(0, 0, 0), (2, 2, 2))
        pts = [Point3(0.0, 0, 0), Point3(0.9, 0, 0)]
        feats = [np.array([0.0]), np.array([1.0])]
        p_upd = Point3(0, 0, 0)
        (near_heavy,) = ia_voting([p_upd], [box], pts, feats)
        (far_heavy,) = ia_voting([p_upd], [box], pts, feats, weighting="literal")
        assert near_heavy[0] < 0.5
        assert far_heavy[0] > 0.5

    def test_unknown_weighting_rejected(self):
        box = OrientedBox(Point3(0, 0, 0), (1, 1, 1))
        with pytest.raises(WrongVariantError):
            ia_voting([Point3(0, 0, 0)], [box], [Point3(0, 0, 0)], [np.array([1.0])], weighting="idw")

    def test_dimension_mismatch_rejected(self):
        box = OrientedBox(Point3(0, 0, 0), (1, 1, 1))
        pts = [Point3(0, 0, 0), Point3(0.1, 0, 0)]
        feats = [np.array([1.0, 2.0]), np.array([1.0])]
        with pytest.raises(ValueError):
            ia_voting([Point3(0, 0, 0)], [box], pts, feats)

    def test_alignment_validation(self):
        box = OrientedBox(Point3(0, 0, 0), (1, 1, 1))
        with pytest.raises(ValueError):
            ia_voting([Point3(0, 0, 0)], [box, box], [Point3(0, 0, 0)], [np.array([1.0])])
        with pytest.raises(ValueError):
            ia_voting([Point3(0, 0, 0)], [box], [Point3(0, 0, 0)], [])

    def test_variance_reduction(self):
        # Shared true feature plus i.i.d. noise: the weighted average must
        # beat a single noisy copy in mean squared error.
        rng = np.random.default_rng(45)
        box = OrientedBox(Point3(0, 0, 0), (2, 2, 2))
        true = np.array([1.0, -2.0, 0.5, 3.0])
        pts = [Point3(*rng.uniform(-0.9, 0.9, size=3)) for _ in range(12)]
        p_upd = Point3(0, 0, 0)
        agg_se = []
        single_se = []
        for _ in range(1000):
            noise = rng.normal(0.0, 0.3, size=(12, 4))
            feats = [true + noise[i] for i in range(12)]
            (out,) = ia_voting([p_upd], [box], pts, feats, prior_features=[np.zeros(4)])
            agg_se.append(float(np.sum((out - true) ** 2)))
            single_se.append(float(np.sum((feats[0] - true) ** 2)))
        agg_mse = np.mean(agg_se)
        single_mse = np.mean(single_se)
        assert agg_mse < single_mse
