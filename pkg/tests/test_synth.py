import math

import numpy as np
import pytest

from cascadev.cascade import Proposal
from cascadev.errors import PlacementError
from cascadev.geometry import Point3, decode_box, encode_deltas, point_in_scaled_box
from cascadev.overlap import iou_rotated
from cascadev.synth import (
    OracleNoise,
    SceneConfig,
    SyntheticScene,
    gen_scene,
    match_point_to_gt,
    oracle_predictor,
    oracle_seed_centerness,
    scene_proposals,
)

SMALL = SceneConfig(num_gt=(2, 3), points_per_box=60, num_clutter=150)


def scene_equal(a: SyntheticScene, b: SyntheticScene) -> bool:
    if len(a.gt_boxes) != len(b.gt_boxes) or a.num_points != b.num_points:
        return False
    for ba, bb in zip(a.gt_boxes, b.gt_boxes):
        if ba != bb:
            return False
    for pa, pb in zip(a.points, b.points):
        if pa != pb:
            return False
    return bool(np.array_equal(a.features, b.features)) and a.point_gt_labels == b.point_gt_labels


class TestGenScene:
    def test_deterministic(self):
        s1 = gen_scene(SMALL, 123)
        s2 = gen_scene(SMALL, 123)
        assert scene_equal(s1, s2)

    def test_different_seeds_differ(self):
        assert not scene_equal(gen_scene(SMALL, 1), gen_scene(SMALL, 2))

    def test_gt_count_in_range(self):
        for seed in range(30):
            s = gen_scene(SMALL, seed)
            assert 2 <= len(s.gt_boxes) <= 3
            for b in s.gt_boxes:
                assert 0 <= b.class_id < SMALL.num_classes

    def test_boxes_disjoint_and_inside_workspace(self):
        cfg = SceneConfig(num_gt=(3, 4), points_per_box=20, num_clutter=50, yaw_enabled=True)
        for seed in range(40):
            s = gen_scene(cfg, seed)
            for i, a in enumerate(s.gt_boxes):
                for b in s.gt_boxes[i + 1 :]:
                    assert iou_rotated(a, b) == 0.0
                r = math.hypot(a.size[0], a.size[1]) / 2.0
                (x0, x1), (y0, y1), (z0, z1) = cfg.workspace
                assert x0 + r <= a.center.x <= x1 - r + 1e-9
                assert y0 + r <= a.center.y <= y1 - r + 1e-9
                assert z0 + a.size[2] / 2.0 <= a.center.z <= z1 - a.size[2] / 2.0 + 1e-9

    def test_surface_points_on_faces(self):
        cfg = SceneConfig(num_gt=(2, 2), points_per_box=80, num_clutter=30, yaw_enabled=True)
        for seed in range(10):
            s = gen_scene(cfg, seed)
            for p, gi in zip(s.points, s.point_gt_labels):
                if gi < 0:
                    continue
                d = encode_deltas(p, s.gt_boxes[gi])
                fs = d.faces()
                assert min(fs) >= -1e-9  # never outside
                assert min(abs(v) for v in fs) <= 1e-9  # touching some face

    def test_clutter_outside_all_boxes(self):
        for seed in range(10):
            s = gen_scene(SMALL, seed)
            for p, gi in zip(s.points, s.point_gt_labels):
                if gi >= 0:
                    continue
                for b in s.gt_boxes:
                    assert not point_in_scaled_box(p, b, 0.5)

    def test_counts_and_shapes(self):
        s = gen_scene(SMALL, 5)
        expected = len(s.gt_boxes) * SMALL.points_per_box + SMALL.num_clutter
        assert s.num_points == expected
        assert s.features.shape == (expected, SMALL.feature_dim)
        assert len(s.point_gt_labels) == expected

    def test_point_order_shuffled(self):
        # Owning-box labels must not come out grouped by box.
        s = gen_scene(SMALL, 9)
        labels = s.point_gt_labels
        runs = sum(1 for a, b in zip(labels, labels[1:]) if a != b)
        assert runs > len(s.gt_boxes) + 1

    def test_noiseless_offset_feature_recovers_center(self):
        cfg = SceneConfig(num_gt=(2, 2), points_per_box=40, num_clutter=20, sigma_feature=0.0)
        s = gen_scene(cfg, 3)
        for i, (p, gi) in enumerate(zip(s.points, s.point_gt_labels)):
            if gi < 0:
                continue
            c = s.gt_boxes[gi].center
            rec = np.array([p.x, p.y, p.z]) + s.features[i, :3]
            assert rec == pytest.approx([c.x, c.y, c.z], abs=1e-9)
            assert s.features[i, 3 + s.gt_boxes[gi].class_id] == 1.0

    def test_placement_error_when_workspace_too_small(self):
        cfg = SceneConfig(
            num_gt=(6, 6),
            size_range=((1.0, 1.2), (1.0, 1.2), (0.5, 0.6)),
            points_per_box=5,
            num_clutter=0,
            workspace=((-1.4, 1.4), (-1.4, 1.4), (0.0, 1.0)),
        )
        with pytest.raises(PlacementError):
            gen_scene(cfg, 0)

    def test_config_validation(self):
        with pytest.raises(ValueError):
            SceneConfig(num_gt=(0, 2))
        with pytest.raises(ValueError):
            SceneConfig(num_gt=(3, 2))
        with pytest.raises(ValueError):
            SceneConfig(feature_dim=6)
        with pytest.raises(ValueError):
            SceneConfig(sigma_feature=-0.1)


class TestMatching:
    def test_containing_box_wins(self):
        s = gen_scene(SMALL, 11)
        for gi, box in enumerate(s.gt_boxes):
            assert match_point_to_gt(box.center, s.gt_boxes) == gi

    def test_far_point_gets_nearest_center(self):
        s = gen_scene(SMALL, 12)
        p = Point3(3.9, 3.9, 2.5)
        centers = [(g.center.x, g.center.y, g.center.z) for g in s.gt_boxes]
        dists = [math.dist((p.x, p.y, p.z), c) for c in centers]
        assert match_point_to_gt(p, s.gt_boxes) == int(np.argmin(dists))


class TestOracle:
    def test_exact_oracle_reproduces_gt(self):
        s = gen_scene(SMALL, 21)
        predict = oracle_predictor(s, OracleNoise())
        for i in range(0, s.num_points, 37):
            prop = Proposal(point=s.points[i], feature=s.features[i], origin_index=i)
            pred = predict(prop)
            gi = match_point_to_gt(s.points[i], s.gt_boxes)
            gt = s.gt_boxes[gi]
            box = decode_box(s.points[i], pred.deltas)
            assert box.center.x == pytest.approx(gt.center.x, abs=1e-9)
            assert box.center.y == pytest.approx(gt.center.y, abs=1e-9)
            assert box.center.z == pytest.approx(gt.center.z, abs=1e-9)
            assert box.size == pytest.approx(gt.size, abs=1e-9)
            assert int(np.argmax(pred.class_probs[:-1])) == gt.class_id
            assert pred.class_probs[-1] == 0.0
            assert pred.class_probs.sum() == pytest.approx(1.0, abs=1e-12)

    def test_exact_oracle_class_accuracy(self):
        s = gen_scene(SMALL, 22)
        predict = oracle_predictor(s, OracleNoise(p_class_flip=0.0))
        hits = 0
        n = 0
        for i, gi in enumerate(s.point_gt_labels):
            if gi < 0:
                continue
            pred = predict(Proposal(point=s.points[i], feature=s.features[i], origin_index=i))
            hits += int(np.argmax(pred.class_probs[:-1])) == s.gt_boxes[gi].class_id
            n += 1
        assert hits == n

    def test_class_flip_rate(self):
        s = gen_scene(SMALL, 23)
        predict = oracle_predictor(s, OracleNoise(p_class_flip=0.3), seed=7)
        flips = 0
        n = 2000
        for k in range(n):
            i = k % s.num_points
            gi = match_point_to_gt(s.points[i], s.gt_boxes)
            pred = predict(Proposal(point=s.points[i], feature=s.features[i], origin_index=i))
            flips += int(np.argmax(pred.class_probs[:-1])) != s.gt_boxes[gi].class_id
        assert 0.25 < flips / n < 0.35

    def test_iou_degrades_with_delta_noise(self):
        mean_ious = []
        for sigma in (0.0, 0.05, 0.1, 0.2):
            total = 0.0
            count = 0
            for seed in range(15):
                s = gen_scene(SMALL, 100 + seed)
                predict = oracle_predictor(s, OracleNoise(sigma_delta=sigma), seed=1)
                for i in range(0, s.num_points, 23):
                    gi = match_point_to_gt(s.points[i], s.gt_boxes)
                    pred = predict(
                        Proposal(point=s.points[i], feature=s.features[i], origin_index=i)
                    )
                    box = decode_box(s.points[i], pred.deltas)
                    total += iou_rotated(box, s.gt_boxes[gi])
                    count += 1
            mean_ious.append(total / count)
        assert all(a > b for a, b in zip(mean_ious, mean_ious[1:]))
        assert mean_ious[0] == pytest.approx(1.0, abs=1e-9)

    def test_noisy_deltas_always_decodable(self):
        # Large relative noise on far-away points must still produce legal sizes.
        s = gen_scene(SMALL, 24)
        predict = oracle_predictor(s, OracleNoise(sigma_delta=0.5), seed=3)
        for i in range(0, s.num_points, 11):
            pred = predict(Proposal(point=s.points[i], feature=s.features[i], origin_index=i))
            box = decode_box(s.points[i], pred.deltas)  # must not raise
            assert min(box.size) >= 0.01 - 1e-12

    def test_predictor_deterministic(self):
        s = gen_scene(SMALL, 25)
        noise = OracleNoise(sigma_delta=0.1, sigma_heading=0.05, p_class_flip=0.1, centerness_bias=0.1)
        outs = []
        for _ in range(2):
            predict = oracle_predictor(s, noise, seed=9)
            outs.append(
                [
                    predict(Proposal(point=s.points[i], feature=s.features[i], origin_index=i))
                    for i in range(50)
                ]
            )
        for a, b in zip(*outs):
            assert np.array_equal(a.class_probs, b.class_probs)
            assert a.deltas == b.deltas
            assert a.heading == b.heading
            assert a.centerness == b.centerness

    def test_centerness_clamped(self):
        s = gen_scene(SMALL, 26)
        predict = oracle_predictor(s, OracleNoise(centerness_bias=2.0), seed=4)
        for i in range(0, s.num_points, 13):
            pred = predict(Proposal(point=s.points[i], feature=s.features[i], origin_index=i))
            assert 0.0 <= pred.centerness <= 1.0

    def test_oracle_requires_gts(self):
        s = gen_scene(SMALL, 27)
        empty = SyntheticScene(
            gt_boxes=[],
            points=s.points,
            features=s.features,
            point_gt_labels=[-1] * s.num_points,
            seed=0,
            config=SMALL,
        )
        with pytest.raises(ValueError):
            oracle_predictor(empty, OracleNoise())

    def test_noise_validation(self):
        with pytest.raises(ValueError):
            OracleNoise(sigma_delta=-0.1)
        with pytest.raises(ValueError):
            OracleNoise(p_class_flip=1.0)


class TestProposalSelection:
    def test_top_b_with_denoising(self):
        s = gen_scene(SMALL, 31)
        cent = oracle_seed_centerness(s, OracleNoise(centerness_bias=0.1), seed=2)
        props = scene_proposals(s, cent, 32, denoising=True)
        assert len(props) == 32 + len(s.gt_boxes)
        regular = props[:32]
        assert all(not p.is_denoising for p in regular)
        pinned = props[32:]
        for gi, p in enumerate(pinned):
            assert p.is_denoising
            assert p.denoising_gt == gi
        # Denoising points are the l1-nearest scene points to each center.
        for gi, p in enumerate(pinned):
            c = s.gt_boxes[gi].center
            d_choice = abs(p.point.x - c.x) + abs(p.point.y - c.y) + abs(p.point.z - c.z)
            for q in s.points:
                d_other = abs(q.x - c.x) + abs(q.y - c.y) + abs(q.z - c.z)
                assert d_choice <= d_other + 1e-12

    def test_proposals_carry_scene_features(self):
        s = gen_scene(SMALL, 32)
        cent = np.zeros(s.num_points)
        props = scene_proposals(s, cent, 16)
        for p in props:
            assert np.array_equal(p.feature, s.features[p.origin_index])
            assert p.point == s.points[p.origin_index]
