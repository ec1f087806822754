import numpy as np
import pytest

from cascadev.assignment import CpaSchedule, cpa_threshold
from cascadev.cascade import (
    Prediction,
    Proposal,
    StageTrace,
    ensemble_stages,
    run_cascade,
)
from cascadev.errors import PredictorOutputError
from cascadev.geometry import Deltas, Point3, centerness, encode_deltas
from cascadev.overlap import iou_rotated, nms
from cascadev.synth import (
    OracleNoise,
    SceneConfig,
    gen_scene,
    match_point_to_gt,
    oracle_predictor,
    oracle_seed_centerness,
    scene_proposals,
)

CFG = SceneConfig(num_gt=(2, 3), points_per_box=60, num_clutter=150)
SCHED = CpaSchedule(0.4, 0.2, 3)


def build(seed, noise, b=24, denoising=False):
    scene = gen_scene(CFG, seed)
    cent = oracle_seed_centerness(scene, noise, seed=1)
    props = scene_proposals(scene, cent, b, denoising=denoising)
    predict = oracle_predictor(scene, noise, seed=1)
    return scene, props, predict


class TestRunCascade:
    def test_single_stage(self):
        scene, props, predict = build(1, OracleNoise())
        trace = run_cascade(props, predict, CpaSchedule(0.4, 0.2, 1), scene.gt_boxes)
        assert trace.num_stages == 1
        rec = trace.stages[0]
        assert rec.stage == 1
        assert rec.mu == pytest.approx(0.2)
        assert len(rec.detections) == len(props)
        assert len(rec.updated_points) == len(props)
        assert rec.proposals_in == props

    def test_exact_oracle_stage1_detections_match_gt(self):
        scene, props, predict = build(2, OracleNoise())
        trace = run_cascade(props, predict, SCHED, scene.gt_boxes)
        for prop, det in zip(props, trace.stages[0].detections):
            gt = scene.gt_boxes[match_point_to_gt(prop.point, scene.gt_boxes)]
            assert iou_rotated(det.box, gt) == pytest.approx(1.0, abs=1e-9)
            assert det.class_id == gt.class_id

    def test_exact_oracle_updated_points_hit_centers(self):
        scene, props, predict = build(3, OracleNoise())
        trace = run_cascade(props, predict, SCHED, scene.gt_boxes)
        for prop, up in zip(props, trace.stages[0].updated_points):
            gt = scene.gt_boxes[match_point_to_gt(prop.point, scene.gt_boxes)]
            assert up.x == pytest.approx(gt.center.x, abs=1e-9)
            assert up.y == pytest.approx(gt.center.y, abs=1e-9)
            assert up.z == pytest.approx(gt.center.z, abs=1e-9)

    def test_exact_oracle_stage2_centerness_is_one(self):
        scene, props, predict = build(4, OracleNoise())
        trace = run_cascade(props, predict, SCHED, scene.gt_boxes)
        for rec in trace.stages[1:]:
            for prop in rec.proposals_in:
                gt = scene.gt_boxes[match_point_to_gt(prop.point, scene.gt_boxes)]
                c = centerness(encode_deltas(prop.point, gt))
                assert c == pytest.approx(1.0, abs=1e-9)

    def test_exact_oracle_fixed_point_after_stage2(self):
        scene, props, predict = build(5, OracleNoise())
        trace = run_cascade(props, predict, SCHED, scene.gt_boxes)
        s2, s3 = trace.stages[1], trace.stages[2]
        for d2, d3 in zip(s2.detections, s3.detections):
            assert iou_rotated(d2.box, d3.box) == pytest.approx(1.0, abs=1e-9)
        for p2, p3 in zip(s2.proposals_in, s3.proposals_in):
            assert p2.point.x == pytest.approx(p3.point.x, abs=1e-9)
            assert p2.point.z == pytest.approx(p3.point.z, abs=1e-9)

    def test_noisy_updates_raise_mean_centerness(self):
        gains = []
        for seed in range(10):
            scene, props, predict = build(50 + seed, OracleNoise(sigma_delta=0.1, centerness_bias=0.1))
            trace = run_cascade(props, predict, SCHED, scene.gt_boxes)
            rec = trace.stages[0]
            before = []
            after = []
            for prop, up in zip(rec.proposals_in, rec.updated_points):
                gt = scene.gt_boxes[match_point_to_gt(prop.point, scene.gt_boxes)]
                before.append(centerness(encode_deltas(prop.point, gt)))
                after.append(centerness(encode_deltas(up, gt)))
            gains.append(np.mean(after) - np.mean(before))
        assert np.mean(gains) > 0.0
        assert sum(g > 0 for g in gains) >= 8

    def test_origin_index_preserved(self):
        scene, props, predict = build(6, OracleNoise(sigma_delta=0.1), denoising=True)
        trace = run_cascade(props, predict, SCHED, scene.gt_boxes)
        base = [p.origin_index for p in props]
        for rec in trace.stages:
            assert [p.origin_index for p in rec.proposals_in] == base
            assert [p.is_denoising for p in rec.proposals_in] == [p.is_denoising for p in props]

    def test_recorded_mu_matches_schedule(self):
        scene, props, predict = build(7, OracleNoise())
        trace = run_cascade(props, predict, SCHED, scene.gt_boxes)
        for l, rec in enumerate(trace.stages, start=1):
            assert rec.mu == cpa_threshold(l, SCHED)
            assert rec.assignment is not None
            assert rec.assignment.mu == rec.mu

    def test_denoising_assignment_pinned_every_stage(self):
        scene, props, predict = build(8, OracleNoise(sigma_delta=0.15), b=16, denoising=True)
        trace = run_cascade(props, predict, SCHED, scene.gt_boxes)
        n_reg = 16
        for rec in trace.stages:
            a = rec.assignment
            for gi in range(len(scene.gt_boxes)):
                idx = n_reg + gi
                assert a.is_denoising[idx]
                assert a.matched_gt[idx] == gi

    def test_no_gts_skips_assignment(self):
        scene, props, predict = build(9, OracleNoise())
        trace = run_cascade(props, predict, SCHED, gts=None)
        assert trace.gts is None
        for rec in trace.stages:
            assert rec.assignment is None
            assert rec.mu is None

    def test_deterministic_trace(self):
        traces = []
        for _ in range(2):
            scene, props, predict = build(10, OracleNoise(sigma_delta=0.1, p_class_flip=0.1))
            traces.append(run_cascade(props, predict, SCHED, scene.gt_boxes))
        for ra, rb in zip(traces[0].stages, traces[1].stages):
            for pa, pb in zip(ra.predictions, rb.predictions):
                assert np.array_equal(pa.class_probs, pb.class_probs)
                assert pa.deltas == pb.deltas
                assert pa.centerness == pb.centerness
            for da, db in zip(ra.detections, rb.detections):
                assert da.box == db.box and da.score == db.score

    def test_per_stage_predictor_sequence(self):
        scene, props, _ = build(11, OracleNoise())
        exact = oracle_predictor(scene, OracleNoise(), seed=1)
        noisy = oracle_predictor(scene, OracleNoise(sigma_delta=0.3), seed=1)
        trace = run_cascade(props, [noisy, exact, exact], SCHED, scene.gt_boxes)
        # Stage 2 runs the exact head, so its detections are perfect.
        for prop, det in zip(trace.stages[1].proposals_in, trace.stages[1].detections):
            gt = scene.gt_boxes[match_point_to_gt(prop.point, scene.gt_boxes)]
            assert iou_rotated(det.box, gt) == pytest.approx(1.0, abs=1e-9)

    def test_detection_scores_combine_prob_and_centerness(self):
        scene, props, predict = build(12, OracleNoise(centerness_bias=0.2))
        trace = run_cascade(props, predict, SCHED, scene.gt_boxes)
        for pred, det in zip(trace.stages[0].predictions, trace.stages[0].detections):
            fg = pred.class_probs[:-1]
            assert det.score == pytest.approx(float(fg.max()) * pred.centerness, abs=1e-12)
            assert det.stage == 1

    def test_bad_predictor_outputs_rejected(self):
        scene, props, _ = build(13, OracleNoise())

        def bad_probs(prop):
            return Prediction(
                class_probs=np.array([0.5, 0.2, 0.0, 0.0, 0.0, 0.0]),
                deltas=Deltas(0.5, 0.5, 0.5, 0.5, 0.5, 0.5),
                heading=0.0,
                centerness=0.5,
            )

        def bad_centerness(prop):
            return Prediction(
                class_probs=np.array([1.0, 0.0, 0.0, 0.0, 0.0, 0.0]),
                deltas=Deltas(0.5, 0.5, 0.5, 0.5, 0.5, 0.5),
                heading=0.0,
                centerness=1.5,
            )

        with pytest.raises(PredictorOutputError):
            run_cascade(props[:4], bad_probs, SCHED, scene.gt_boxes)
        with pytest.raises(PredictorOutputError):
            run_cascade(props[:4], bad_centerness, SCHED, scene.gt_boxes)


class TestEnsemble:
    def test_single_stage_range_equals_stage_nms(self):
        scene, props, predict = build(14, OracleNoise(sigma_delta=0.1, centerness_bias=0.1))
        trace = run_cascade(props, predict, SCHED, scene.gt_boxes)
        out = ensemble_stages(trace, (2, 2), 0.25)
        dets = trace.stages[1].detections
        kept = nms(dets, 0.25)
        assert [d.box for d in out] == [dets[k].box for k in kept]

    def test_duplicates_deduplicated_highest_score_survives(self):
        scene, props, predict = build(15, OracleNoise())
        trace = run_cascade(props, predict, SCHED, scene.gt_boxes)
        out = ensemble_stages(trace, (1, 3), 0.25)
        # Exact oracle: stages 2 and 3 emit identical perfect boxes with
        # score 1; one survivor per (gt, class) remains.
        for i, a in enumerate(out):
            for b in out[i + 1 :]:
                if a.class_id == b.class_id:
                    assert iou_rotated(a.box, b.box) <= 0.25 + 1e-12
        covered = set()
        for det in out:
            for gi, gt in enumerate(scene.gt_boxes):
                if iou_rotated(det.box, gt) > 0.99:
                    covered.add(gi)
        assert covered == set(range(len(scene.gt_boxes)))

    def test_invalid_range(self):
        scene, props, predict = build(16, OracleNoise())
        trace = run_cascade(props, predict, SCHED, scene.gt_boxes)
        for rng_pair in [(0, 2), (2, 1), (1, 4), (4, 4)]:
            with pytest.raises(ValueError):
                ensemble_stages(trace, rng_pair, 0.25)
