"""Tests for displacement metrics, motion buckets, and (soft) mAP."""

import math

import numpy as np
import pytest

from flowcast.errors import DataError
from flowcast.metrics import (
    MetricReport,
    MotionBucket,
    classify_motion,
    evaluate,
    mean_average_precision,
    min_ade,
    min_fde,
    miss,
    read_metric_report,
    report_summary_line,
    write_metric_report,
)
from flowcast.scene import AGENT_STATE_DIM, AgentHistory, AgentType, FutureTrajectory
from flowcast.selection import PredictionSet

from reference_impl import mean_average_precision_reference


def history_facing_x(n=4):
    states = np.zeros((n, AGENT_STATE_DIM))
    for i in range(n):
        states[i, 0] = -(n - 1 - i)
        states[i, 4] = 1.0
        states[i, 6] = 1.0
    return AgentHistory(states, AgentType.VEHICLE)


def pred_set(endpoints, confidences, t_f=4):
    ends = np.asarray(endpoints, dtype=np.float64)
    steps = np.linspace(1.0 / t_f, 1.0, t_f)[None, :, None]
    trajs = ends[:, None, :] * steps
    order = np.argsort(-np.asarray(confidences), kind="stable")
    return PredictionSet(
        trajs[order],
        np.asarray(confidences, dtype=np.float64)[order],
        np.zeros(len(order), dtype=bool),
        order,
    )


def straight_future(distance, t_f=4, angle=0.0):
    steps = np.linspace(distance / t_f, distance, t_f)
    return FutureTrajectory(np.stack([steps * math.cos(angle), steps * math.sin(angle)], axis=-1))


def random_entry(rng, n_modes=4, t_f=5):
    gt = FutureTrajectory(rng.normal(size=(t_f, 2)).cumsum(axis=0) * 2)
    trajs = rng.normal(size=(n_modes, t_f, 2)).cumsum(axis=1) * 2
    conf = np.sort(np.round(rng.uniform(size=n_modes), 2))[::-1]
    preds = PredictionSet(trajs, conf, np.zeros(n_modes, dtype=bool), np.arange(n_modes))
    return (preds, gt, history_facing_x())


class TestDisplacementMetrics:
    def test_hand_values(self):
        gt = straight_future(4.0)  # waypoints (1,0) .. (4,0)
        preds = pred_set([[4, 0], [4, 3]], [0.7, 0.3])
        assert min_fde(preds, gt) == pytest.approx(0.0)
        assert min_ade(preds, gt) == pytest.approx(0.0)
        off = pred_set([[4, 3]], [1.0])
        # mode endpoints (1, .75).. (4,3): pointwise distance grows linearly
        d = np.mean([0.75, 1.5, 2.25, 3.0])
        assert min_ade(off, gt) == pytest.approx(d)
        assert min_fde(off, gt) == pytest.approx(3.0)

    def test_min_over_modes(self, np_rng):
        gt = FutureTrajectory(np_rng.normal(size=(6, 2)))
        trajs = np_rng.normal(size=(5, 6, 2))
        preds = PredictionSet(trajs, np.linspace(0.9, 0.1, 5), np.zeros(5, bool), np.arange(5))
        ades = [np.linalg.norm(trajs[k] - gt.waypoints, axis=-1).mean() for k in range(5)]
        fdes = [np.linalg.norm(trajs[k, -1] - gt.waypoints[-1]) for k in range(5)]
        assert min_ade(preds, gt) == pytest.approx(min(ades))
        assert min_fde(preds, gt) == pytest.approx(min(fdes))

    def test_miss_strictly_greater(self):
        gt = straight_future(4.0)
        at_threshold = pred_set([[4, 2]], [1.0])  # FDE exactly 2.0
        assert not miss(at_threshold, gt, threshold=2.0)
        beyond = pred_set([[4, 2.0000001]], [1.0])
        assert miss(beyond, gt, threshold=2.0)


class TestClassifyMotion:
    def test_stationary(self):
        hist = history_facing_x()
        gt = FutureTrajectory(np.full((4, 2), 0.2))
        assert classify_motion(gt, hist) is MotionBucket.STATIONARY
        # boundary: displacement exactly 1.0 is not stationary
        gt_edge = FutureTrajectory(np.array([[0.5, 0], [1.0, 0], [1.0, 0], [1.0, 0]]))
        assert classify_motion(gt_edge, hist) is MotionBucket.STRAIGHT

    def test_straight_vs_turns(self):
        hist = history_facing_x()
        for deg, bucket in [
            (0.0, MotionBucket.STRAIGHT),
            (14.9, MotionBucket.STRAIGHT),
            (-14.9, MotionBucket.STRAIGHT),
            (15.0, MotionBucket.LEFT_TURN),  # boundary goes to the turn
            (-15.0, MotionBucket.RIGHT_TURN),
            (40.0, MotionBucket.LEFT_TURN),
            (-40.0, MotionBucket.RIGHT_TURN),
        ]:
            gt = straight_future(5.0, angle=math.radians(deg))
            assert classify_motion(gt, hist) is bucket, deg

    def test_heading_from_last_moving_segment(self):
        hist = history_facing_x()
        # drives off at 30 degrees then stops: still a left turn
        pts = straight_future(5.0, angle=math.radians(30)).waypoints
        gt = FutureTrajectory(np.concatenate([pts, pts[-1:].repeat(3, axis=0)]))
        assert classify_motion(gt, hist) is MotionBucket.LEFT_TURN


class TestAveragePrecision:
    def test_single_perfect_prediction(self):
        entries = [(pred_set([[4, 0]], [0.9]), straight_future(4.0), history_facing_x())]
        hard, buckets = mean_average_precision(entries, threshold=2.0, soft=False)
        assert hard == pytest.approx(1.0)
        assert set(buckets) == {MotionBucket.STRAIGHT}

    def test_hand_computed_duplicate_penalty(self):
        # obj A: two matching modes (0.9, 0.8); obj B: one matching mode (0.7).
        # hard AP = 0.5*1 + 0.5*(2/3); soft ignores the duplicate -> AP = 1.
        hist = history_facing_x()
        gt = straight_future(4.0)
        obj_a = (pred_set([[4, 0], [4.1, 0]], [0.9, 0.8]), gt, hist)
        obj_b = (pred_set([[4, 0]], [0.7]), gt, hist)
        hard, _ = mean_average_precision([obj_a, obj_b], threshold=2.0, soft=False)
        soft, _ = mean_average_precision([obj_a, obj_b], threshold=2.0, soft=True)
        assert hard == pytest.approx(0.5 + 0.5 * 2 / 3)
        assert soft == pytest.approx(1.0)

    def test_no_match_zero(self):
        entries = [(pred_set([[40, 40]], [0.9]), straight_future(4.0), history_facing_x())]
        hard, _ = mean_average_precision(entries, threshold=2.0, soft=False)
        assert hard == 0.0

    def test_empty_rejected(self):
        with pytest.raises(DataError):
            mean_average_precision([], threshold=2.0)

    def test_matches_reference_randomized(self, np_rng):
        for _ in range(150):
            entries = [random_entry(np_rng) for _ in range(int(np_rng.integers(1, 12)))]
            for soft in (False, True):
                got, _ = mean_average_precision(entries, threshold=2.0, soft=soft)
                want = mean_average_precision_reference(entries, threshold=2.0, soft=soft)
                assert got == pytest.approx(want, abs=1e-12)

    def test_soft_never_below_hard(self, np_rng):
        for _ in range(100):
            entries = [random_entry(np_rng) for _ in range(6)]
            hard, _ = mean_average_precision(entries, threshold=2.0, soft=False)
            soft, _ = mean_average_precision(entries, threshold=2.0, soft=True)
            assert soft >= hard - 1e-12


class TestEvaluate:
    def test_ground_truth_as_prediction_is_perfect(self, np_rng):
        entries = []
        for _ in range(20):
            gt = FutureTrajectory(np_rng.normal(size=(6, 2)).cumsum(axis=0) * 2)
            preds = PredictionSet(gt.waypoints[None], np.array([1.0]), np.array([False]), np.array([0]))
            entries.append((preds, gt, history_facing_x()))
        report = evaluate(entries)
        assert report.min_ade == 0.0
        assert report.min_fde == 0.0
        assert report.miss_rate == 0.0
        assert report.map == pytest.approx(1.0)
        assert report.soft_map == pytest.approx(1.0)
        assert report.n_scenes == 20

    def test_empty_rejected(self):
        with pytest.raises(DataError):
            evaluate([])

    def test_report_round_trip(self, tmp_path, np_rng):
        entries = [random_entry(np_rng) for _ in range(15)]
        report = evaluate(entries)
        path = tmp_path / "report.csv"
        write_metric_report(path, report)
        back = read_metric_report(path)
        assert back["min_ade"]["all"] == report.min_ade
        assert back["min_fde"]["all"] == report.min_fde
        assert back["miss_rate"]["all"] == report.miss_rate
        assert back["map"]["all"] == report.map
        assert back["soft_map"]["all"] == report.soft_map
        for bucket, stats in report.per_bucket.items():
            assert back["ap"][bucket.value] == stats.ap
            assert back["count"][bucket.value] == stats.count

    def test_summary_line_parses(self, np_rng):
        import json

        report = evaluate([random_entry(np_rng) for _ in range(5)])
        payload = json.loads(report_summary_line(report))
        assert payload["n_scenes"] == 5
        assert payload["min_ade"] == report.min_ade

    def test_malformed_report_rejected(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("metric,bucket,value\nmin_ade,all,not_a_number\n")
        with pytest.raises(DataError):
            read_metric_report(path)
