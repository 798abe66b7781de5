"""Matching, loss, average precision, TP errors, detection score."""

import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

import mml.engine as en
from mml.engine import Parameter, Tape, Tensor, grad_check
from mml.metrics import (
    AP_THRESHOLDS,
    BoxPrediction,
    EvalReport,
    EvalRow,
    center_distance_ap,
    decode_detections,
    detection_loss,
    detection_score,
    match_predictions,
    tp_errors,
    _match_class,
)
from mml.modules import DetectionOutput
from mml.world import SceneObject


def obj(cls=0, x=0.0, y=0.0, z=0.5, w=1.0, l=1.0, h=1.0, vx=0.0, vy=0.0):
    return SceneObject(cls, (x, y, z), (w, l, h), (vx, vy))


def pred(sample=0, score=0.9, cls=0, x=0.0, y=0.0, z=0.5, w=1.0, l=1.0, h=1.0, vx=0.0, vy=0.0, query=0):
    return BoxPrediction(sample, score, cls, (x, y, z), (w, l, h), (vx, vy), query)


def brute_force_assignment(cost):
    """Optimal assignment by enumeration; supports rectangular matrices."""
    nq, ng = cost.shape
    k = min(nq, ng)
    best, best_pairs = np.inf, ()
    for rows in itertools.permutations(range(nq), k):
        for cols in itertools.permutations(range(ng), k):
            total = sum(cost[r, c] for r, c in zip(rows, cols))
            if total < best - 1e-12:
                best, best_pairs = total, tuple(sorted(zip(rows, cols)))
    return best, best_pairs


class TestMatching:
    def test_identical_predictions_zero_cost(self):
        gts = [obj(0, 1.0, 2.0), obj(1, -3.0, 0.5, w=2.0)]
        probs = np.zeros((2, 4))
        probs[0, 0] = 1.0
        probs[1, 1] = 1.0
        boxes = np.stack([[1.0, 2.0, 0.5, 1, 1, 1], [-3.0, 0.5, 0.5, 2, 1, 1]])
        m = match_predictions(probs, boxes, gts)
        assert set(m.pairs) == {(0, 0), (1, 1)}
        assert m.unmatched_queries == ()

    def test_no_ground_truth(self):
        m = match_predictions(np.full((5, 4), 0.25), np.zeros((5, 6)), [])
        assert m.pairs == ()
        assert m.unmatched_queries == tuple(range(5))

    def test_greedy_trap_beaten(self):
        # greedy (row-wise argmin) picks (0,0)=1 then (1,2)=2 then (2,1)=10 -> 13
        # optimal is (0,1)+(1,0)+(2,2) = 2+1.5+2.5 = 6
        cost = np.array([[1.0, 2.0, 9.0], [1.5, 8.0, 2.0], [9.0, 10.0, 2.5]])
        rows, cols = __import__("scipy.optimize", fromlist=["linear_sum_assignment"]).linear_sum_assignment(cost)
        hungarian_total = cost[rows, cols].sum()
        brute_total, brute_pairs = brute_force_assignment(cost)
        assert hungarian_total == pytest.approx(brute_total)
        greedy_total = 0.0
        used = set()
        for r in range(3):
            c = min((c for c in range(3) if c not in used), key=lambda c: cost[r, c])
            used.add(c)
            greedy_total += cost[r, c]
        assert hungarian_total < greedy_total

    @settings(max_examples=40, deadline=None)
    @given(st.integers(1, 6), st.integers(1, 6), st.integers(0, 10_000))
    def test_matches_brute_force_up_to_six(self, nq, ng, seed):
        rng = np.random.default_rng(seed)
        gts = [
            obj(int(rng.integers(3)), *rng.uniform(-4, 4, 2), w=rng.uniform(0.5, 2))
            for _ in range(ng)
        ]
        probs = rng.dirichlet(np.ones(4), size=nq)
        boxes = rng.uniform(-4, 4, size=(nq, 6))
        m = match_predictions(probs, boxes, gts)
        gt_boxes = np.stack(
            [np.array(list(g.center) + list(g.extents)) for g in gts]
        )
        gt_cls = np.array([g.class_id for g in gts])
        cost = 2 * (1 - probs[:, gt_cls]) + 5 * np.abs(
            boxes[:, None, :] - gt_boxes[None, :, :]
        ).sum(axis=2)
        total = sum(cost[q, g] for q, g in m.pairs)
        brute_total, _ = brute_force_assignment(cost)
        assert total == pytest.approx(brute_total, abs=1e-9)
        assert len(m.pairs) == min(nq, ng)
        gt_used = [g for _, g in m.pairs]
        assert len(set(gt_used)) == len(gt_used)


def _head_output(logits, boxes, vels):
    return DetectionOutput(
        Tensor.of(logits), Tensor.of(boxes), Tensor.of(vels), len(logits), 1
    )


class TestLoss:
    def test_focal_term_closed_form(self):
        # single query, p = 0.5 on the true class
        logits = np.array([[np.log(2.0), 0.0]])  # softmax -> (2/3, 1/3)? adjust: want 0.5
        logits = np.array([[0.0, 0.0]])  # two classes incl background: p = 0.5
        out = _head_output(logits, np.zeros((1, 6)), np.zeros((1, 2)))
        gts = [[obj(0)]]
        from mml.metrics import MatchResult

        match = [MatchResult(((0, 0),), ())]
        # boxes identical to gt -> reg = |pred - gt| mean; make them match
        out = _head_output(
            logits, np.array([[0.0, 0.0, 0.5, 1, 1, 1.0]]), np.zeros((1, 2))
        )
        loss, parts = detection_loss(out, gts, match)
        expected = 0.25 * 0.25 * np.log(2.0)
        assert parts["cls"] == pytest.approx(expected, rel=1e-4)
        assert parts["reg"] == pytest.approx(0.0, abs=1e-7)

    def test_perfect_confident_predictions_near_zero(self):
        logits = np.array([[30.0, 0.0, 0.0, 0.0], [0.0, 0.0, 0.0, 30.0]])
        boxes = np.array([[1.0, 2.0, 0.5, 1, 1, 1], [0, 0, 0, 1, 1, 1.0]])
        out = _head_output(logits, boxes, np.zeros((2, 2)))
        gts = [[obj(0, 1.0, 2.0)]]
        from mml.metrics import MatchResult

        match = [MatchResult(((0, 0),), (1,))]
        loss, parts = detection_loss(out, gts, match)
        assert parts["total"] < 1e-6

    def test_l1_of_identical_boxes_zero(self):
        logits = np.zeros((1, 4))
        boxes = np.array([[2.0, -1.0, 0.4, 1.2, 0.8, 1.5]])
        vels = np.array([[0.3, -0.2]])
        out = _head_output(logits, boxes, vels)
        g = obj(1, 2.0, -1.0, 0.4, 1.2, 0.8, 1.5, 0.3, -0.2)
        from mml.metrics import MatchResult

        loss, parts = detection_loss(out, [[g]], [MatchResult(((0, 0),), ())])
        assert parts["reg"] == pytest.approx(0.0, abs=1e-7)

    def test_no_ground_truth_classifies_background(self):
        logits = np.zeros((3, 4))
        out = _head_output(logits, np.zeros((3, 6)), np.zeros((3, 2)))
        from mml.metrics import MatchResult

        loss, parts = detection_loss(out, [[]], [MatchResult((), (0, 1, 2))])
        assert parts["reg"] == 0.0
        assert parts["cls"] > 0

    def test_loss_differentiable_with_fixed_matching(self):
        rng = np.random.default_rng(0)
        params = {
            "logits": Parameter("logits", Tensor.of(rng.normal(size=(4, 4)))),
            "boxes": Parameter("boxes", Tensor.of(rng.normal(size=(4, 6)))),
            "vels": Parameter("vels", Tensor.of(rng.normal(size=(4, 2)))),
        }
        gts = [[obj(0, 1.0, 1.0), obj(2, -2.0, 0.0)]]
        from mml.metrics import MatchResult

        match = [MatchResult(((0, 0), (2, 1)), (1, 3))]

        def fn(tape, leaves):
            out = DetectionOutput(leaves["logits"], leaves["boxes"], leaves["vels"], 4, 1)
            loss, _ = detection_loss(out, gts, match)
            return loss

        report = grad_check(fn, params, eps=1e-4, tol=1e-3)
        assert report.passed, report.entries


class TestAveragePrecision:
    def test_perfect_detector(self):
        gts = {0: [obj(0, 1.0, 1.0)], 1: [obj(0, -2.0, 3.0)]}
        preds = [
            pred(0, 0.9, 0, 1.0, 1.0),
            pred(1, 0.8, 0, -2.0, 3.0),
        ]
        aps = center_distance_ap(preds, gts, 0)
        assert all(v == pytest.approx(1.0) for v in aps.values())

    def test_no_predictions(self):
        aps = center_distance_ap([], {0: [obj(0)]}, 0)
        assert all(v == 0.0 for v in aps.values())

    def test_single_tp_at_0p7_meters(self):
        gts = {0: [obj(0, 0.0, 0.0)]}
        preds = [pred(0, 0.9, 0, 0.7, 0.0)]
        aps = center_distance_ap(preds, gts, 0)
        assert aps[0.5] == 0.0
        for thr in (1.0, 2.0, 4.0):
            assert aps[thr] > 0.9

    def test_monotone_in_threshold(self):
        rng = np.random.default_rng(5)
        gts = {s: [obj(0, *rng.uniform(-5, 5, 2)) for _ in range(3)] for s in range(4)}
        preds = [
            pred(s, float(rng.uniform()), 0, *rng.uniform(-5, 5, 2), query=q)
            for s in range(4)
            for q in range(6)
        ]
        aps = center_distance_ap(preds, gts, 0)
        values = [aps[t] for t in AP_THRESHOLDS]
        assert values == sorted(values)

    def test_shuffle_invariance(self):
        rng = np.random.default_rng(8)
        gts = {s: [obj(1, *rng.uniform(-5, 5, 2)) for _ in range(2)] for s in range(3)}
        preds = [
            pred(s, float(rng.uniform()), 1, *rng.uniform(-5, 5, 2), query=q)
            for s in range(3)
            for q in range(5)
        ]
        base = center_distance_ap(preds, gts, 1)
        rng.shuffle(preds)
        assert center_distance_ap(preds, gts, 1) == base

    def brute_force_ap(self, preds, gts, class_id, thr):
        """Independent oracle: explicit confidence-ordered matching loop and
        101-point interpolation computed from scratch."""
        ranked = sorted(
            (p for p in preds if p.class_id == class_id),
            key=lambda p: (-p.score, p.sample, p.query),
        )
        remaining = {s: [g for g in gs if g.class_id == class_id] for s, gs in gts.items()}
        n_gt = sum(len(v) for v in remaining.values())
        flags = []
        for p in ranked:
            cands = remaining.get(p.sample, [])
            dists = [
                np.hypot(p.center[0] - g.center[0], p.center[1] - g.center[1])
                for g in cands
            ]
            if dists and min(dists) < thr:
                cands.pop(int(np.argmin(dists)))
                flags.append(True)
            else:
                flags.append(False)
        if n_gt == 0:
            return 0.0
        tp = np.cumsum(flags)
        fp = np.cumsum([not f for f in flags])
        rec = tp / n_gt
        prec = tp / np.maximum(tp + fp, 1e-12)
        total = 0.0
        for r in np.linspace(0, 1, 101):
            vals = prec[rec >= r]
            total += vals.max() if len(vals) else 0.0
        return total / 101

    @settings(max_examples=60, deadline=None)
    @given(st.integers(0, 5), st.integers(0, 4), st.integers(0, 100_000))
    def test_exhaustive_small_instances_match_oracle(self, n_pred, n_gt, seed):
        rng = np.random.default_rng(seed)
        gts = {0: [obj(int(rng.integers(2)), *rng.uniform(-4, 4, 2)) for _ in range(n_gt)]}
        preds = [
            pred(0, float(rng.uniform()), int(rng.integers(2)), *rng.uniform(-4, 4, 2), query=q)
            for q in range(n_pred)
        ]
        for cls in (0, 1):
            mine = center_distance_ap(preds, gts, cls)
            for thr in AP_THRESHOLDS:
                assert mine[thr] == pytest.approx(
                    self.brute_force_ap(preds, gts, cls, thr), abs=1e-12
                )


class TestTpErrors:
    def test_identical_boxes_zero_errors(self):
        matched = [(pred(0, 0.9, 0, 1.0, 2.0, 0.5, 1.5, 1.0, 2.0), obj(0, 1.0, 2.0, 0.5, 1.5, 1.0, 2.0))]
        assert tp_errors(matched) == (0.0, 0.0, 0.0)

    def test_pure_translation(self):
        matched = [(pred(0, 0.9, 0, 0.5, 0.0), obj(0, 0.0, 0.0))]
        ate, _, _ = tp_errors(matched)
        assert ate == pytest.approx(0.5)

    def test_halved_extents_scale_error(self):
        matched = [(pred(0, 0.9, 0, 0, 0, 0.5, 0.5, 0.5, 0.5), obj(0, 0, 0, 0.5, 1.0, 1.0, 1.0))]
        _, ase, _ = tp_errors(matched)
        assert ase == pytest.approx(7 / 8)

    def test_empty_saturates(self):
        assert tp_errors([]) == (1.0, 1.0, 1.0)

    def test_velocity_error(self):
        matched = [(pred(0, 0.9, 0, vx=1.0, vy=0.0), obj(0, vx=0.0, vy=0.0))]
        _, _, ave = tp_errors(matched)
        assert ave == pytest.approx(1.0)


class TestDetectionScore:
    def test_perfect(self):
        assert detection_score(1.0, 0.0, 0.0, 0.0) == pytest.approx(1.0)

    def test_all_saturated(self):
        assert detection_score(0.0, 2.0, 1.0, 2.0) == pytest.approx(0.0)

    def test_formula_case(self):
        # normalized errors (0.5, 0.25, 0.5) -> raw (1.0 m, 0.25, 1.0 m/s)
        assert detection_score(0.4, 1.0, 0.25, 1.0) == pytest.approx(0.46875)


class TestReport:
    def test_deltas_and_serialization(self, tmp_path):
        report = EvalReport(
            rows=[
                EvalRow("a+b+c+d", "Baseline", 0.2, 0.3, 0.5, 0.2, 0.4),
                EvalRow("a+b+c+d", "MML-Average", 0.25, 0.33, 0.45, 0.2, 0.4),
            ]
        )
        d = report.deltas("MML-Average")
        assert d["a+b+c+d"]["dmAP"] == pytest.approx(0.05)
        assert d["a+b+c+d"]["dDS"] == pytest.approx(0.03)
        report.save(tmp_path / "report")
        csv_text = (tmp_path / "report.csv").read_text()
        assert "dmAP" in csv_text and "MML-Average" in csv_text
        md = (tmp_path / "report.md").read_text()
        assert "| a+b+c+d | MML-Average" in md
        doc = __import__("json").loads((tmp_path / "report.json").read_text())
        row = [r for r in doc["rows"] if r["method"] == "MML-Average"][0]
        assert row["dmAP"] == pytest.approx(0.05)
        # CSV and JSON agree field for field
        import csv as _csv
        import io as _io

        parsed = list(_csv.DictReader(_io.StringIO(csv_text)))
        for r_json, r_csv in zip(doc["rows"], parsed):
            for key in ("model", "method"):
                assert str(r_json[key]) == r_csv[key]
            for key in ("mAP", "DS", "mATE", "mASE", "mAVE"):
                assert float(r_csv[key]) == pytest.approx(r_json[key])


class TestDecode:
    def test_decode_shapes_and_scores(self):
        rng = np.random.default_rng(0)
        logits = rng.normal(size=(6, 4))
        out = DetectionOutput(
            Tensor.of(logits), Tensor.of(rng.normal(size=(6, 6))), Tensor.of(rng.normal(size=(6, 2))), 3, 2
        )
        preds = decode_detections(out)
        assert len(preds) == 6
        assert {p.sample for p in preds} == {0, 1}
        assert all(0 <= p.class_id < 3 for p in preds)
        assert all(0 < p.score < 1 for p in preds)
