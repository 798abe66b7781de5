"""Training loss and detection metrics.

Set-based training loss: Hungarian matching on a class+box cost, focal
classification against matched/background targets, L1 regression on boxes
and velocities. Evaluation: center-distance average precision on the
ground plane at {0.5, 1, 2, 4} m, true-positive errors (translation,
scale, velocity) at the 2 m threshold, and a composite detection score
that folds the normalized errors into the mAP.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment

from . import engine as en
from .engine import Tape, Tensor
from .modules import DetectionOutput
from .world import SceneObject

AP_THRESHOLDS = (0.5, 1.0, 2.0, 4.0)
TP_THRESHOLD = 2.0
FOCAL_GAMMA = 2.0
FOCAL_ALPHA = 0.25
MATCH_CLASS_WEIGHT = 2.0
MATCH_BOX_WEIGHT = 5.0
# normalizers for the detection-score error terms: translation (m),
# scale (already in [0, 1]), velocity (m/s)
DS_NORMALIZERS = (2.0, 1.0, 2.0)


@dataclass(frozen=True)
class MatchResult:
    pairs: tuple[tuple[int, int], ...]  # (query index, gt index)
    unmatched_queries: tuple[int, ...]


def _softmax_np(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _gt_box(obj: SceneObject) -> np.ndarray:
    return np.array(list(obj.center) + list(obj.extents), dtype=np.float64)


def match_predictions(
    class_probs: np.ndarray, boxes: np.ndarray, gts: Sequence[SceneObject]
) -> MatchResult:
    """Hungarian assignment of queries to ground truths.

    Cost per (query, gt): 2 (1 - p_class) + 5 L1(box). The assignment
    minimizes the total cost; leftover queries become background.
    """
    nq = class_probs.shape[0]
    if not gts:
        return MatchResult((), tuple(range(nq)))
    gt_boxes = np.stack([_gt_box(o) for o in gts])  # (m, 6)
    gt_cls = np.array([o.class_id for o in gts])
    cost_cls = MATCH_CLASS_WEIGHT * (1.0 - class_probs[:, gt_cls])
    cost_box = MATCH_BOX_WEIGHT * np.abs(boxes[:, None, :] - gt_boxes[None, :, :]).sum(axis=2)
    rows, cols = linear_sum_assignment(cost_cls + cost_box)
    pairs = tuple(sorted((int(q), int(g)) for q, g in zip(rows, cols)))
    matched = {q for q, _ in pairs}
    return MatchResult(pairs, tuple(q for q in range(nq) if q not in matched))


def match_output(
    output: DetectionOutput, gts_per_sample: Sequence[Sequence[SceneObject]]
) -> list[MatchResult]:
    """Per-sample Hungarian matching of a batched head output."""
    n_q = output.n_queries
    probs = _softmax_np(output.logits.data.astype(np.float64))
    boxes = output.boxes.data.astype(np.float64)
    matches = []
    for b, gts in enumerate(gts_per_sample):
        rows = slice(b * n_q, (b + 1) * n_q)
        matches.append(match_predictions(probs[rows], boxes[rows], gts))
    return matches


def detection_loss(
    output: DetectionOutput,
    gts_per_sample: Sequence[Sequence[SceneObject]],
    matches: Sequence[MatchResult],
) -> tuple[Tensor, dict[str, float]]:
    """Focal classification plus L1 regression, averaged over the batch.

    The classification term covers every query (matched class or
    background); the regression term covers matched queries' boxes and
    velocities. Matching is treated as fixed, so the loss is differentiable
    through the predictions.
    """
    n_q = output.n_queries
    n_total = output.logits.shape[0]
    n_cls = output.logits.shape[1]
    background = n_cls - 1

    targets = np.full(n_total, background, dtype=np.int64)
    reg_rows: list[int] = []
    reg_targets: list[np.ndarray] = []
    for b, (gts, match) in enumerate(zip(gts_per_sample, matches)):
        for q, g in match.pairs:
            row = b * n_q + q
            targets[row] = gts[g].class_id
            reg_rows.append(row)
            reg_targets.append(
                np.concatenate([_gt_box(gts[g]), np.asarray(gts[g].velocity)])
            )

    probs = en.softmax_lastdim(output.logits)
    onehot = np.zeros((n_total, n_cls), dtype=en.DTYPE)
    onehot[np.arange(n_total), targets] = 1.0
    p_t = en.row_sum(en.mul(probs, Tensor(onehot)))  # (n, 1)
    # keep log finite; clamp passes gradient in the interior
    p_t = en.clamp(p_t, 1e-7, 1.0 - 1e-7)
    # uniform alpha: the focal modulation already damps the easy background
    alpha = np.full(n_total, FOCAL_ALPHA, dtype=en.DTYPE)
    one_m = en.add_scalar(en.scale(p_t, -1.0), 1.0)
    focal_w = en.mul(one_m, one_m)  # gamma = 2
    ce = en.scale(en.log(p_t), -1.0)
    per_query = en.scale_rows(en.mul(focal_w, ce), Tensor(alpha.reshape(-1, 1)))
    cls_loss = en.mean_all(per_query)

    if reg_rows:
        pred = en.concat_cols(output.boxes, output.velocities)
        matched_pred = en.gather_rows(pred, np.asarray(reg_rows))
        target_t = Tensor(np.stack(reg_targets).astype(en.DTYPE))
        reg_loss = en.mean_all(en.abs_(en.sub(matched_pred, target_t)))
    else:
        reg_loss = en.scale(cls_loss, 0.0)

    total = en.add(cls_loss, reg_loss)
    components = {
        "cls": float(cls_loss.item()),
        "reg": float(reg_loss.item()),
        "total": float(total.item()),
    }
    return total, components


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class BoxPrediction:
    sample: int
    score: float
    class_id: int
    center: tuple[float, float, float]
    extents: tuple[float, float, float]
    velocity: tuple[float, float]
    query: int


def decode_detections(output: DetectionOutput, sample_offset: int = 0) -> list[BoxPrediction]:
    """Turn per-query outputs into scored box predictions.

    Score and label come from the foreground portion of the class softmax.
    """
    probs = _softmax_np(output.logits.data.astype(np.float64))
    fg = probs[:, :-1]
    labels = fg.argmax(axis=1)
    scores = fg.max(axis=1)
    boxes = output.boxes.data
    vels = output.velocities.data
    preds = []
    n_q = output.n_queries
    for row in range(output.logits.shape[0]):
        b, q = divmod(row, n_q)
        preds.append(
            BoxPrediction(
                sample=sample_offset + b,
                score=float(scores[row]),
                class_id=int(labels[row]),
                center=tuple(float(x) for x in boxes[row, :3]),
                extents=tuple(float(x) for x in boxes[row, 3:6]),
                velocity=tuple(float(x) for x in vels[row]),
                query=q,
            )
        )
    return preds


def _ground_distance(pred: BoxPrediction, gt: SceneObject) -> float:
    return float(
        np.hypot(pred.center[0] - gt.center[0], pred.center[1] - gt.center[1])
    )


@dataclass
class _ClassMatches:
    """Greedy confidence-ordered matching of one class at one threshold."""

    tp_flags: list[bool] = field(default_factory=list)
    matched: list[tuple[BoxPrediction, SceneObject]] = field(default_factory=list)
    n_gt: int = 0


def _match_class(
    preds: Sequence[BoxPrediction],
    gts_per_sample: Mapping[int, Sequence[SceneObject]],
    class_id: int,
    threshold: float,
) -> _ClassMatches:
    result = _ClassMatches()
    gt_pool: dict[int, list[SceneObject]] = {}
    for sample, gts in gts_per_sample.items():
        gt_pool[sample] = [g for g in gts if g.class_id == class_id]
        result.n_gt += len(gt_pool[sample])
    ranked = sorted(
        (p for p in preds if p.class_id == class_id),
        key=lambda p: (-p.score, p.sample, p.query),
    )
    used: dict[int, set[int]] = {s: set() for s in gt_pool}
    for p in ranked:
        candidates = gt_pool.get(p.sample, [])
        best_j, best_d = -1, threshold
        for j, g in enumerate(candidates):
            if j in used[p.sample]:
                continue
            d = _ground_distance(p, g)
            if d < best_d:
                best_j, best_d = j, d
        if best_j >= 0:
            used[p.sample].add(best_j)
            result.tp_flags.append(True)
            result.matched.append((p, candidates[best_j]))
        else:
            result.tp_flags.append(False)
    return result


def _ap_from_flags(tp_flags: Sequence[bool], n_gt: int) -> float:
    """Area under the precision-recall curve, interpolated at 101 points."""
    if n_gt == 0:
        return 0.0
    tp = np.cumsum(np.asarray(tp_flags, dtype=np.float64))
    fp = np.cumsum(~np.asarray(tp_flags, dtype=bool))
    recall = tp / n_gt
    precision = tp / np.maximum(tp + fp, 1e-12)
    ap = 0.0
    for r in np.linspace(0.0, 1.0, 101):
        mask = recall >= r
        ap += precision[mask].max() if mask.any() else 0.0
    return ap / 101.0


def center_distance_ap(
    preds: Sequence[BoxPrediction],
    gts_per_sample: Mapping[int, Sequence[SceneObject]],
    class_id: int,
    thresholds: Sequence[float] = AP_THRESHOLDS,
) -> dict[float, float]:
    """AP per threshold for one class, greedy matching in confidence order."""
    out = {}
    for thr in thresholds:
        m = _match_class(preds, gts_per_sample, class_id, thr)
        out[thr] = _ap_from_flags(m.tp_flags, m.n_gt)
    return out


def _aligned_volume_iou(pred: BoxPrediction, gt: SceneObject) -> float:
    pw, pl, ph = pred.extents
    gw, gl, gh = gt.extents
    inter = min(pw, gw) * min(pl, gl) * min(ph, gh)
    union = pw * pl * ph + gw * gl * gh - inter
    return inter / union if union > 0 else 0.0


def tp_errors(
    matched: Sequence[tuple[BoxPrediction, SceneObject]]
) -> tuple[float, float, float]:
    """Mean translation, scale, velocity errors over the matched pairs.

    Empty input yields the saturated value 1.0 for every error.
    """
    if not matched:
        return (1.0, 1.0, 1.0)
    ate = float(np.mean([_ground_distance(p, g) for p, g in matched]))
    ase = float(np.mean([1.0 - _aligned_volume_iou(p, g) for p, g in matched]))
    ave = float(
        np.mean(
            [
                np.hypot(p.velocity[0] - g.velocity[0], p.velocity[1] - g.velocity[1])
                for p, g in matched
            ]
        )
    )
    return (ate, ase, ave)


def detection_score(map_value: float, ate: float, ase: float, ave: float) -> float:
    """Composite score: (5 mAP + sum of (1 - normalized error)) / 8."""
    terms = 0.0
    for err, norm in zip((ate, ase, ave), DS_NORMALIZERS):
        terms += 1.0 - min(1.0, err / norm)
    return (5.0 * map_value + terms) / 8.0


@dataclass
class EvalRow:
    assembly_id: str
    method: str
    map_value: float
    ds: float
    mate: float
    mase: float
    mave: float
    per_class_ap: dict[str, float] = field(default_factory=dict)

    def as_dict(self) -> dict:
        return {
            "model": self.assembly_id,
            "method": self.method,
            "mAP": round(self.map_value, 6),
            "DS": round(self.ds, 6),
            "mATE": round(self.mate, 6),
            "mASE": round(self.mase, 6),
            "mAVE": round(self.mave, 6),
        }


@dataclass
class EvalReport:
    rows: list[EvalRow] = field(default_factory=list)

    def row(self, assembly_id: str, method: str) -> EvalRow | None:
        for r in self.rows:
            if r.assembly_id == assembly_id and r.method == method:
                return r
        return None

    def deltas(self, method: str, baseline: str = "Baseline") -> dict[str, dict[str, float]]:
        """Per-assembly (method - baseline) for mAP and DS."""
        out = {}
        for r in self.rows:
            if r.method != method:
                continue
            base = self.row(r.assembly_id, baseline)
            if base is None:
                continue
            out[r.assembly_id] = {
                "dmAP": r.map_value - base.map_value,
                "dDS": r.ds - base.ds,
            }
        return out

    def to_json(self) -> dict:
        doc_rows = []
        for r in self.rows:
            d = r.as_dict()
            base = self.row(r.assembly_id, "Baseline")
            if base is not None and r.method != "Baseline":
                d["dmAP"] = round(r.map_value - base.map_value, 6)
                d["dDS"] = round(r.ds - base.ds, 6)
            doc_rows.append(d)
        return {"rows": doc_rows}

    def to_csv(self) -> str:
        buf = io.StringIO()
        fields = ["model", "method", "mAP", "DS", "mATE", "mASE", "mAVE", "dmAP", "dDS"]
        writer = csv.DictWriter(buf, fieldnames=fields)
        writer.writeheader()
        for d in self.to_json()["rows"]:
            writer.writerow({k: d.get(k, "") for k in fields})
        return buf.getvalue()

    def to_markdown(self) -> str:
        lines = [
            "| model | method | mAP | DS | mATE | mASE | mAVE | dmAP | dDS |",
            "|---|---|---|---|---|---|---|---|---|",
        ]
        for d in self.to_json()["rows"]:
            lines.append(
                "| {model} | {method} | {mAP:.4f} | {DS:.4f} | {mATE:.4f} | {mASE:.4f} "
                "| {mAVE:.4f} | {dm} | {dd} |".format(
                    dm=f"{d['dmAP']:+.4f}" if "dmAP" in d else "",
                    dd=f"{d['dDS']:+.4f}" if "dDS" in d else "",
                    **{k: d[k] for k in ("model", "method", "mAP", "DS", "mATE", "mASE", "mAVE")},
                )
            )
        return "\n".join(lines) + "\n"

    def save(self, path_base) -> None:
        from pathlib import Path

        base = Path(path_base)
        base.with_suffix(".json").write_text(json.dumps(self.to_json(), indent=2))
        base.with_suffix(".csv").write_text(self.to_csv())
        base.with_suffix(".md").write_text(self.to_markdown())


def evaluate_model(
    preds: Sequence[BoxPrediction],
    gts_per_sample: Mapping[int, Sequence[SceneObject]],
    n_classes: int = 3,
) -> tuple[float, float, float, float, float, dict[str, float]]:
    """mAP over classes and thresholds plus TP errors and detection score.

    Classes absent from the ground truth are skipped in the mAP mean; TP
    errors are computed on all matches at the 2 m threshold.
    """
    aps: dict[str, float] = {}
    class_means = []
    all_matched: list[tuple[BoxPrediction, SceneObject]] = []
    present = [
        c
        for c in range(n_classes)
        if any(g.class_id == c for gts in gts_per_sample.values() for g in gts)
    ]
    for c in present:
        per_thr = center_distance_ap(preds, gts_per_sample, c)
        for thr, ap in per_thr.items():
            aps[f"class{c}@{thr}"] = ap
        class_means.append(float(np.mean(list(per_thr.values()))))
        m = _match_class(preds, gts_per_sample, c, TP_THRESHOLD)
        all_matched.extend(m.matched)
    map_value = float(np.mean(class_means)) if class_means else 0.0
    ate, ase, ave = tp_errors(all_matched)
    ds = detection_score(map_value, ate, ase, ave)
    return map_value, ds, ate, ase, ave, aps
