"""Verdict/detection evaluation: confusion metrics, IoU, AP/mAP, LOOCV.

Positive class is "defective" throughout. Ratio metrics with a zero
denominator are reported as None together with a flag naming the metric,
never silently as 0.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class ConfusionMatrix:
    tp: int = 0
    fp: int = 0
    tn: int = 0
    fn: int = 0

    def __post_init__(self):
        if min(self.tp, self.fp, self.tn, self.fn) < 0:
            raise ValueError("confusion counts must be non-negative")

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn


@dataclass
class MetricsReport:
    pre: float | None = None
    rec: float | None = None
    f1: float | None = None
    fpr: float | None = None
    tnr: float | None = None
    map50: float | None = None
    detection_time_ms: float | None = None
    undefined: list[str] = field(default_factory=list)

    def as_dict(self) -> dict:
        return {
            "map50": self.map50,
            "pre": self.pre,
            "rec": self.rec,
            "f1": self.f1,
            "fpr": self.fpr,
            "tnr": self.tnr,
            "detection_time_ms": self.detection_time_ms,
            "undefined": list(self.undefined),
        }


@dataclass(frozen=True)
class AccuracyReport:
    dt: int
    f: int
    a: float  # percent

    def as_dict(self) -> dict:
        return {"test_number": self.dt, "errors": self.f, "accuracy": self.a}


def metrics(cm: ConfusionMatrix) -> MetricsReport:
    """Precision/recall/F1 plus FPR and its exact complement TNR."""
    rep = MetricsReport()
    if cm.tp + cm.fp > 0:
        rep.pre = cm.tp / (cm.tp + cm.fp)
    else:
        rep.undefined.append("pre")
    if cm.tp + cm.fn > 0:
        rep.rec = cm.tp / (cm.tp + cm.fn)
    else:
        rep.undefined.append("rec")
    if rep.pre is not None and rep.rec is not None and rep.pre + rep.rec > 0:
        rep.f1 = 2.0 * rep.pre * rep.rec / (rep.pre + rep.rec)
    else:
        rep.undefined.append("f1")
    if cm.fp + cm.tn > 0:
        rep.fpr = cm.fp / (cm.fp + cm.tn)
        # derive, don't divide twice: tn/(fp+tn) can drift a ulp from 1-fpr
        rep.tnr = 1.0 - rep.fpr
    else:
        rep.undefined.extend(["fpr", "tnr"])
    return rep


def accuracy(dt: int, f: int) -> AccuracyReport:
    """Detection accuracy in percent from total detections and error count."""
    if dt < 1:
        raise ValueError("need at least one detection")
    if not 0 <= f <= dt:
        raise ValueError("error count must lie in [0, dt]")
    return AccuracyReport(dt=dt, f=f, a=(dt - f) / dt * 100.0)


def errors_for_accuracy(dt: int, a_percent: float) -> int:
    """Invert the accuracy formula back to an integer error count."""
    return round(dt * (1.0 - a_percent / 100.0))


# ---------------------------------------------------------------------------
# Boxes and IoU
# ---------------------------------------------------------------------------

def box_corners(box) -> tuple[float, float, float, float]:
    """Center-size (cx, cy, w, h) to (x1, y1, x2, y2)."""
    cx, cy, w, h = box.cx, box.cy, box.w, box.h
    return (cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2)


def iou(a, b) -> float:
    """Intersection over union of two center-size boxes; 0 when disjoint."""
    ax1, ay1, ax2, ay2 = box_corners(a)
    bx1, by1, bx2, by2 = box_corners(b)
    area_a = max(0.0, ax2 - ax1) * max(0.0, ay2 - ay1)
    area_b = max(0.0, bx2 - bx1) * max(0.0, by2 - by1)
    if area_a == 0.0 or area_b == 0.0:
        log.warning("iou: degenerate zero-area box, reporting 0")
        return 0.0
    iw = min(ax2, bx2) - max(ax1, bx1)
    ih = min(ay2, by2) - max(ay1, by1)
    if iw <= 0.0 or ih <= 0.0:
        return 0.0
    inter = iw * ih
    return inter / (area_a + area_b - inter)


# ---------------------------------------------------------------------------
# Average precision (all-point interpolation)
# ---------------------------------------------------------------------------

def _image_of(obj) -> object:
    return getattr(obj, "image", None)


def _norm_gts(ground_truth) -> list[tuple[object, object]]:
    """Ground truth as (image_id, box) pairs; bare boxes mean a single image."""
    out = []
    for gt in ground_truth:
        if isinstance(gt, tuple) and len(gt) == 2:
            out.append(gt)
        else:
            out.append((None, gt))
    return out


def _match_detections(dets, gts, iou_threshold):
    """Greedy best-IoU matching in descending score order, per image.

    Returns a TP/FP flag per detection in that order. Each ground truth can
    absorb at most one detection, and only within its own image.
    """
    order = sorted(range(len(dets)), key=lambda i: (-dets[i].score, i))
    taken = [False] * len(gts)
    flags = []
    for i in order:
        best, best_j = 0.0, -1
        for j, (img, gt) in enumerate(gts):
            if taken[j] or img != _image_of(dets[i]):
                continue
            v = iou(dets[i].box, gt)
            if v > best:
                best, best_j = v, j
        if best_j >= 0 and best >= iou_threshold:
            taken[best_j] = True
            flags.append(True)
        else:
            flags.append(False)
    return flags


def average_precision(detections, ground_truth, iou_threshold: float = 0.5) -> float:
    """Area under the precision-recall curve with the precision envelope.

    `detections` carry .box, .score and optionally .image; `ground_truth`
    is a list of boxes or of (image_id, box) pairs. Scores rank globally,
    matching happens within each image. All-point interpolation: precision
    at each recall level is the maximum precision at any recall >= it.
    """
    gts = _norm_gts(ground_truth)
    n_gt = len(gts)
    if n_gt == 0:
        raise ValueError("average_precision needs at least one ground-truth box")
    if not detections:
        return 0.0
    flags = _match_detections(detections, gts, iou_threshold)

    # cumulative precision/recall walking down the ranked list
    tp = fp = 0
    precisions, recalls = [], []
    for is_tp in flags:
        tp += is_tp
        fp += not is_tp
        precisions.append(tp / (tp + fp))
        recalls.append(tp / n_gt)

    # envelope: make precision monotone non-increasing in recall
    for i in range(len(precisions) - 2, -1, -1):
        precisions[i] = max(precisions[i], precisions[i + 1])

    ap = 0.0
    prev_r = 0.0
    for p, r in zip(precisions, recalls):
        if r > prev_r:
            ap += (r - prev_r) * p
            prev_r = r
    return ap


def map50(per_class: dict[str, tuple[list, list]], iou_threshold: float = 0.5) -> tuple[float | None, list[str]]:
    """Unweighted class mean of AP; classes with no GT are excluded and flagged.

    `per_class` maps class name -> (detections, ground_truth_boxes).
    """
    aps = []
    skipped = []
    for cls in sorted(per_class):
        dets, gts = per_class[cls]
        if not gts:
            skipped.append(cls)
            log.warning("map50: class %r has no ground truth, excluded", cls)
            continue
        aps.append(average_precision(dets, gts, iou_threshold))
    if not aps:
        return None, skipped
    return sum(aps) / len(aps), skipped


# ---------------------------------------------------------------------------
# Verdict-level evaluation
# ---------------------------------------------------------------------------

def verdict_confusion(predicted: dict[str, str], ground_truth: dict[str, str]) -> ConfusionMatrix:
    """Count verdict agreement; keys are record ids, values 'defective'/'normal'."""
    tp = fp = tn = fn = 0
    for rid, pred in predicted.items():
        if rid not in ground_truth:
            raise KeyError(f"record {rid!r} has no ground-truth label")
        truth = ground_truth[rid]
        if truth == "defective":
            if pred == "defective":
                tp += 1
            else:
                fn += 1
        else:
            if pred == "defective":
                fp += 1
            else:
                tn += 1
    return ConfusionMatrix(tp=tp, fp=fp, tn=tn, fn=fn)


def loocv(samples: list, subject_of, train_fn, eval_fn) -> tuple[MetricsReport, list[MetricsReport]]:
    """Leave-one-subject-out cross-validation.

    One fold per distinct subject; `train_fn(train_samples)` returns a model,
    `eval_fn(model, test_samples)` returns a MetricsReport. Fold reports are
    averaged field-wise over the folds where the field is defined.
    """
    subjects = sorted({subject_of(s) for s in samples})
    if len(subjects) < 2:
        raise ValueError("loocv needs at least two subjects")
    folds = []
    for subj in subjects:
        train = [s for s in samples if subject_of(s) != subj]
        test = [s for s in samples if subject_of(s) == subj]
        model = train_fn(train)
        rep = eval_fn(model, test)
        folds.append(rep)

    avg = MetricsReport()
    for name in ("pre", "rec", "f1", "fpr", "tnr", "map50", "detection_time_ms"):
        vals = [getattr(f, name) for f in folds if getattr(f, name) is not None]
        if vals:
            setattr(avg, name, sum(vals) / len(vals))
        else:
            avg.undefined.append(name)
    return avg, folds


# ---------------------------------------------------------------------------
# Report shaping (model table / per-side table)
# ---------------------------------------------------------------------------

def model_report_row(model_name: str, rep: MetricsReport) -> dict:
    row = {"model": model_name}
    row.update(rep.as_dict())
    return row


def side_report_row(side: str, dt: int, f: int, mean_time_ms: float) -> dict:
    acc = accuracy(dt, f)
    return {
        "side": side,
        "test_number": dt,
        "accuracy": acc.a,
        "detection_time_ms": mean_time_ms,
    }


def report_to_csv(rows: list[dict]) -> str:
    """Flat CSV emission of a list of uniform report rows."""
    if not rows:
        return ""
    cols = list(rows[0].keys())
    lines = [",".join(cols)]
    for row in rows:
        lines.append(",".join("" if row.get(c) is None else str(row.get(c)) for c in cols))
    return "\n".join(lines) + "\n"
