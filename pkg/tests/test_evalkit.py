import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dipaoi import evalkit as ek
from dipaoi.synth import Box


class Det:
    def __init__(self, box, score, image=None):
        self.box = box
        self.score = score
        self.image = image


def test_metric_formulas():
    rep = ek.metrics(ek.ConfusionMatrix(tp=8, fp=2, tn=0, fn=0))
    assert rep.pre == pytest.approx(0.8)
    rep = ek.metrics(ek.ConfusionMatrix(tp=8, fp=0, tn=0, fn=8))
    assert rep.rec == pytest.approx(0.5)
    rep = ek.metrics(ek.ConfusionMatrix(tp=3, fp=3, tn=7, fn=3))
    assert rep.fpr == pytest.approx(0.3)
    assert rep.tnr == pytest.approx(0.7)
    assert rep.fpr + rep.tnr == 1.0


def test_f1_equals_precision_when_balanced():
    rep = ek.metrics(ek.ConfusionMatrix(tp=6, fp=2, tn=5, fn=2))
    assert rep.pre == rep.rec
    assert rep.f1 == pytest.approx(rep.pre)


def test_zero_denominators_flagged_not_zero():
    rep = ek.metrics(ek.ConfusionMatrix(tp=0, fp=0, tn=5, fn=0))
    assert rep.pre is None and "pre" in rep.undefined
    assert rep.rec is None and "rec" in rep.undefined
    rep = ek.metrics(ek.ConfusionMatrix(tp=1, fp=0, tn=0, fn=0))
    assert rep.fpr is None and "fpr" in rep.undefined


@given(st.integers(0, 10_000), st.integers(0, 10_000),
       st.integers(0, 10_000), st.integers(0, 10_000))
@settings(max_examples=300, deadline=None)
def test_metric_identities_hold(tp, fp, tn, fn):
    rep = ek.metrics(ek.ConfusionMatrix(tp=tp, fp=fp, tn=tn, fn=fn))
    if rep.fpr is not None:
        assert rep.fpr + rep.tnr == 1.0  # exact by construction
    if rep.f1 is not None:
        harmonic = 2 * rep.pre * rep.rec / (rep.pre + rep.rec)
        assert abs(rep.f1 - harmonic) < 1e-12
        assert min(rep.pre, rep.rec) - 1e-12 <= rep.f1 <= max(rep.pre, rep.rec) + 1e-12


def test_accuracy_round_trips_published_row():
    # dt=635, printed accuracy 86.30%
    f = ek.errors_for_accuracy(635, 86.30)
    assert abs(f - 87) <= 1
    rep = ek.accuracy(635, f)
    assert rep.a == pytest.approx(86.30, abs=0.08)


def test_accuracy_edges():
    assert ek.accuracy(10, 0).a == 100.0
    assert ek.accuracy(10, 10).a == 0.0
    with pytest.raises(ValueError):
        ek.accuracy(0, 0)
    with pytest.raises(ValueError):
        ek.accuracy(5, 6)


def test_iou_basic():
    a = Box(0.5, 0.5, 0.2, 0.2)
    assert ek.iou(a, a) == 1.0
    b = Box(0.9, 0.9, 0.1, 0.1)
    assert ek.iou(a, b) == 0.0


def test_iou_matches_pixel_enumeration():
    # corner boxes (0,0,2,2) and (1,0,2,2) on a 4x4 integer grid -> 1/3
    def cells(x0, y0, x1, y1):
        return {(x, y) for x in range(x0, x1) for y in range(y0, y1)}

    cell_a = cells(0, 0, 2, 2)
    cell_b = cells(1, 0, 3, 2)
    expected = len(cell_a & cell_b) / len(cell_a | cell_b)
    scale = 4.0
    a = Box((0 + 2) / 2 / scale, (0 + 2) / 2 / scale, 2 / scale, 2 / scale)
    b = Box((1 + 3) / 2 / scale, (0 + 2) / 2 / scale, 2 / scale, 2 / scale)
    assert ek.iou(a, b) == pytest.approx(expected)
    assert expected == pytest.approx(1 / 3)


def test_degenerate_box_iou_is_zero():
    a = Box(0.5, 0.5, 0.2, 0.2)

    class Degenerate:
        cx, cy, w, h = 0.5, 0.5, 0.0, 0.2

    assert ek.iou(a, Degenerate()) == 0.0


def test_ap_simple_cases():
    gt = [Box(0.5, 0.5, 0.2, 0.2)]
    hit = Det(Box(0.5, 0.5, 0.2, 0.2), 0.9)
    assert ek.average_precision([hit], gt) == 1.0
    near_miss = Det(Box(0.62, 0.62, 0.2, 0.2), 0.9)  # IoU ~0.21
    assert ek.average_precision([near_miss], gt) == 0.0
    # ranked [FP, TP] over one GT -> AP = 0.5
    fp = Det(Box(0.1, 0.1, 0.05, 0.05), 0.95)
    tp = Det(Box(0.5, 0.5, 0.2, 0.2), 0.5)
    assert ek.average_precision([fp, tp], gt) == pytest.approx(0.5)


def test_ap_score_rescaling_invariance():
    rng = np.random.default_rng(5)
    gt = [Box(0.3, 0.3, 0.2, 0.2), Box(0.7, 0.7, 0.2, 0.2)]
    dets = [Det(Box(float(rng.uniform(0.2, 0.8)), float(rng.uniform(0.2, 0.8)), 0.2, 0.2),
                float(rng.uniform(0.01, 0.99))) for _ in range(8)]
    base = ek.average_precision(dets, gt)
    monotone = [Det(d.box, 0.1 + 0.8 * d.score**3) for d in dets]
    assert ek.average_precision(monotone, gt) == pytest.approx(base)


def brute_force_ap(dets, gts, thr=0.5):
    """Independent oracle: max precision at each achievable recall level."""
    gts = ek._norm_gts(gts)
    order = sorted(range(len(dets)), key=lambda i: (-dets[i].score, i))
    n_gt = len(gts)
    flags = []
    taken = [False] * n_gt
    for i in order:
        best, best_j = 0.0, -1
        for j, (img, g) in enumerate(gts):
            if taken[j] or img != getattr(dets[i], "image", None):
                continue
            v = ek.iou(dets[i].box, g)
            if v > best:
                best, best_j = v, j
        if best_j >= 0 and best >= thr:
            taken[best_j] = True
            flags.append(True)
        else:
            flags.append(False)
    ap = 0.0
    for level in range(1, n_gt + 1):
        r_level = level / n_gt
        best_p = 0.0
        tp = fp = 0
        for k, f in enumerate(flags):
            tp += f
            fp += not f
            if tp / n_gt >= r_level:
                best_p = max(best_p, tp / (tp + fp))
        ap += best_p * (1.0 / n_gt)
    return ap


def test_ap_equals_brute_force_exhaustive():
    """Every configuration with <= 3 detections against <= 2 GT boxes."""
    positions = [Box(0.3, 0.3, 0.2, 0.2), Box(0.7, 0.7, 0.2, 0.2), Box(0.32, 0.32, 0.2, 0.2)]
    scores = (0.9, 0.6, 0.3)
    mismatches = 0
    total = 0
    for n_gt in (1, 2):
        gts = positions[:n_gt]
        for n_det in range(0, 4):
            for combo in itertools.product(range(len(positions)), repeat=n_det):
                dets = [Det(positions[c], scores[k]) for k, c in enumerate(combo)]
                if not dets:
                    continue
                total += 1
                got = ek.average_precision(dets, gts)
                want = brute_force_ap(dets, gts)
                if abs(got - want) > 1e-12:
                    mismatches += 1
    assert total > 30
    assert mismatches == 0


def test_ap_respects_image_boundaries():
    # a detection on image B cannot match ground truth on image A
    gt = [("a", Box(0.5, 0.5, 0.2, 0.2))]
    d_wrong = Det(Box(0.5, 0.5, 0.2, 0.2), 0.9, image="b")
    assert ek.average_precision([d_wrong], gt) == 0.0
    d_right = Det(Box(0.5, 0.5, 0.2, 0.2), 0.9, image="a")
    assert ek.average_precision([d_right], gt) == 1.0


def test_map50_skips_empty_classes():
    gt = [Box(0.5, 0.5, 0.2, 0.2)]
    dets = [Det(Box(0.5, 0.5, 0.2, 0.2), 0.9)]
    val, skipped = ek.map50({"surface": (dets, gt), "pin": ([], [])})
    assert val == 1.0
    assert skipped == ["pin"]


def test_verdict_confusion_and_oracle():
    pred = {f"r{i}": ("defective" if i < 4 else "normal") for i in range(10)}
    truth = {f"r{i}": ("defective" if i < 4 else "normal") for i in range(10)}
    cm = ek.verdict_confusion(pred, truth)
    assert (cm.tp, cm.tn, cm.fp, cm.fn) == (4, 6, 0, 0)
    inverted = {k: ("normal" if v == "defective" else "defective") for k, v in pred.items()}
    cm = ek.verdict_confusion(inverted, truth)
    assert (cm.tp, cm.tn, cm.fp, cm.fn) == (0, 0, 6, 4)

    rng = np.random.default_rng(7)
    pred = {f"r{i}": ("defective" if rng.random() < 0.5 else "normal") for i in range(50)}
    truth = {f"r{i}": ("defective" if rng.random() < 0.5 else "normal") for i in range(50)}
    cm = ek.verdict_confusion(pred, truth)
    tp = sum(1 for k in pred if pred[k] == "defective" and truth[k] == "defective")
    fp = sum(1 for k in pred if pred[k] == "defective" and truth[k] == "normal")
    tn = sum(1 for k in pred if pred[k] == "normal" and truth[k] == "normal")
    fn = sum(1 for k in pred if pred[k] == "normal" and truth[k] == "defective")
    assert (cm.tp, cm.fp, cm.tn, cm.fn) == (tp, fp, tn, fn)


def test_verdict_confusion_unmatched_record():
    with pytest.raises(KeyError):
        ek.verdict_confusion({"x": "normal"}, {})


def test_loocv_three_subject_hand_computation():
    # samples: (subject, predicted, truth); deterministic "model" echoes them
    samples = [
        ("s1", "defective", "defective"),
        ("s1", "normal", "normal"),
        ("s2", "defective", "normal"),
        ("s2", "normal", "normal"),
        ("s3", "defective", "defective"),
        ("s3", "defective", "defective"),
    ]

    def train(train_samples):
        return None

    def evaluate(model, test_samples):
        pred = {str(i): s[1] for i, s in enumerate(test_samples)}
        truth = {str(i): s[2] for i, s in enumerate(test_samples)}
        return ek.metrics(ek.verdict_confusion(pred, truth))

    avg, folds = ek.loocv(samples, lambda s: s[0], train, evaluate)
    assert len(folds) == 3
    # fold s1: pre=1, rec=1; fold s2: pre=0, rec undefined; fold s3: pre=1, rec=1
    assert avg.pre == pytest.approx((1 + 0 + 1) / 3)
    assert avg.rec == pytest.approx(1.0)


def test_loocv_requires_two_subjects():
    with pytest.raises(ValueError):
        ek.loocv([("only", 1, 1)], lambda s: s[0], lambda s: None, lambda m, s: None)


def test_loocv_deterministic():
    samples = [(f"s{i % 4}", i) for i in range(12)]

    def train(train_samples):
        return sum(x[1] for x in train_samples)

    def evaluate(model, test_samples):
        rep = ek.MetricsReport()
        rep.map50 = (model % 7) / 7
        return rep

    a1, _ = ek.loocv(samples, lambda s: s[0], train, evaluate)
    a2, _ = ek.loocv(samples, lambda s: s[0], train, evaluate)
    assert a1.map50 == a2.map50


def test_report_csv():
    rows = [ek.side_report_row("left", 10, 1, 290.0)]
    csv = ek.report_to_csv(rows)
    assert csv.splitlines()[0] == "side,test_number,accuracy,detection_time_ms"
    assert "left,10,90.0,290.0" in csv
