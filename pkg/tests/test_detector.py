"""Grid detector unit tests on micro configurations (the desk training runs
live in the acceptance suite)."""

import itertools

import numpy as np
import pytest

from dipaoi import detector as dt, nnkit as nk, synth
from dipaoi.evalkit import iou
from dipaoi.synth import Box

F32 = np.float32


def ideal_pred(targets, cfg):
    """Head tensor whose decoded boxes equal the encoded targets."""
    a, ch, s, _ = targets.shape
    p5 = np.zeros((a, ch, s, s), F32)
    eps = 1e-6
    p5[:, 4] = -12.0
    for ai, yi, xi in zip(*np.nonzero(targets[:, 4] > 0.5)):
        fx = np.clip(targets[ai, 0, yi, xi], eps, 1 - eps)
        fy = np.clip(targets[ai, 1, yi, xi], eps, 1 - eps)
        p5[ai, 0, yi, xi] = np.log(fx / (1 - fx))
        p5[ai, 1, yi, xi] = np.log(fy / (1 - fy))
        p5[ai, 2, yi, xi] = targets[ai, 2, yi, xi]
        p5[ai, 3, yi, xi] = targets[ai, 3, yi, xi]
        p5[ai, 4, yi, xi] = 12.0
        p5[ai, 5:, yi, xi] = np.where(targets[ai, 5:, yi, xi] > 0.5, 12.0, -12.0)
    return p5.reshape(1, a * ch, s, s)


@pytest.fixture
def cfg():
    return dt.desk_config(seed=0)


def test_config_validation():
    with pytest.raises(dt.DetectorError):
        dt.DetectorConfig(grid_s=13, input_res=100).validate()  # not grid*2^k
    with pytest.raises(dt.DetectorError):
        dt.DetectorConfig(anchors=()).validate()
    with pytest.raises(dt.DetectorError):
        dt.DetectorConfig(conf_threshold=1.5).validate()
    assert dt.DetectorConfig(input_res=416).num_blocks == 5
    assert dt.desk_config().num_blocks == 3


def test_encode_cell_assignment(cfg):
    box = Box(0.55, 0.55, 0.1, 0.1, "surface_defect")
    t = cfg_targets = dt.encode_targets([box], cfg)
    positions = list(zip(*np.nonzero(t[:, 4] > 0.5)))
    assert len(positions) == 1
    _, gy, gx = positions[0]
    assert (gx, gy) == (7, 7)  # floor(0.55 * 13)


def test_encode_exact_anchor_match(cfg):
    w, h = cfg.anchors[1]
    box = Box(0.5, 0.5, w, h, "pin_defect")
    t = dt.encode_targets([box], cfg)
    ai, gy, gx = next(zip(*np.nonzero(t[:, 4] > 0.5)))
    assert ai == 1
    assert t[ai, 2, gy, gx] == pytest.approx(0.0, abs=1e-6)
    assert t[ai, 3, gy, gx] == pytest.approx(0.0, abs=1e-6)


def test_encode_empty_box_list(cfg):
    t = dt.encode_targets([], cfg)
    assert not t[:, 4].any()


def test_encode_collision_keeps_larger(cfg, caplog):
    import logging

    small = Box(0.501, 0.501, cfg.anchors[0][0], cfg.anchors[0][1], "surface_defect")
    large = Box(0.502, 0.502, cfg.anchors[0][0] * 1.2, cfg.anchors[0][1] * 1.2,
                "pin_defect")
    with caplog.at_level(logging.WARNING):
        t = dt.encode_targets([small, large], cfg)
    assert "claimed twice" in caplog.text
    decoded = dt.decode_targets(t, cfg)
    assert len(decoded) == 1
    assert decoded[0].cls == "pin_defect"


def test_encode_decode_round_trip(cfg):
    rng = np.random.default_rng(4)
    boxes = []
    for _ in range(6):
        w = float(rng.uniform(0.05, 0.4))
        h = float(rng.uniform(0.05, 0.4))
        boxes.append(Box(float(rng.uniform(w / 2, 1 - w / 2)),
                         float(rng.uniform(h / 2, 1 - h / 2)), w, h,
                         "surface_defect" if rng.random() < 0.5 else "pin_defect"))
    t = dt.encode_targets(boxes, cfg)
    decoded = dt.decode_targets(t, cfg)
    assert len(decoded) == len(boxes)
    for src in boxes:
        best = max(decoded, key=lambda d: iou(src, d))
        for attr in ("cx", "cy", "w", "h"):
            assert getattr(best, attr) == pytest.approx(getattr(src, attr), abs=1e-4)


def test_decoding_ideal_logits_reproduces_boxes(cfg):
    boxes = [Box(0.3, 0.4, 0.2, 0.15, "surface_defect"),
             Box(0.72, 0.66, 0.1, 0.3, "pin_defect")]
    t = dt.encode_targets(boxes, cfg)
    dets = dt.decode_head(ideal_pred(t, cfg)[0], cfg)
    assert len(dets) == 2
    for src in boxes:
        best = max(dets, key=lambda d: iou(src, d.box))
        assert iou(src, best.box) > 0.99
        assert best.cls == src.cls


# --- CIoU ------------------------------------------------------------------------

def test_ciou_identity_and_bounds():
    rng = np.random.default_rng(5)
    boxes = []
    for _ in range(40):
        w = float(rng.uniform(0.05, 0.5))
        h = float(rng.uniform(0.05, 0.5))
        boxes.append(Box(float(rng.uniform(w / 2, 1 - w / 2)),
                         float(rng.uniform(h / 2, 1 - h / 2)), w, h))
    same = dt.ciou_values(boxes, boxes)
    np.testing.assert_allclose(same, 1.0, atol=1e-4)

    others = boxes[1:] + boxes[:1]
    vals = dt.ciou_values(boxes, others)
    ious = np.array([iou(a, b) for a, b in zip(boxes, others)])
    assert np.all(vals <= ious + 1e-6)
    assert np.all(vals > -1.0) and np.all(vals <= 1.0)


def test_loss_zero_for_ideal_prediction(cfg):
    boxes = [Box(0.3, 0.4, 0.2, 0.15, "surface_defect")]
    t = dt.encode_targets(boxes, cfg)
    total, comps = dt.detector_loss(nk.Tensor(ideal_pred(t, cfg)), t[None], cfg)
    assert comps["box"].item() == pytest.approx(0.0, abs=1e-4)
    assert comps["cls"].item() == pytest.approx(0.0, abs=1e-4)
    assert comps["obj"].item() == pytest.approx(0.0, abs=1e-3)


def test_loss_hand_computed_single_cell():
    """1-cell 1-anchor toy head checked against hand-computed numbers."""
    cfg = dt.DetectorConfig(grid_s=1, input_res=2, anchors=((0.4, 0.4),), classes=2,
                            obj_pos_weight=1.0, lambda_box=1.0)
    target_box = Box(0.5, 0.5, 0.4, 0.4, "surface_defect")
    t = dt.encode_targets([target_box], cfg)
    pred = np.zeros((1, 7, 1, 1), F32)  # all logits zero
    total, comps = dt.detector_loss(nk.Tensor(pred), t[None], cfg)

    # hand computation: sigmoid(0)=0.5 -> pred box = (0.5,0.5,0.4,0.4) = target
    # box: CIoU = 1 exactly -> box loss 0
    # obj: bce(0, 1) = log(2); cls: [bce(0,1)+bce(0,0)]/2 = log(2)
    log2 = np.log(2.0)
    assert comps["box"].item() == pytest.approx(0.0, abs=1e-5)
    assert comps["obj"].item() == pytest.approx(log2, rel=1e-5)
    assert comps["cls"].item() == pytest.approx(log2, rel=1e-5)
    assert total.item() == pytest.approx(0.0 + log2 + log2, rel=1e-5)


def test_loss_gradcheck_toy_head():
    tiny = dt.DetectorConfig(grid_s=1, input_res=2, anchors=((0.3, 0.3),), classes=2)
    t = dt.encode_targets([Box(0.6, 0.45, 0.2, 0.33, "pin_defect")], tiny)[None]
    rng = np.random.default_rng(1)
    w = nk.Param(rng.standard_normal((1, 7, 1, 1)).astype(F32), "w")

    def f():
        total, _ = dt.detector_loss(nk.reshape(w, (1, 7, 1, 1)), t, tiny)
        return total

    assert nk.grad_check(f, [w], epsilon=1e-3) < 1e-2


def test_loss_no_positives(cfg):
    t = dt.encode_targets([], cfg)[None]
    pred = nk.Tensor(np.zeros((1, cfg.num_anchors * 7, 13, 13), F32))
    total, comps = dt.detector_loss(pred, t, cfg)
    assert comps["n_pos"] == 0
    assert total.item() > 0  # objectness still pushes down


# --- NMS -------------------------------------------------------------------------

def det(cx, cy, w, h, score, cls="surface_defect"):
    return dt.Detection(Box(cx, cy, w, h, cls), score, cls)


def test_nms_identical_boxes():
    kept = dt.nms([det(0.5, 0.5, 0.2, 0.2, 0.8), det(0.5, 0.5, 0.2, 0.2, 0.9)], 0.5)
    assert [k.score for k in kept] == [0.9]


def test_nms_disjoint_kept():
    kept = dt.nms([det(0.2, 0.2, 0.1, 0.1, 0.8), det(0.8, 0.8, 0.1, 0.1, 0.7)], 0.5)
    assert len(kept) == 2


def test_nms_different_classes_not_suppressed():
    kept = dt.nms([det(0.5, 0.5, 0.2, 0.2, 0.9),
                   det(0.5, 0.5, 0.2, 0.2, 0.8, cls="pin_defect")], 0.5)
    assert len(kept) == 2


def brute_force_nms(dets, thr):
    ordered = sorted(dets, key=lambda d: (-d.score, d.box.cx, d.box.cy))
    kept = []
    for cand in ordered:
        if all(not (k.cls == cand.cls and iou(k.box, cand.box) >= thr) for k in kept):
            kept.append(cand)
    return kept


def test_nms_matches_brute_force_random():
    rng = np.random.default_rng(8)
    for _ in range(30):
        dets = [det(float(rng.uniform(0.2, 0.8)), float(rng.uniform(0.2, 0.8)),
                    float(rng.uniform(0.05, 0.4)), float(rng.uniform(0.05, 0.4)),
                    float(rng.uniform(0, 1)),
                    "surface_defect" if rng.random() < 0.5 else "pin_defect")
                for _ in range(5)]
        got = dt.nms(dets, 0.45)
        want = brute_force_nms(dets, 0.45)
        assert [(d.score, d.box.cx) for d in got] == [(d.score, d.box.cx) for d in want]


def test_nms_postcondition_pairwise_iou():
    rng = np.random.default_rng(9)
    dets = [det(float(rng.uniform(0.3, 0.7)), float(rng.uniform(0.3, 0.7)),
                0.3, 0.3, float(rng.uniform(0, 1))) for _ in range(12)]
    kept = dt.nms(dets, 0.45)
    for a, b in itertools.combinations(kept, 2):
        if a.cls == b.cls:
            assert iou(a.box, b.box) < 0.45


# --- model/inference ---------------------------------------------------------------

def test_untrained_with_conf_one_yields_nothing(cfg):
    model = dt.GridModel(cfg)
    cfg.conf_threshold = 0.999999
    img = synth.render_normal(synth.Side.FRONT, 208, 0)
    dets, ms = dt.infer(model, img)
    assert dets == []
    assert ms >= 0.0


def test_fused_and_train_forward_agree(cfg):
    model = dt.GridModel(cfg)
    rng = np.random.default_rng(10)
    worst = 0.0
    for _ in range(10):
        x = nk.Tensor(rng.standard_normal((1, 3, cfg.input_res, cfg.input_res)).astype(F32) * 0.5)
        y_train = model.forward(x).data
        y_fused = model.fused_copy().forward(x).data
        worst = max(worst, float(np.abs(y_train - y_fused).max()))
    assert worst < 1e-4


def test_fused_and_train_detections_identical(cfg):
    model = dt.GridModel(cfg)
    cfg.conf_threshold = 0.05
    img = synth.render_normal(synth.Side.TOP, 208, 1)
    d1, _ = dt.infer(model, img, fused=False)
    d2, _ = dt.infer(model, img, fused=True)
    assert len(d1) == len(d2)
    for a, b in zip(d1, d2):
        assert a.cls == b.cls
        assert a.score == pytest.approx(b.score, abs=1e-5)
        assert a.box.cx == pytest.approx(b.box.cx, abs=1e-5)


def test_zero_max_batches_returns_init(tmp_path):
    man = synth.generate_dataset(synth.desk_spec(4, size=256), tmp_path, seed=1)
    cfg = dt.desk_config(max_batches=0, seed=3)
    model, report = dt.train(man, cfg)
    fresh = dt.GridModel(dt.desk_config(seed=3))
    for a, b in zip(model.params(), fresh.params()):
        np.testing.assert_array_equal(a.data, b.data)
    assert report.batches == 0


def test_training_deterministic(tmp_path):
    man = synth.generate_dataset(synth.desk_spec(6, size=256), tmp_path, seed=2)

    def run():
        cfg = dt.desk_config(max_batches=6, seed=5)
        model, rep = dt.train(man, cfg)
        return [p.data.copy() for p in model.params()], rep.losses

    (pa, la), (pb, lb) = run(), run()
    assert la == lb
    for a, b in zip(pa, pb):
        np.testing.assert_array_equal(a, b)


def test_training_loss_decreases(tmp_path):
    man = synth.generate_dataset(synth.desk_spec(8, size=256), tmp_path, seed=3)
    cfg = dt.desk_config(max_batches=60, seed=1)
    model, rep = dt.train(man, cfg)
    assert np.mean(rep.losses[-8:]) < rep.losses[0]


def test_model_save_load_round_trip(tmp_path):
    man = synth.generate_dataset(synth.desk_spec(4, size=256), tmp_path / "d", seed=1)
    cfg = dt.desk_config(max_batches=4, seed=2)
    model, _ = dt.train(man, cfg)
    dt.save_model(model, tmp_path / "m")
    loaded = dt.load_model(tmp_path / "m")
    img = synth.render_normal(synth.Side.LEFT, 208, 2)
    d1, _ = dt.infer(model, img)
    d2, _ = dt.infer(loaded, img)
    assert dt.detections_to_json(d1) == dt.detections_to_json(d2)


def test_kmeans_anchors_deterministic_and_sorted():
    rng = np.random.default_rng(11)
    boxes = [Box(0.5, 0.5, float(rng.uniform(0.05, 0.6)), float(rng.uniform(0.05, 0.6)))
             for _ in range(60)]
    a1 = dt.kmeans_anchors(boxes, 3)
    a2 = dt.kmeans_anchors(boxes, 3)
    assert a1 == a2
    areas = [w * h for w, h in a1]
    assert areas == sorted(areas)


def test_kmeans_fallback_when_few_boxes():
    assert dt.kmeans_anchors([], 3) == dt.FIXED_ANCHORS
