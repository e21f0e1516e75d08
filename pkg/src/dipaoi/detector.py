"""Anchor-based single-stage grid detector.

The image is divided into an S x S grid; each cell predicts, per anchor
prior, box offsets, an objectness logit and class logits. Objectness and
class use binary cross-entropy; box regression uses the complete-IoU loss
(IoU minus center-distance and aspect-ratio penalties). The backbone is a
stack of structurally reparameterizable conv blocks that fuse to single
3x3 convolutions for inference.
"""

from __future__ import annotations

import json
import logging
import math
import os
import time
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from . import nnkit as nk
from .evalkit import average_precision
from .imaging import Image, load_image, resize_bilinear
from .rng import derive_rng
from .synth import Box, CLASS_NAMES, Manifest

log = logging.getLogger(__name__)
F32 = np.float32

FIXED_ANCHORS = ((0.06, 0.08), (0.14, 0.16), (0.30, 0.30))


class DetectorError(RuntimeError):
    pass


@dataclass
class DetectorConfig:
    grid_s: int = 13
    anchors: tuple = FIXED_ANCHORS
    classes: int = 2
    input_res: int = 416
    conf_threshold: float = 0.25
    nms_iou_threshold: float = 0.45
    lr: float = 1e-3
    batch_size: int = 32
    max_batches: int = 10000
    seed: int = 0
    lambda_box: float = 5.0
    lambda_obj: float = 1.0
    lambda_cls: float = 1.0
    obj_pos_weight: float = 25.0  # rebalances ~1 positive against S*S*A negatives

    def validate(self) -> None:
        if self.grid_s < 1:
            raise DetectorError("grid_s must be >= 1")
        if not self.anchors:
            raise DetectorError("need at least one anchor")
        if not (0.0 < self.conf_threshold < 1.0) or not (0.0 < self.nms_iou_threshold < 1.0):
            raise DetectorError("thresholds must lie in (0, 1)")
        n_blocks = math.log2(self.input_res / self.grid_s)
        if abs(n_blocks - round(n_blocks)) > 1e-9 or round(n_blocks) < 1:
            raise DetectorError(f"input_res {self.input_res} must be grid_s * 2^k")

    @property
    def num_blocks(self) -> int:
        return int(round(math.log2(self.input_res / self.grid_s)))

    @property
    def num_anchors(self) -> int:
        return len(self.anchors)


def desk_config(**overrides) -> DetectorConfig:
    cfg = DetectorConfig(input_res=104, batch_size=8, max_batches=400, lr=1e-3)
    for k, v in overrides.items():
        setattr(cfg, k, v)
    return cfg


def paper_config(**overrides) -> DetectorConfig:
    """Published training setup: batch 32, 416 inputs, lr 0.001, 10000 batches."""
    cfg = DetectorConfig(input_res=416, batch_size=32, max_batches=10000, lr=1e-3)
    for k, v in overrides.items():
        setattr(cfg, k, v)
    return cfg


@dataclass
class Detection:
    box: Box
    score: float
    cls: str
    image: str | None = None

    def as_dict(self) -> dict:
        return {"box": self.box.as_dict(), "score": self.score, "class": self.cls,
                "image": self.image}


# ---------------------------------------------------------------------------
# Model
# ---------------------------------------------------------------------------

class GridModel:
    """RepConv backbone, conv head predicting (A * (5 + C)) maps at S x S."""

    def __init__(self, cfg: DetectorConfig, rng: np.random.Generator | None = None):
        cfg.validate()
        self.cfg = cfg
        rng = rng or derive_rng(cfg.seed, 21)
        chans = [3]
        for i in range(cfg.num_blocks):
            chans.append(min(16 * 2**i, 128))
        self.blocks = [
            nk.RepConvBlock(chans[i], chans[i + 1], rng=rng, name=f"b{i}")
            for i in range(cfg.num_blocks)
        ]
        head_ch = cfg.num_anchors * (5 + cfg.classes)
        self.h1 = nk.Conv2d(chans[-1], 96, 3, pad=1, rng=rng, name="h1")
        self.h2 = nk.Conv2d(96, head_ch, 1, rng=rng, name="h2")
        # start with quiet objectness so early training is not flooded
        b = self.h2.b.data.reshape(cfg.num_anchors, 5 + cfg.classes)
        b[:, 4] = -3.0
        self._fused: GridModel | None = None

    def params(self) -> list:
        out = []
        for blk in self.blocks:
            out.extend(blk.params())
        out.extend(self.h1.params())
        out.extend(self.h2.params())
        return out

    def forward(self, x: nk.Tensor) -> nk.Tensor:
        h = x
        for blk in self.blocks:
            h = nk.avg_pool2(nk.leaky_relu(blk(h), 0.1))
        h = nk.leaky_relu(self.h1(h), 0.1)
        return self.h2(h)

    def fused_copy(self) -> "GridModel":
        """Inference clone with every RepConv block merged to one kernel."""
        if self._fused is not None:
            return self._fused
        clone = GridModel(self.cfg, rng=derive_rng(self.cfg.seed, 21))
        for mine, theirs in zip(self.params(), clone.params()):
            theirs.data = mine.data.copy()
        for blk in clone.blocks:
            blk.fuse()
        self._fused = clone
        return clone

    def invalidate_fused(self) -> None:
        self._fused = None


# ---------------------------------------------------------------------------
# Target encoding / decoding
# ---------------------------------------------------------------------------

def _shape_iou(wh_a: tuple[float, float], wh_b: tuple[float, float]) -> float:
    inter = min(wh_a[0], wh_b[0]) * min(wh_a[1], wh_b[1])
    union = wh_a[0] * wh_a[1] + wh_b[0] * wh_b[1] - inter
    return inter / union if union > 0 else 0.0


def encode_targets(boxes: list[Box], cfg: DetectorConfig) -> np.ndarray:
    """(A, 5+C, S, S) target tensor; channels are tx,ty,tw,th,obj,cls...

    Each box claims the cell containing its center and the anchor with best
    shape IoU. On a (cell, anchor) collision the larger box wins.
    """
    s = cfg.grid_s
    t = np.zeros((cfg.num_anchors, 5 + cfg.classes, s, s), dtype=F32)
    claimed_area = np.zeros((cfg.num_anchors, s, s), dtype=F32)
    for box in boxes:
        gx = min(int(box.cx * s), s - 1)
        gy = min(int(box.cy * s), s - 1)
        a = max(range(cfg.num_anchors),
                key=lambda k: _shape_iou((box.w, box.h), cfg.anchors[k]))
        area = box.w * box.h
        if t[a, 4, gy, gx] > 0:
            log.warning("encode_targets: cell (%d,%d) anchor %d claimed twice", gx, gy, a)
            if area <= claimed_area[a, gy, gx]:
                continue
        claimed_area[a, gy, gx] = area
        t[a, 0, gy, gx] = box.cx * s - gx
        t[a, 1, gy, gx] = box.cy * s - gy
        t[a, 2, gy, gx] = math.log(max(box.w, 1e-6) / cfg.anchors[a][0])
        t[a, 3, gy, gx] = math.log(max(box.h, 1e-6) / cfg.anchors[a][1])
        t[a, 4, gy, gx] = 1.0
        t[a, 5:, gy, gx] = 0.0
        t[a, 5 + CLASS_NAMES.index(box.cls), gy, gx] = 1.0
    return t


def decode_targets(t: np.ndarray, cfg: DetectorConfig) -> list[Box]:
    """Inverse of encode_targets, for round-trip checks."""
    out = []
    s = cfg.grid_s
    for a, gy, gx in zip(*np.nonzero(t[:, 4] > 0.5)):
        cx = (gx + t[a, 0, gy, gx]) / s
        cy = (gy + t[a, 1, gy, gx]) / s
        w = cfg.anchors[a][0] * math.exp(t[a, 2, gy, gx])
        h = cfg.anchors[a][1] * math.exp(t[a, 3, gy, gx])
        cls = CLASS_NAMES[int(np.argmax(t[a, 5:, gy, gx]))]
        out.append(Box(float(cx), float(cy), float(min(w, 1.0)), float(min(h, 1.0)), cls))
    return out


# ---------------------------------------------------------------------------
# Loss
# ---------------------------------------------------------------------------

def _gather(t: nk.Tensor, key) -> nk.Tensor:
    return nk.getitem(t, key)


def detector_loss(pred: nk.Tensor, targets: np.ndarray, cfg: DetectorConfig):
    """Total loss and components for a batch.

    pred: (N, A*(5+C), S, S) tensor; targets: (N, A, 5+C, S, S) array.
    Objectness BCE runs over every cell; CIoU box loss and class BCE run
    over positive cells only. The CIoU trade-off coefficient is treated as
    a constant during backprop, as in the original formulation.
    """
    n, _, s, _ = pred.shape
    a = cfg.num_anchors
    ch = 5 + cfg.classes
    p5 = nk.reshape(pred, (n, a, ch, s, s))

    obj_logits = _gather(p5, (slice(None), slice(None), 4))
    obj_target = targets[:, :, 4]
    obj_weights = 1.0 + (cfg.obj_pos_weight - 1.0) * obj_target
    obj_loss = nk.mul(nk.tsum(nk.mul(nk.bce_with_logits(obj_logits, obj_target), obj_weights)),
                      1.0 / obj_target.size)

    pos = np.nonzero(obj_target > 0.5)
    n_pos = len(pos[0])
    if n_pos == 0:
        zero = nk.mul(obj_loss, 0.0)
        total = nk.mul(obj_loss, cfg.lambda_obj)
        return total, {"box": zero, "obj": obj_loss, "cls": zero, "n_pos": 0}

    ni, ai, yi, xi = pos
    anchors_w = np.array([cfg.anchors[k][0] for k in ai], dtype=F32)
    anchors_h = np.array([cfg.anchors[k][1] for k in ai], dtype=F32)

    def chan(c):
        return _gather(p5, (ni, ai, np.full_like(ai, c), yi, xi))

    bx = nk.mul(nk.add(nk.sigmoid(chan(0)), xi.astype(F32)), 1.0 / s)
    by = nk.mul(nk.add(nk.sigmoid(chan(1)), yi.astype(F32)), 1.0 / s)
    bw = nk.mul(nk.exp(nk.clamp(chan(2), -6.0, 6.0)), anchors_w)
    bh = nk.mul(nk.exp(nk.clamp(chan(3), -6.0, 6.0)), anchors_h)

    # constant target boxes, decoded exactly
    t_at = targets[ni, ai, :, yi, xi]  # (P, 5+C)
    tcx = (xi + t_at[:, 0]) / s
    tcy = (yi + t_at[:, 1]) / s
    tw = anchors_w * np.exp(t_at[:, 2])
    th = anchors_h * np.exp(t_at[:, 3])

    ciou = _ciou(bx, by, bw, bh, tcx.astype(F32), tcy.astype(F32), tw.astype(F32), th.astype(F32))
    box_loss = nk.mean(nk.sub(1.0, ciou))

    cls_logits = [ _gather(p5, (ni, ai, np.full_like(ai, 5 + c), yi, xi)) for c in range(cfg.classes) ]
    cls_targets = [ t_at[:, 5 + c] for c in range(cfg.classes) ]
    cls_loss = nk.mean(nk.concat([nk.bce_with_logits(lg, tg) for lg, tg in zip(cls_logits, cls_targets)]))

    total = nk.add(nk.add(nk.mul(box_loss, cfg.lambda_box), nk.mul(obj_loss, cfg.lambda_obj)),
                   nk.mul(cls_loss, cfg.lambda_cls))
    return total, {"box": box_loss, "obj": obj_loss, "cls": cls_loss, "n_pos": n_pos}


def _ciou(bx, by, bw, bh, tcx, tcy, tw, th):
    """Complete IoU between predicted tensors and constant target boxes."""
    eps = 1e-7
    x1 = nk.sub(bx, nk.mul(bw, 0.5))
    y1 = nk.sub(by, nk.mul(bh, 0.5))
    x2 = nk.add(bx, nk.mul(bw, 0.5))
    y2 = nk.add(by, nk.mul(bh, 0.5))
    tx1, ty1, tx2, ty2 = tcx - tw / 2, tcy - th / 2, tcx + tw / 2, tcy + th / 2

    iw = nk.clamp(nk.sub(nk.minimum(x2, nk.Tensor(tx2)), nk.maximum(x1, nk.Tensor(tx1))), 0.0, 4.0)
    ih = nk.clamp(nk.sub(nk.minimum(y2, nk.Tensor(ty2)), nk.maximum(y1, nk.Tensor(ty1))), 0.0, 4.0)
    inter = nk.mul(iw, ih)
    union = nk.add(nk.sub(nk.add(nk.mul(bw, bh), tw * th), inter), eps)
    iou_t = nk.div(inter, union)

    # squared center distance over squared enclosing-box diagonal
    rho2 = nk.add(nk.square(nk.sub(bx, nk.Tensor(tcx))), nk.square(nk.sub(by, nk.Tensor(tcy))))
    cw = nk.sub(nk.maximum(x2, nk.Tensor(tx2)), nk.minimum(x1, nk.Tensor(tx1)))
    chh = nk.sub(nk.maximum(y2, nk.Tensor(ty2)), nk.minimum(y1, nk.Tensor(ty1)))
    c2 = nk.add(nk.add(nk.square(cw), nk.square(chh)), eps)

    # aspect-ratio term with its iou-dependent weight, fully differentiable
    v = nk.mul(nk.square(nk.sub(np.arctan(tw / th).astype(F32), nk.arctan(nk.div(bw, bh)))),
               F32(4.0 / math.pi**2))
    alpha = nk.div(v, nk.add(nk.add(nk.sub(1.0, iou_t), v), eps))
    return nk.sub(nk.sub(iou_t, nk.div(rho2, c2)), nk.mul(v, alpha))


def ciou_values(pred_boxes: list[Box], target_boxes: list[Box]) -> np.ndarray:
    """CIoU of paired boxes as plain numbers (for tests and reporting)."""
    bx = nk.Tensor(np.array([b.cx for b in pred_boxes], dtype=F32), requires_grad=True)
    by = nk.Tensor(np.array([b.cy for b in pred_boxes], dtype=F32))
    bw = nk.Tensor(np.array([b.w for b in pred_boxes], dtype=F32))
    bh = nk.Tensor(np.array([b.h for b in pred_boxes], dtype=F32))
    tcx = np.array([b.cx for b in target_boxes], dtype=F32)
    tcy = np.array([b.cy for b in target_boxes], dtype=F32)
    tw = np.array([b.w for b in target_boxes], dtype=F32)
    th = np.array([b.h for b in target_boxes], dtype=F32)
    return _ciou(bx, by, bw, bh, tcx, tcy, tw, th).data.copy()


# ---------------------------------------------------------------------------
# NMS and inference
# ---------------------------------------------------------------------------

def nms(detections: list[Detection], iou_threshold: float) -> list[Detection]:
    """Greedy same-class suppression, deterministic ordering."""
    from .evalkit import iou as box_iou

    ordered = sorted(detections, key=lambda d: (-d.score, d.box.cx, d.box.cy))
    kept: list[Detection] = []
    for cand in ordered:
        ok = True
        for k in kept:
            if k.cls == cand.cls and box_iou(k.box, cand.box) >= iou_threshold:
                ok = False
                break
        if ok:
            kept.append(cand)
    return kept


def image_to_input(img: Image, input_res: int) -> np.ndarray:
    if img.width != input_res or img.height != input_res:
        img = resize_bilinear(img, input_res, input_res)
    px = img.pixels.astype(F32) / 127.5 - 1.0
    if px.shape[2] == 1:
        px = np.repeat(px, 3, axis=2)
    return np.ascontiguousarray(px.transpose(2, 0, 1))


def decode_head(head: np.ndarray, cfg: DetectorConfig, image_id: str | None = None) -> list[Detection]:
    """Raw head map (A*(5+C), S, S) to thresholded detections (pre-NMS)."""
    s = cfg.grid_s
    a = cfg.num_anchors
    ch = 5 + cfg.classes
    h5 = head.reshape(a, ch, s, s)

    def sig(z):
        return 1.0 / (1.0 + np.exp(-z))

    obj = sig(h5[:, 4])
    cls_prob = sig(h5[:, 5:])
    best_cls = np.argmax(cls_prob, axis=1)
    best_prob = np.take_along_axis(cls_prob, best_cls[:, None], axis=1)[:, 0]
    score = obj * best_prob
    out = []
    for ai, yi, xi in zip(*np.nonzero(score >= cfg.conf_threshold)):
        cx = (xi + sig(h5[ai, 0, yi, xi])) / s
        cy = (yi + sig(h5[ai, 1, yi, xi])) / s
        w = cfg.anchors[ai][0] * math.exp(float(np.clip(h5[ai, 2, yi, xi], -6, 6)))
        h = cfg.anchors[ai][1] * math.exp(float(np.clip(h5[ai, 3, yi, xi], -6, 6)))
        w = float(min(max(w, 1e-4), 1.0))
        h = float(min(max(h, 1e-4), 1.0))
        cx = float(min(max(cx, w / 2), 1.0 - w / 2))
        cy = float(min(max(cy, h / 2), 1.0 - h / 2))
        out.append(Detection(box=Box(cx, cy, w, h, CLASS_NAMES[int(best_cls[ai, yi, xi])]),
                             score=float(score[ai, yi, xi]), cls=CLASS_NAMES[int(best_cls[ai, yi, xi])],
                             image=image_id))
    return out


def infer(model: GridModel, img: Image, image_id: str | None = None,
          fused: bool = True) -> tuple[list[Detection], float]:
    """Detections plus wall-clock elapsed milliseconds for one image."""
    cfg = model.cfg
    t0 = time.perf_counter()
    x = image_to_input(img, cfg.input_res)[None]
    net = model.fused_copy() if fused else model
    head = net.forward(nk.Tensor(x)).data[0]
    dets = nms(decode_head(head, cfg, image_id), cfg.nms_iou_threshold)
    return dets, (time.perf_counter() - t0) * 1000.0


# ---------------------------------------------------------------------------
# Anchor estimation
# ---------------------------------------------------------------------------

def kmeans_anchors(boxes: list[Box], k: int, iters: int = 50) -> tuple:
    """Deterministic Lloyd k-means on (w, h); quantile-seeded."""
    if len(boxes) < k:
        return FIXED_ANCHORS[:k] if k <= len(FIXED_ANCHORS) else FIXED_ANCHORS
    pts = np.array([[b.w, b.h] for b in boxes], dtype=np.float64)
    order = np.argsort(pts[:, 0] * pts[:, 1])
    seeds = pts[order[np.linspace(0, len(pts) - 1, k).astype(int)]]
    centers = seeds.copy()
    for _ in range(iters):
        d = ((pts[:, None, :] - centers[None]) ** 2).sum(axis=2)
        assign = d.argmin(axis=1)
        moved = 0.0
        for j in range(k):
            sel = pts[assign == j]
            if len(sel) == 0:
                continue
            new = sel.mean(axis=0)
            moved += float(np.abs(new - centers[j]).sum())
            centers[j] = new
        if moved < 1e-12:
            break
    centers = centers[np.argsort(centers[:, 0] * centers[:, 1])]
    centers = np.clip(centers, 1e-3, 1.0)
    return tuple((float(w), float(h)) for w, h in centers)


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

@dataclass
class TrainReport:
    losses: list[float] = field(default_factory=list)
    components: list[dict] = field(default_factory=list)
    batches: int = 0
    epochs: int = 0
    aborted: bool = False

    def as_dict(self) -> dict:
        return {"losses": self.losses, "batches": self.batches,
                "epochs": self.epochs, "aborted": self.aborted}


def load_training_arrays(manifest: Manifest, cfg: DetectorConfig):
    xs, ts = [], []
    for meta in manifest.images:
        img = load_image(manifest.resolve(meta))
        xs.append(image_to_input(img, cfg.input_res))
        ts.append(encode_targets(meta.boxes, cfg))
    return np.stack(xs), np.stack(ts)


def train(manifest: Manifest, cfg: DetectorConfig, out_dir=None,
          fit_anchors: bool = True) -> tuple[GridModel, TrainReport]:
    """Deterministic minibatch training run.

    Anchors default to k-means over the training boxes. Divergence aborts
    with the last finite checkpoint restored. With out_dir set, an .aoiw
    checkpoint is written after every epoch.
    """
    cfg.validate()
    if not manifest.images:
        raise DetectorError("training manifest is empty")
    all_boxes = [b for m in manifest.images for b in m.boxes]
    if fit_anchors and all_boxes:
        cfg.anchors = kmeans_anchors(all_boxes, cfg.num_anchors)
    model = GridModel(cfg)
    report = TrainReport()
    if cfg.max_batches == 0:
        return model, report

    xs, ts = load_training_arrays(manifest, cfg)
    n = len(xs)
    opt = nk.Adam(model.params(), lr=cfg.lr)
    # settle into a stable endpoint: drop the step size for the last 15%
    lr_drop_at = int(cfg.max_batches * 0.85)
    last_good: list[np.ndarray] | None = None
    batches_done = 0
    epoch = 0
    while batches_done < cfg.max_batches:
        order = derive_rng(cfg.seed, 300 + epoch).permutation(n)
        for start in range(0, n, cfg.batch_size):
            if batches_done >= cfg.max_batches:
                break
            idx = order[start : start + cfg.batch_size]
            bx = xs[idx]
            bt = ts[idx]
            if batches_done == lr_drop_at:
                opt.lr = cfg.lr * 0.1
            try:
                opt.zero_grad()
                pred = model.forward(nk.Tensor(bx))
                total, comps = detector_loss(pred, bt, cfg)
                total.backward()
                opt.step()
            except nk.NonFiniteError:
                report.aborted = True
                if last_good is not None:
                    for p, v in zip(model.params(), last_good):
                        p.data = v
                log.error("training diverged at batch %d; restored last checkpoint", batches_done)
                report.batches = batches_done
                report.epochs = epoch
                return model, report
            report.losses.append(total.item())
            report.components.append({k: (v.item() if isinstance(v, nk.Tensor) else v)
                                      for k, v in comps.items()})
            batches_done += 1
        last_good = [p.data.copy() for p in model.params()]
        epoch += 1
        report.epochs = epoch
        if out_dir is not None:
            save_model(model, out_dir)
    report.batches = batches_done
    model.invalidate_fused()
    return model, report


# ---------------------------------------------------------------------------
# Evaluation and persistence
# ---------------------------------------------------------------------------

def evaluate(model: GridModel, manifest: Manifest, iou_threshold: float = 0.5,
             conf_threshold: float | None = None) -> dict:
    """mAP at the given IoU threshold plus per-class APs and mean time."""
    cfg = model.cfg
    saved_conf = cfg.conf_threshold
    if conf_threshold is not None:
        cfg.conf_threshold = conf_threshold
    try:
        dets: list[Detection] = []
        gts: dict[str, list] = {c: [] for c in CLASS_NAMES}
        times = []
        for meta in manifest.images:
            img = load_image(manifest.resolve(meta))
            d, ms = infer(model, img, image_id=meta.path)
            dets.extend(d)
            times.append(ms)
            for b in meta.boxes:
                gts[b.cls].append((meta.path, b))
        per_class = {}
        aps = []
        for cls in CLASS_NAMES:
            cls_dets = [d for d in dets if d.cls == cls]
            if not gts[cls]:
                per_class[cls] = None
                continue
            ap = average_precision(cls_dets, gts[cls], iou_threshold)
            per_class[cls] = ap
            aps.append(ap)
        return {
            "map50": sum(aps) / len(aps) if aps else None,
            "per_class_ap": per_class,
            "detection_time_ms": sum(times) / len(times) if times else None,
            "iou_threshold": iou_threshold,
            "images": len(manifest.images),
            "detections": len(dets),
        }
    finally:
        cfg.conf_threshold = saved_conf


def save_model(model: GridModel, out_dir) -> None:
    out = Path(out_dir)
    os.makedirs(out, exist_ok=True)
    nk.save_params(model.params(), out / "detector.aoiw")
    with open(out / "detector.json", "w", encoding="utf-8") as f:
        json.dump({"cfg": asdict(model.cfg), "class_names": list(CLASS_NAMES)}, f, indent=1)


def load_model(model_dir) -> GridModel:
    model_dir = Path(model_dir)
    with open(model_dir / "detector.json", encoding="utf-8") as f:
        doc = json.load(f)
    cfg_d = doc["cfg"]
    cfg_d["anchors"] = tuple(tuple(a) for a in cfg_d["anchors"])
    cfg = DetectorConfig(**cfg_d)
    model = GridModel(cfg)
    loaded = nk.load_params(model_dir / "detector.aoiw")
    for p in model.params():
        p.data = loaded[p.name].copy()
    model.invalidate_fused()
    return model


def detections_to_json(dets: list[Detection]) -> str:
    return json.dumps([d.as_dict() for d in dets], indent=1)
