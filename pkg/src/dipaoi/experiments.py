"""Reproducible desk-scale experiments behind the acceptance suite and CLI.

Three experiments:
  * gan_fixture: one defect image, full desk GAN profile, freezing /
    reconstruction / diversity evidence.
  * augmentation_benefit: base synthetic detector training vs the same box
    topped up with single-image-GAN samples, compared on held-out mAP.
  * baseline_separability: per-side threshold tuning on a train split,
    detection accuracy on held-out samples.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import baseline, consingan as cg, detector as dt, synth
from .evalkit import accuracy
from .imaging import load_image, resize_bilinear, save_image, to_gray
from .rng import derive_rng

SSIM_FLOOR = 0.30  # documented similarity floor for GAN samples vs source


def rebase_manifest(man: synth.Manifest, new_base) -> synth.Manifest:
    """Re-root a manifest's relative paths onto a parent directory."""
    new_base = Path(new_base)
    out = synth.Manifest(base_dir=str(new_base))
    for m in man.images:
        rel = os.path.relpath(Path(man.base_dir) / m.path, new_base)
        out.images.append(synth.SampleMeta(
            path=rel, side=m.side, width=m.width, height=m.height,
            source=m.source, seed=m.seed, boxes=list(m.boxes),
            defect_kinds=m.defect_kinds,
        ))
    return out


def merge_manifests(parts: list[synth.Manifest], base_dir) -> synth.Manifest:
    out = synth.Manifest(base_dir=str(base_dir))
    for part in parts:
        out.images.extend(rebase_manifest(part, base_dir).images)
    return out


# ---------------------------------------------------------------------------
# GAN acceptance fixture
# ---------------------------------------------------------------------------

@dataclass
class GanFixtureResult:
    recon_ratios: list[float]
    frozen_ok: bool
    warm_start_ok: bool
    mad_vs_source: float
    mad_between_samples: float
    ssim_vs_source: float
    reports: list = field(default_factory=list)

    def as_dict(self) -> dict:
        return {
            "recon_ratios": self.recon_ratios,
            "frozen_ok": self.frozen_ok,
            "warm_start_ok": self.warm_start_ok,
            "mad_vs_source": self.mad_vs_source,
            "mad_between_samples": self.mad_between_samples,
            "ssim_vs_source": self.ssim_vs_source,
        }


def gan_fixture(seed: int = 1, iters: int = 300, size: int = 200) -> GanFixtureResult:
    """Desk-profile ConSinGAN run on one synthetic defect image."""
    img = synth.render_normal(synth.Side.FRONT, size, seed)
    img, box = synth.inject_defect(img, synth.Side.FRONT, synth.DefectKind.GLUE_OVERFLOW, seed)
    cfg = cg.desk_config(num_stages=4, min_res=25, max_res=size, iters_per_stage=iters, seed=seed)
    pyramid, critic, reports = cg.train_pyramid(
        img, cfg, {"side": "front", "boxes": [box.as_dict()], "subject": "fixture"})

    frozen_ok = all(r.frozen_checksum_before == r.frozen_checksum_after for r in reports)
    warm_ok = all(reports[i].critic_checksum_start == reports[i - 1].critic_checksum_end
                  for i in range(1, len(reports)))
    ratios = [r.recon_end / max(r.recon_start, 1e-12) for r in reports]

    src = img
    s0 = cg.sample_image(pyramid, 0)
    s1 = cg.sample_image(pyramid, 1)
    mad_src = float(np.abs(s0.pixels.astype(int) - src.pixels.astype(int)).mean())
    mad_pair = float(np.abs(s0.pixels.astype(int) - s1.pixels.astype(int)).mean())
    ssim = cg.ssim_gray(to_gray(s0).pixels[:, :, 0], to_gray(src).pixels[:, :, 0])
    return GanFixtureResult(recon_ratios=ratios, frozen_ok=frozen_ok, warm_start_ok=warm_ok,
                            mad_vs_source=mad_src, mad_between_samples=mad_pair,
                            ssim_vs_source=ssim, reports=reports)


# ---------------------------------------------------------------------------
# Augmentation benefit
# ---------------------------------------------------------------------------

def refine_defect_box(img, inherited: synth.Box, band=(40, 110)) -> synth.Box | None:
    """Tight box around the defect's channel-difference signal near the
    inherited box.

    A generated sample reproduces its source only approximately, so the
    inherited box can sit a few pixels off the regrown defect; this
    re-tightens it using the same R-G feature band the threshold detector
    uses. Returns None when too little signal survived (a degenerate
    sample).
    """
    from .imaging import channel_subtract

    rg = channel_subtract(img, "r", "g").pixels[:, :, 0]
    sig = (rg >= band[0]) & (rg <= band[1])
    w, h = img.width, img.height
    x0 = max(0, int((inherited.cx - 1.5 * inherited.w) * w))
    x1 = min(w, int((inherited.cx + 1.5 * inherited.w) * w) + 1)
    y0 = max(0, int((inherited.cy - 1.5 * inherited.h) * h))
    y1 = min(h, int((inherited.cy + 1.5 * inherited.h) * h) + 1)
    local = np.zeros_like(sig)
    local[y0:y1, x0:x1] = sig[y0:y1, x0:x1]
    ys, xs = np.nonzero(local)
    if len(xs) < 15:
        return None
    bx0, bx1 = int(xs.min()), int(xs.max()) + 1
    by0, by1 = int(ys.min()), int(ys.max()) + 1
    return synth.Box((bx0 + bx1) / 2 / w, (by0 + by1) / 2 / h,
                     (bx1 - bx0) / w, (by1 - by0) / h, inherited.cls)


def train_gan_bank(base: synth.Manifest, out_dir, n_gans: int = 16, samples_each: int = 5,
                   gan_iters: int = 150, gan_max_res: int = 104, seed: int = 0,
                   screen_samples: bool = True) -> synth.Manifest:
    """Train one small pyramid per picked source image; pool the samples.

    Sources are drawn class-balanced from the base manifest's defect images
    and each training run applies one preprocessing jitter, so the pool
    covers many distinct (source, geometry) pairs; few samples per pyramid
    keeps the pool from oversampling any single scene. Samples whose defect
    signal did not survive generation are redrawn (quality screening);
    boxes are inherited from the jittered source.
    """
    out = Path(out_dir)
    os.makedirs(out, exist_ok=True)
    surface = [m for m in base.images if m.boxes and m.boxes[0].cls == "surface_defect"]
    pin = [m for m in base.images if m.boxes and m.boxes[0].cls == "pin_defect"]
    if not surface or not pin:
        raise ValueError("gan bank needs both defect classes in the base manifest")
    picks = []
    for i in range(n_gans):
        pool = surface if i % 2 == 0 else pin
        picks.append(pool[(i // 2) % len(pool)])

    jitters = ["mirror", "flip", "translate", "rot90", "scale", "noise", "none"]
    parts = []
    for gi, meta in enumerate(picks):
        src = load_image(base.resolve(meta))
        jk = jitters[(gi * 3 + gi // 7) % len(jitters)]
        jimg, jboxes = cg.jitter_source(src, meta.boxes, jk, seed=seed * 1000 + gi)
        cfg = cg.desk_config(num_stages=3, min_res=25, max_res=gan_max_res,
                             iters_per_stage=gan_iters, seed=seed * 100 + gi, jitter=jk)
        pyramid, _, _ = cg.train_pyramid(jimg, cfg, {
            "side": meta.side.value,
            "boxes": [b.as_dict() for b in jboxes],
            "subject": f"gan{gi:02d}",
        })
        gan_dir = out / f"gan{gi:02d}"
        os.makedirs(gan_dir, exist_ok=True)
        part = synth.Manifest(base_dir=str(gan_dir))
        kept = 0
        attempt = 0
        while kept < samples_each and attempt < samples_each * 4:
            img = cg.sample_image(pyramid, seed * 10 + attempt)
            attempt += 1
            if screen_samples and refine_defect_box(img, jboxes[0]) is None:
                continue  # defect did not survive this sample; redraw
            name = f"gan{gi:02d}_{meta.side.value}_consingan_{kept:03d}.ppm"
            save_image(img, gan_dir / name)
            part.images.append(synth.SampleMeta(
                path=name, side=meta.side, width=img.width, height=img.height,
                source="consingan", seed=seed * 10 + attempt - 1, boxes=list(jboxes)))
            kept += 1
        parts.append(part)
    merged = merge_manifests(parts, out)
    merged.save(out / "manifest.json")
    return merged


@dataclass
class AugmentationBenefitResult:
    per_seed: list[dict]
    mean_base: float
    mean_aug: float
    gap: float
    direction_all_seeds: bool

    def as_dict(self) -> dict:
        return {
            "per_seed": self.per_seed,
            "mean_base_map50": self.mean_base,
            "mean_augmented_map50": self.mean_aug,
            "gap": self.gap,
            "direction_all_seeds": self.direction_all_seeds,
        }


def augmentation_benefit(work_dir, seeds=(1, 2, 3), n_base: int = 40, n_gan: int = 80,
                         n_heldout_synth: int = 60, n_heldout_gan: int = 60,
                         size: int = 208, input_res: int = 104,
                         max_batches: int = 600, data_seed: int = 11,
                         lighting: float = 1.0) -> AugmentationBenefitResult:
    """Held-out mAP of base-only vs GAN-augmented training, over pinned seeds.

    Mirrors the published evaluation protocol: the reported accuracy was
    measured on a split of the ConSinGAN-generated pool, so the held-out
    set here mixes fresh synthetic scenes with samples from held-out
    pyramids whose sources never enter training. Per-sample lighting
    variation keeps forty base images from spanning the appearance
    distribution on their own.
    """
    work = Path(work_dir)
    os.makedirs(work, exist_ok=True)

    base = synth.generate_dataset(
        synth.desk_spec(n_base, normal_count=0, size=size, lighting=lighting),
        work / "base", seed=data_seed)
    heldout_synth = synth.generate_dataset(
        synth.desk_spec(n_heldout_synth, normal_count=max(4, n_heldout_synth // 8),
                        size=size, lighting=lighting),
        work / "heldout", seed=data_seed + 5000)

    n_gans = 16
    gan = train_gan_bank(base, work / "gan", n_gans=n_gans, gan_iters=120,
                         samples_each=n_gan // n_gans, seed=data_seed)

    # held-out generated scenes come from pyramids trained on a disjoint
    # source pool, so neither condition has seen them
    heldout_sources = synth.generate_dataset(
        synth.desk_spec(24, normal_count=0, size=size, lighting=lighting),
        work / "heldout_sources", seed=data_seed + 9000)
    n_heldout_pyramids = 12
    heldout_gan = train_gan_bank(heldout_sources, work / "heldout_gan",
                                 n_gans=n_heldout_pyramids, gan_iters=120,
                                 samples_each=n_heldout_gan // n_heldout_pyramids,
                                 seed=data_seed + 7000)

    base_rooted = rebase_manifest(base, work)
    augmented = merge_manifests([base, gan], work)
    heldout = merge_manifests([heldout_synth, heldout_gan], work)

    # same anchor priors for both conditions: the comparison isolates the
    # effect of the extra samples
    anchors = dt.kmeans_anchors([b for m in base.images for b in m.boxes], 3)

    per_seed = []
    for s in seeds:
        row = {"seed": s}
        for name, man in (("base", base_rooted), ("augmented", augmented)):
            cfg = dt.desk_config(input_res=input_res, max_batches=max_batches, seed=s)
            cfg.anchors = anchors
            model, _ = dt.train(man, cfg, fit_anchors=False)
            res = dt.evaluate(model, heldout, iou_threshold=0.5, conf_threshold=0.02)
            row[name] = res["map50"]
        row["gap"] = row["augmented"] - row["base"]
        per_seed.append(row)

    mean_base = float(np.mean([r["base"] for r in per_seed]))
    mean_aug = float(np.mean([r["augmented"] for r in per_seed]))
    return AugmentationBenefitResult(
        per_seed=per_seed, mean_base=mean_base, mean_aug=mean_aug,
        gap=mean_aug - mean_base,
        direction_all_seeds=all(r["gap"] > 0 for r in per_seed),
    )


# ---------------------------------------------------------------------------
# Baseline separability
# ---------------------------------------------------------------------------

@dataclass
class BaselineSeparabilityResult:
    per_side: list[dict]
    overall_accuracy: float
    configs: list[baseline.ThresholdConfig]

    def as_dict(self) -> dict:
        return {
            "per_side": self.per_side,
            "overall_accuracy": self.overall_accuracy,
            "configs": [c.as_dict() for c in self.configs],
        }


def baseline_separability(work_dir, n_defects: int = 48, n_normals: int = 48,
                          size: int = 256, seed: int = 3) -> BaselineSeparabilityResult:
    """Tune per-side thresholds on a train split; report held-out accuracy."""
    work = Path(work_dir)
    man = synth.generate_dataset(synth.desk_spec(n_defects, normal_count=n_normals, size=size),
                                 work / "data", seed=seed)
    train, _, test = synth.split_dataset(man, ratios=(0.7, 0.0, 0.3), seed=seed)

    grid = baseline.SearchGrid(
        min_gray_values=tuple(range(0, 256, 8)),
        max_gray_values=tuple(range(7, 256, 8)),
        tb_values=(25, 50, 100, 150),
        preprocess_values=("r_minus_g", "g_minus_b"),
    )
    configs = []
    rows = []
    total_dt = total_f = 0
    for side in synth.SIDES:
        side_train = [m for m in train.images if m.side == side]
        side_test = [m for m in test.images if m.side == side]
        if not side_train or not side_test:
            continue
        cfg = baseline.tune_thresholds(train, side, grid)
        configs.append(cfg)
        errors = 0
        for m in side_test:
            img = load_image(test.resolve(m))
            verdict = baseline.classify(img, cfg).verdict
            truth = "defective" if m.boxes else "normal"
            errors += verdict != truth
        rep = accuracy(len(side_test), errors)
        rows.append({"side": side.value, "test_number": rep.dt, "errors": rep.f, "accuracy": rep.a})
        total_dt += rep.dt
        total_f += errors
    overall = accuracy(total_dt, total_f).a
    return BaselineSeparabilityResult(per_side=rows, overall_accuracy=overall, configs=configs)


def write_json(obj: dict, path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        json.dump(obj, f, indent=1)
