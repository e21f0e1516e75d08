"""Progressive multi-stage single-image GAN for defect-image augmentation.

One generator stage per resolution, grown coarse to fine. Training stage i
updates only stage i's convolutions (earlier stages stay bit-identical) and
starts the critic from the previous stage's weights. The objective per
stage is the critic (Wasserstein) loss with gradient penalty plus an
alpha-weighted reconstruction term: the pyramid fed its coarsest target
with no noise must reproduce the stage-resolution target.

The gradient-penalty value is exact (one backward pass w.r.t. the mixed
input); its parameter gradient uses the directional central-difference
identity d/dtheta <grad_x D, c> ~ [grad_theta D(x+ec) - grad_theta D(x-ec)]
/ 2e, which needs only first-order backprop.
"""

from __future__ import annotations

import json
import math
import os
import zlib
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from . import nnkit as nk
from .imaging import Image, resize_bilinear_array, round_half_away, save_image
from .rng import derive_rng
from .synth import Box, Manifest, SampleMeta, Side

F32 = np.float32


class GanError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# Config and schedule
# ---------------------------------------------------------------------------

@dataclass
class GanTrainConfig:
    num_stages: int = 10
    min_res: int = 25
    max_res: int = 200
    lr: float = 0.1
    iters_per_stage: int = 300
    alpha: float = 10.0
    gp_weight: float = 0.1
    seed: int = 0
    channels: int = 32
    # sampling noise amplitudes: small enough that samples stay near the
    # reconstruction manifold (the defect and its box remain valid), large
    # enough that every sample differs
    base_noise: float = 0.02
    stage_noise: float = 0.006
    jitter: str = "none"       # one preprocessing jitter per training run

    def validate(self) -> None:
        if self.num_stages < 1:
            raise GanError("num_stages must be >= 1")
        if self.alpha < 0:
            raise GanError("alpha must be >= 0")
        if self.min_res > self.max_res:
            raise GanError("min_res must be <= max_res")


def desk_config(**overrides) -> GanTrainConfig:
    cfg = GanTrainConfig(num_stages=4, min_res=25, max_res=200, lr=5e-4, iters_per_stage=300)
    for k, v in overrides.items():
        setattr(cfg, k, v)
    return cfg


def paper_config(**overrides) -> GanTrainConfig:
    """Published hyperparameters kept verbatim: lr 0.1, 10 stages."""
    cfg = GanTrainConfig(num_stages=10, min_res=25, max_res=200, lr=0.1, iters_per_stage=300)
    for k, v in overrides.items():
        setattr(cfg, k, v)
    return cfg


def resolution_schedule(min_res: int, max_res: int, n: int) -> list[int]:
    """Geometric progression from min_res to max_res, strictly increasing."""
    if n < 1:
        raise GanError("need at least one stage")
    if min_res > max_res:
        raise GanError("min_res must be <= max_res")
    if n == 1:
        if min_res != max_res:
            raise GanError("a single stage needs min_res == max_res")
        return [min_res]
    if max_res - min_res + 1 < n:
        raise GanError(f"{n} stages do not fit between {min_res} and {max_res}")
    ratio = (max_res / min_res) ** (1.0 / (n - 1))
    out = [min_res]
    for k in range(1, n - 1):
        r = int(round(min_res * ratio**k))
        out.append(max(r, out[-1] + 1))
    out.append(max_res)
    if out[-1] <= out[-2]:
        raise GanError(f"{n} stages do not fit between {min_res} and {max_res}")
    return out


# ---------------------------------------------------------------------------
# Image <-> tensor helpers
# ---------------------------------------------------------------------------

def image_to_unit(img: Image) -> np.ndarray:
    """uint8 HWC -> float32 NCHW in [-1, 1]."""
    f = img.pixels.astype(F32) / 127.5 - 1.0
    if f.shape[2] == 1:
        f = np.repeat(f, 3, axis=2)
    return np.ascontiguousarray(f.transpose(2, 0, 1))[None]


def unit_to_image(arr: np.ndarray) -> Image:
    a = np.clip((arr[0].transpose(1, 2, 0) + 1.0) * 127.5, 0, 255)
    return Image(round_half_away(a).astype(np.uint8))


def downsample_unit(arr: np.ndarray, res: int) -> np.ndarray:
    hwc = arr[0].transpose(1, 2, 0).astype(np.float64)
    small = resize_bilinear_array(hwc, res, res)
    return np.ascontiguousarray(small.transpose(2, 0, 1).astype(F32))[None]


def params_checksum(params) -> int:
    crc = 0
    for p in params:
        crc = zlib.crc32(np.ascontiguousarray(p.data).tobytes(), crc)
    return crc


# ---------------------------------------------------------------------------
# Generator stages and critic
# ---------------------------------------------------------------------------

class StageBlock:
    """Residual refinement block: three 3x3 convs, leaky 0.05, 3->C->C->3."""

    def __init__(self, channels: int, rng, name: str):
        self.c1 = nk.Conv2d(3, channels, 3, pad=1, rng=rng, name=f"{name}.c1")
        self.c2 = nk.Conv2d(channels, channels, 3, pad=1, rng=rng, name=f"{name}.c2")
        self.c3 = nk.Conv2d(channels, 3, 3, pad=1, rng=rng, name=f"{name}.c3")

    def __call__(self, x):
        h = nk.leaky_relu(self.c1(x), 0.05)
        h = nk.leaky_relu(self.c2(h), 0.05)
        return self.c3(h)

    def forward_data(self, x: np.ndarray) -> np.ndarray:
        """Graph-free forward for frozen stages and sampling."""
        h = nk.leaky_relu_data(nk.conv2d_data(x, self.c1.w.data, self.c1.b.data, 1, 1), 0.05)
        h = nk.leaky_relu_data(nk.conv2d_data(h, self.c2.w.data, self.c2.b.data, 1, 1), 0.05)
        return nk.conv2d_data(h, self.c3.w.data, self.c3.b.data, 1, 1)

    def params(self):
        return self.c1.params() + self.c2.params() + self.c3.params()


class Critic:
    """Per-stage Wasserstein critic: strided conv stack to one channel, then mean."""

    def __init__(self, channels: int, rng, name: str = "critic"):
        self.c1 = nk.Conv2d(3, channels, 3, stride=2, pad=1, rng=rng, name=f"{name}.c1")
        self.c2 = nk.Conv2d(channels, channels, 3, pad=1, rng=rng, name=f"{name}.c2")
        self.c3 = nk.Conv2d(channels, channels, 3, pad=1, rng=rng, name=f"{name}.c3")
        self.c4 = nk.Conv2d(channels, 1, 3, pad=1, rng=rng, name=f"{name}.c4")

    def __call__(self, x):
        h = nk.leaky_relu(self.c1(x), 0.05)
        h = nk.leaky_relu(self.c2(h), 0.05)
        h = nk.leaky_relu(self.c3(h), 0.05)
        return nk.mean(self.c4(h))

    def params(self):
        return self.c1.params() + self.c2.params() + self.c3.params() + self.c4.params()

    def clone_state(self) -> list[np.ndarray]:
        return [p.data.copy() for p in self.params()]

    def load_state(self, state: list[np.ndarray]) -> None:
        for p, s in zip(self.params(), state):
            p.data = s.copy()


@dataclass
class GanPyramid:
    stages: list[StageBlock]
    resolutions: list[int]
    target_pyramid: list[np.ndarray]      # s_i, float NCHW in [-1,1]
    recon_noise: np.ndarray               # fixed stage-0 noise for the recon path
    cfg: GanTrainConfig
    source_meta: dict = field(default_factory=dict)
    trained_stages: int = 0

    @property
    def s0(self) -> np.ndarray:
        return self.target_pyramid[0]

    def stage_params(self, i: int):
        return self.stages[i].params()

    def all_params(self):
        out = []
        for s in self.stages:
            out.extend(s.params())
        return out


def build_pyramid(img: Image, cfg: GanTrainConfig, source_meta: dict | None = None) -> GanPyramid:
    cfg.validate()
    res = resolution_schedule(cfg.min_res, cfg.max_res, cfg.num_stages)
    unit = image_to_unit(img)
    targets = [downsample_unit(unit, r) for r in res]
    rng = derive_rng(cfg.seed, 11)
    stages = [StageBlock(cfg.channels, rng, f"g{i}") for i in range(cfg.num_stages)]
    # fixed reconstruction noise, zero by default: the recon path feeds the
    # coarsest target exactly
    z_rec = np.zeros_like(targets[0])
    return GanPyramid(stages=stages, resolutions=res, target_pyramid=targets,
                      recon_noise=z_rec, cfg=cfg, source_meta=source_meta or {})


def sample_noises(pyramid: GanPyramid, upto_stage: int, rng) -> list[np.ndarray]:
    cfg = pyramid.cfg
    out = []
    for j in range(upto_stage + 1):
        r = pyramid.resolutions[j]
        amp = cfg.base_noise if j == 0 else cfg.stage_noise
        out.append((rng.standard_normal((1, 3, r, r)) * amp).astype(F32))
    return out


def generate(pyramid: GanPyramid, stage: int, noises: list[np.ndarray] | None = None,
             through_graph_stage: int | None = None):
    """Forward the pyramid up to `stage`; returns an nnkit Tensor.

    With noises None the reconstruction path is taken (coarsest target plus
    the fixed recon noise, zero at later stages). `through_graph_stage`
    detaches everything below that stage so only its parameters receive
    gradients.
    """
    if stage >= len(pyramid.stages):
        raise GanError(f"stage {stage} out of range ({len(pyramid.stages)} stages)")
    cut = through_graph_stage
    x = nk.Tensor(pyramid.s0 + (pyramid.recon_noise if noises is None else noises[0]))
    y = None
    for j in range(stage + 1):
        if j == 0:
            inp = x
        else:
            r = pyramid.resolutions[j]
            prev = y if cut is None or j != cut else nk.Tensor(y.data)
            inp = nk.resize_nearest2d(prev, r, r)
        z = None if noises is None else noises[j] if j > 0 else None
        block_in = inp if z is None else nk.add(inp, nk.Tensor(z))
        y = nk.add(inp, pyramid.stages[j](block_in))
    return y


def _resize_nearest_data(x: np.ndarray, oh: int, ow: int) -> np.ndarray:
    n, c, h, w = x.shape
    ys = np.minimum(((np.arange(oh) + 0.5) * (h / oh)).astype(np.int64), h - 1)
    xs = np.minimum(((np.arange(ow) + 0.5) * (w / ow)).astype(np.int64), w - 1)
    return np.ascontiguousarray(x[:, :, ys][:, :, :, xs])


def generate_data(pyramid: GanPyramid, stage: int, noises: list[np.ndarray] | None = None) -> np.ndarray:
    """Graph-free pyramid forward; bit-identical to generate(...).data."""
    if stage >= len(pyramid.stages):
        raise GanError(f"stage {stage} out of range ({len(pyramid.stages)} stages)")
    x = pyramid.s0 + (pyramid.recon_noise if noises is None else noises[0])
    y = None
    for j in range(stage + 1):
        if j == 0:
            inp = x
        else:
            r = pyramid.resolutions[j]
            inp = _resize_nearest_data(y, r, r)
        block_in = inp if (noises is None or j == 0) else inp + noises[j]
        y = inp + pyramid.stages[j].forward_data(block_in)
    return y


def recon_loss(pyramid: GanPyramid, stage: int, through_graph_stage: int | None = None):
    """Mean squared error between the recon path and the stage target."""
    out = generate(pyramid, stage, noises=None, through_graph_stage=through_graph_stage)
    return nk.mse(out, nk.Tensor(pyramid.target_pyramid[stage]))


# ---------------------------------------------------------------------------
# WGAN-GP pieces
# ---------------------------------------------------------------------------

def critic_input_grad(critic: Critic, x_data: np.ndarray) -> np.ndarray:
    """Gradient of the critic score w.r.t. its input image."""
    x = nk.Tensor(x_data, requires_grad=True)
    for p in critic.params():
        p.grad = None
    critic(x).backward()
    g = x.grad.copy()
    for p in critic.params():
        p.grad = None
    return g


def gradient_penalty_value(critic: Critic, x_hat: np.ndarray) -> tuple[float, np.ndarray, float]:
    """(penalty, input gradient, gradient norm) at the mixed sample."""
    g = critic_input_grad(critic, x_hat)
    norm = float(np.sqrt(np.sum(g.astype(np.float64) ** 2)))
    return (norm - 1.0) ** 2, g, norm


def _collect_param_grads(loss_fn, params) -> list[np.ndarray]:
    saved = [p.grad for p in params]
    for p in params:
        p.grad = None
    loss_fn().backward()
    got = [np.zeros_like(p.data) if p.grad is None else p.grad for p in params]
    for p, s in zip(params, saved):
        p.grad = s
    return got


def add_gradient_penalty_grads(critic: Critic, x_hat: np.ndarray, weight: float,
                               fd_step: float = 1e-2) -> float:
    """Accumulate d(penalty)/d(critic params) into .grad; returns the penalty.

    Uses the directional central-difference identity along the input
    gradient, so only two extra ordinary backward passes are needed.
    """
    penalty, g, norm = gradient_penalty_value(critic, x_hat)
    if norm < 1e-12:
        return penalty
    params = critic.params()
    eps = fd_step / norm
    plus = _collect_param_grads(lambda: critic(nk.Tensor(x_hat + eps * g)), params)
    minus = _collect_param_grads(lambda: critic(nk.Tensor(x_hat - eps * g)), params)
    coeff = weight * 2.0 * (norm - 1.0) / norm / (2.0 * eps)
    for p, gp, gm in zip(params, plus, minus):
        upd = (coeff * (gp.astype(np.float64) - gm.astype(np.float64))).astype(F32)
        p.grad = upd if p.grad is None else p.grad + upd
    return penalty


# ---------------------------------------------------------------------------
# Stage training
# ---------------------------------------------------------------------------

@dataclass
class StageReport:
    stage: int
    resolution: int
    recon_start: float
    recon_end: float
    d_losses: list[float] = field(default_factory=list)
    g_losses: list[float] = field(default_factory=list)
    recon_curve: list[float] = field(default_factory=list)
    critic_checksum_start: int = 0
    critic_checksum_end: int = 0
    frozen_checksum_before: int = 0
    frozen_checksum_after: int = 0

    def as_dict(self) -> dict:
        return asdict(self)


def train_stage(pyramid: GanPyramid, stage: int, critic: Critic,
                iters: int | None = None) -> StageReport:
    """Adversarial + reconstruction training of one pyramid stage.

    Only stage `stage`'s parameters and the critic move; everything below is
    frozen by construction (excluded from the optimizer and detached in the
    graph). Alternates one critic update and one generator update per iter.
    """
    cfg = pyramid.cfg
    if stage != pyramid.trained_stages:
        raise GanError(f"stages must be trained in order; expected {pyramid.trained_stages}, got {stage}")
    iters = cfg.iters_per_stage if iters is None else iters

    frozen = []
    for j in range(stage):
        frozen.extend(pyramid.stage_params(j))
    report = StageReport(
        stage=stage,
        resolution=pyramid.resolutions[stage],
        recon_start=recon_loss(pyramid, stage).item(),
        recon_end=math.nan,
        critic_checksum_start=params_checksum(critic.params()),
        frozen_checksum_before=params_checksum(frozen),
    )

    g_params = pyramid.stage_params(stage)
    opt_g = nk.Adam(g_params, lr=cfg.lr)
    opt_d = nk.Adam(critic.params(), lr=cfg.lr)
    real = pyramid.target_pyramid[stage]
    res = pyramid.resolutions[stage]

    # the recon prefix is noise-free and frozen: precompute once
    if stage == 0:
        recon_inp_data = pyramid.s0 + pyramid.recon_noise
    else:
        recon_inp_data = _resize_nearest_data(generate_data(pyramid, stage - 1), res, res)

    def stage_forward(inp_data: np.ndarray, noise: np.ndarray | None):
        inp = nk.Tensor(inp_data)
        block_in = inp if noise is None else nk.add(inp, nk.Tensor(noise))
        return nk.add(inp, pyramid.stages[stage](block_in))

    try:
        for it in range(iters):
            rng = derive_rng(cfg.seed, 500 + stage, it)

            # fresh sampling path through the frozen prefix
            noises = sample_noises(pyramid, stage, rng)
            if stage == 0:
                prefix_data = pyramid.s0 + noises[0]
            else:
                prefix_data = _resize_nearest_data(generate_data(pyramid, stage - 1, noises), res, res)
            z_i = noises[stage] if stage > 0 else None

            # critic update; the gradient penalty runs lazily every 4th iter
            # with 4x weight, which keeps its expectation unchanged
            opt_d.zero_grad()
            block_in = prefix_data if z_i is None else prefix_data + z_i
            fake_data = prefix_data + pyramid.stages[stage].forward_data(block_in)
            d_loss = nk.sub(critic(nk.Tensor(fake_data)), critic(nk.Tensor(real)))
            d_loss.backward()
            penalty = 0.0
            if it % 4 == 0:
                mix = F32(rng.uniform())
                x_hat = mix * real + (1.0 - mix) * fake_data
                penalty = add_gradient_penalty_grads(critic, x_hat, 4.0 * cfg.gp_weight)
            opt_d.step()
            report.d_losses.append(d_loss.item() + cfg.gp_weight * penalty)

            # generator update: adversarial plus alpha-weighted reconstruction.
            # The recon term is the plain squared L2 norm (a sum, not a mean),
            # which is what keeps it competitive with the critic gradient.
            opt_g.zero_grad()
            fake = stage_forward(prefix_data, z_i)
            adv = nk.mul(critic(fake), -1.0)
            rec = nk.mse(stage_forward(recon_inp_data, None), nk.Tensor(real))
            g_loss = nk.add(adv, nk.mul(rec, cfg.alpha * real.size))
            g_loss.backward()
            opt_g.step()
            report.g_losses.append(g_loss.item())
            report.recon_curve.append(rec.item())
    except nk.NonFiniteError as e:
        raise GanError(f"stage {stage} training diverged: {e}") from e

    report.recon_end = recon_loss(pyramid, stage).item()
    report.critic_checksum_end = params_checksum(critic.params())
    report.frozen_checksum_after = params_checksum(frozen)
    pyramid.trained_stages = stage + 1
    return report


def train_pyramid(img: Image, cfg: GanTrainConfig,
                  source_meta: dict | None = None) -> tuple[GanPyramid, Critic, list[StageReport]]:
    """Full progressive run: every stage in order, critic warm-started."""
    pyramid = build_pyramid(img, cfg, source_meta)
    critic = Critic(cfg.channels, derive_rng(cfg.seed, 13), name="d")
    reports = []
    for i in range(cfg.num_stages):
        reports.append(train_stage(pyramid, i, critic))
    return pyramid, critic, reports


# ---------------------------------------------------------------------------
# Source jitter (one per training run)
# ---------------------------------------------------------------------------

JITTER_KINDS = ("none", "mirror", "flip", "rot90", "translate", "scale", "noise")


def jitter_source(img: Image, boxes: list[Box], kind: str, seed: int) -> tuple[Image, list[Box]]:
    """Apply one preprocessing jitter to the single source image and its boxes."""
    from . import augment

    if kind == "none":
        return img.copy(), list(boxes)
    if kind == "mirror":
        return augment.mirror_h(img, boxes)
    if kind == "flip":
        return augment.flip_v(img, boxes)
    if kind == "noise":
        return augment.add_noise(img, 8.0, seed), list(boxes)
    if kind == "rot90":
        out = Image(np.ascontiguousarray(np.rot90(img.pixels, k=1)))
        return out, [Box(b.cy, 1.0 - b.cx, b.h, b.w, b.cls) for b in boxes]
    rng = derive_rng(seed, 77)
    if kind == "translate":
        dx = int(rng.integers(-img.width // 10, img.width // 10 + 1))
        dy = int(rng.integers(-img.height // 10, img.height // 10 + 1))
        px = np.full_like(img.pixels, 100)
        xs0, xs1 = max(0, dx), min(img.width, img.width + dx)
        ys0, ys1 = max(0, dy), min(img.height, img.height + dy)
        px[ys0:ys1, xs0:xs1] = img.pixels[ys0 - dy : ys1 - dy, xs0 - dx : xs1 - dx]
        out_boxes = []
        for b in boxes:
            cx = min(max(b.cx + dx / img.width, b.w / 2), 1.0 - b.w / 2)
            cy = min(max(b.cy + dy / img.height, b.h / 2), 1.0 - b.h / 2)
            out_boxes.append(Box(cx, cy, b.w, b.h, b.cls))
        return Image(px), out_boxes
    if kind == "scale":
        from .imaging import resize_bilinear

        s = float(rng.uniform(0.85, 1.15))
        nw, nh = max(8, round(img.width * s)), max(8, round(img.height * s))
        scaled = resize_bilinear(img, nw, nh)
        if s >= 1.0:
            # center-crop the enlarged render back to the original frame
            ox, oy = (nw - img.width) // 2, (nh - img.height) // 2
            px = scaled.pixels[oy : oy + img.height, ox : ox + img.width].copy()
            ox, oy = -ox, -oy
        else:
            # paste the shrunk render centered on background
            ox, oy = (img.width - nw) // 2, (img.height - nh) // 2
            px = np.full_like(img.pixels, 100)
            px[oy : oy + nh, ox : ox + nw] = scaled.pixels
        out_boxes = []
        for b in boxes:
            w = min(1.0, b.w * nw / img.width)
            h = min(1.0, b.h * nh / img.height)
            cx = (b.cx * nw + ox) / img.width
            cy = (b.cy * nh + oy) / img.height
            cx = min(max(cx, w / 2), 1.0 - w / 2)
            cy = min(max(cy, h / 2), 1.0 - h / 2)
            out_boxes.append(Box(cx, cy, w, h, b.cls))
        return Image(px), out_boxes
    raise GanError(f"unknown jitter {kind!r}")


# ---------------------------------------------------------------------------
# Sampling, SSIM, persistence
# ---------------------------------------------------------------------------

def sample_image(pyramid: GanPyramid, seed: int) -> Image:
    if pyramid.trained_stages < len(pyramid.stages):
        raise GanError("pyramid is not fully trained")
    rng = derive_rng(pyramid.cfg.seed, 900, seed)
    noises = sample_noises(pyramid, len(pyramid.stages) - 1, rng)
    return unit_to_image(generate_data(pyramid, len(pyramid.stages) - 1, noises=noises))


def sample_dataset(pyramid: GanPyramid, count: int, seed: int, out_dir) -> Manifest:
    """Write final-stage samples as PPM + manifest, inheriting the source box."""
    if pyramid.trained_stages < len(pyramid.stages):
        raise GanError("pyramid is not fully trained")
    out = Path(out_dir)
    os.makedirs(out, exist_ok=True)
    meta = pyramid.source_meta
    side = Side(meta.get("side", "front"))
    boxes = [Box.from_dict(b) for b in meta.get("boxes", [])]
    subject = meta.get("subject", "gan")
    manifest = Manifest(base_dir=str(out))
    for k in range(count):
        img = sample_image(pyramid, seed + k)
        name = f"{subject}_{side.value}_consingan_{seed + k:05d}.ppm"
        save_image(img, out / name)
        manifest.images.append(SampleMeta(
            path=name, side=side, width=img.width, height=img.height,
            source="consingan", seed=seed + k, boxes=list(boxes),
        ))
    manifest.save(out / "manifest.json")
    return manifest


def ssim_gray(a: np.ndarray, b: np.ndarray, window: int = 8, stride: int = 4) -> float:
    """Mean SSIM over uniform windows of two uint8 gray arrays."""
    a = a.astype(np.float64)
    b = b.astype(np.float64)
    c1, c2 = (0.01 * 255) ** 2, (0.03 * 255) ** 2
    vals = []
    for y in range(0, a.shape[0] - window + 1, stride):
        for x in range(0, a.shape[1] - window + 1, stride):
            pa = a[y : y + window, x : x + window]
            pb = b[y : y + window, x : x + window]
            ma, mb = pa.mean(), pb.mean()
            va, vb = pa.var(), pb.var()
            cov = ((pa - ma) * (pb - mb)).mean()
            vals.append(((2 * ma * mb + c1) * (2 * cov + c2)) /
                        ((ma * ma + mb * mb + c1) * (va + vb + c2)))
    return float(np.mean(vals))


def save_pyramid(pyramid: GanPyramid, critic: Critic | None, out_dir) -> None:
    out = Path(out_dir)
    os.makedirs(out, exist_ok=True)
    params = pyramid.all_params() + (critic.params() if critic else [])
    nk.save_params(params, out / "gan.aoiw")
    sidecar = {
        "resolutions": pyramid.resolutions,
        "trained_stages": pyramid.trained_stages,
        "cfg": asdict(pyramid.cfg),
        "source_meta": pyramid.source_meta,
    }
    with open(out / "gan.json", "w", encoding="utf-8") as f:
        json.dump(sidecar, f, indent=1)
    np.save(out / "targets.npy", np.concatenate([t.reshape(-1) for t in pyramid.target_pyramid]))


def load_pyramid(model_dir) -> GanPyramid:
    model_dir = Path(model_dir)
    with open(model_dir / "gan.json", encoding="utf-8") as f:
        sidecar = json.load(f)
    cfg = GanTrainConfig(**sidecar["cfg"])
    res = sidecar["resolutions"]
    rng = derive_rng(cfg.seed, 11)
    stages = [StageBlock(cfg.channels, rng, f"g{i}") for i in range(cfg.num_stages)]
    flat = np.load(model_dir / "targets.npy")
    targets = []
    pos = 0
    for r in res:
        n = 3 * r * r
        targets.append(flat[pos : pos + n].reshape(1, 3, r, r).astype(F32))
        pos += n
    pyr = GanPyramid(stages=stages, resolutions=res, target_pyramid=targets,
                     recon_noise=np.zeros_like(targets[0]), cfg=cfg,
                     source_meta=sidecar["source_meta"],
                     trained_stages=sidecar["trained_stages"])
    loaded = nk.load_params(model_dir / "gan.aoiw")
    for p in pyr.all_params():
        p.data = loaded[p.name].copy()
    return pyr
