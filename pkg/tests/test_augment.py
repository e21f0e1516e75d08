import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dipaoi import augment, synth
from dipaoi.imaging import Image
from dipaoi.synth import Box, Side


@pytest.fixture(scope="module")
def defect_sample():
    img = synth.render_normal(Side.FRONT, 256, 1)
    out, box = synth.inject_defect(img, Side.FRONT, synth.DefectKind.SCRATCH, 4)
    return out, [box]


def test_flip_involution(defect_sample):
    img, boxes = defect_sample
    f1, b1 = augment.flip_v(img, boxes)
    f2, b2 = augment.flip_v(f1, b1)
    assert f2 == img
    assert b2[0].cy == pytest.approx(boxes[0].cy)
    assert b2[0].cx == boxes[0].cx
    assert (b1[0].w, b1[0].h) == (boxes[0].w, boxes[0].h)


def test_mirror_involution_and_mapping(defect_sample):
    img, boxes = defect_sample
    m1, b1 = augment.mirror_h(img, boxes)
    m2, b2 = augment.mirror_h(m1, b1)
    assert m2 == img
    assert b2[0].cx == pytest.approx(boxes[0].cx)
    box = Box(0.25, 0.25, 0.1, 0.1)
    _, [mapped] = augment.mirror_h(img, [box])
    assert (mapped.cx, mapped.cy, mapped.w, mapped.h) == (0.75, 0.25, 0.1, 0.1)


def test_flipped_box_still_covers_painted_pixels(defect_sample):
    """Pixel-membership oracle: painted pixels stay inside the moved box."""
    img, boxes = defect_sample
    base = synth.render_normal(Side.FRONT, 256, 1)
    mask = np.any(img.pixels != base.pixels, axis=2)
    for op in (augment.flip_v, augment.mirror_h):
        out, [b] = op(img, boxes)
        base_t, _ = op(base, [])
        mask_t = np.any(out.pixels != base_t.pixels, axis=2)
        ys, xs = np.nonzero(mask_t)
        s = 256
        assert xs.min() >= (b.cx - b.w / 2) * s - 1e-9
        assert xs.max() < (b.cx + b.w / 2) * s + 1e-9
        assert ys.min() >= (b.cy - b.h / 2) * s - 1e-9
        assert ys.max() < (b.cy + b.h / 2) * s + 1e-9
        assert mask_t.sum() == mask.sum()


def test_brightness_identity_and_clamp():
    img = Image(np.full((3, 3, 3), 200, np.uint8))
    assert augment.adjust_brightness(img, 1.0) == img
    assert np.all(augment.adjust_brightness(img, 2.0).pixels == 255)
    half = augment.adjust_brightness(Image(np.full((3, 3, 3), 128, np.uint8)), 0.5)
    assert np.all(half.pixels == 64)
    with pytest.raises(augment.AugmentError):
        augment.adjust_brightness(img, 0.05)


def test_median_constant_fixed_point():
    img = Image(np.full((6, 6, 3), 77, np.uint8))
    assert augment.median_filter(img, 3) == img


def test_median_removes_salt():
    px = np.zeros((5, 5, 1), np.uint8)
    px[2, 2] = 255
    out = augment.median_filter(Image(px), 3)
    assert out.pixels[2, 2, 0] == 0


def test_median_center_is_sorted_middle():
    vals = np.array([10, 20, 30, 40, 50, 60, 70, 80, 90], np.uint8).reshape(3, 3, 1)
    out = augment.median_filter(Image(vals), 3)
    assert out.pixels[1, 1, 0] == sorted(vals.reshape(-1))[4] == 50


def test_median_rejects_even_window():
    with pytest.raises(augment.AugmentError):
        augment.median_filter(Image.new(4, 4, 1), 4)


def test_noise_identity_at_zero_and_determinism(defect_sample):
    img, _ = defect_sample
    assert augment.add_noise(img, 0, 3) == img
    assert augment.add_noise(img, 10, 3) == augment.add_noise(img, 10, 3)
    assert augment.add_noise(img, 10, 3) != augment.add_noise(img, 10, 4)


def test_blur_identity_at_zero(defect_sample):
    img, _ = defect_sample
    assert augment.gaussian_blur(img, 0) == img


def test_blur_kernel_normalized():
    for sigma in (0.5, 1.0, 2.3, 4.0):
        assert augment.gaussian_kernel(sigma).sum() == pytest.approx(1.0, abs=1e-6)


def test_blur_preserves_constant_mean():
    img = Image(np.full((16, 16, 1), 131, np.uint8))
    out = augment.gaussian_blur(img, 2.0)
    assert abs(int(out.pixels.mean()) - 131) <= 1


@given(st.integers(0, 255), st.floats(0.1, 4.0))
@settings(max_examples=40, deadline=None)
def test_outputs_stay_in_range(value, factor):
    img = Image(np.full((4, 4, 3), value, np.uint8))
    for out in (augment.adjust_brightness(img, factor),
                augment.add_noise(img, 20, 1),
                augment.gaussian_blur(img, 1.0)):
        assert out.pixels.min() >= 0 and out.pixels.max() <= 255


def test_augment_manifest_cardinality(tmp_path):
    man = synth.generate_dataset(synth.desk_spec(6, normal_count=4, size=256),
                                 tmp_path / "src", seed=2)
    out = augment.augment_manifest(man, ["flip", "brightness"], tmp_path / "aug", seed=3)
    assert len(out.images) == len(man.images) * 2
    assert all(m.source == "augment" for m in out.images)
    # geometric op keeps the box count; photometric copies them verbatim
    for src, flip_m, bright_m in zip(man.images, out.images[::2], out.images[1::2]):
        assert len(flip_m.boxes) == len(src.boxes)
        assert [b.as_dict() for b in bright_m.boxes] == [b.as_dict() for b in src.boxes]


def test_augment_manifest_unknown_op(tmp_path):
    man = synth.generate_dataset(synth.desk_spec(2, size=256), tmp_path / "src", seed=2)
    with pytest.raises(augment.AugmentError):
        augment.augment_manifest(man, ["rotate13"], tmp_path / "aug", seed=3)
    with pytest.raises(augment.AugmentError):
        augment.augment_manifest(man, [], tmp_path / "aug", seed=3)
