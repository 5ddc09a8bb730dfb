import warnings

import cv2
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from errnet.imaging import (
    DimensionError,
    ImageFormatError,
    ManifestEntry,
    MisalignmentPolicyWarning,
    SynthesisParams,
    TrainingSample,
    composite,
    load_image,
    load_tensor,
    procedural_scene,
    random_misalign,
    read_manifest,
    sample_shift,
    save_image,
    save_tensor,
    shift_image,
    synthesize_pair,
    write_manifest,
)


def _write_png(path, arr):
    cv2.imwrite(str(path), arr)


def test_load_image_8bit_endpoints(tmp_path):
    raw = np.zeros((4, 4, 3), np.uint8)
    raw[0, 0] = 255
    raw[0, 1] = 128
    _write_png(tmp_path / "a.png", raw)
    img = load_image(tmp_path / "a.png")
    assert img.dtype == np.float32 and img.shape == (4, 4, 3)
    assert img[0, 0, 0] == 1.0
    assert img[1, 1, 0] == 0.0
    assert img[0, 1, 0] == pytest.approx(128 / 255, abs=1e-7)


def test_load_image_16bit_and_channel_order(tmp_path):
    raw = np.zeros((2, 2, 3), np.uint16)
    raw[..., 2] = 65535  # BGR on disk -> red channel
    _write_png(tmp_path / "b.png", raw)
    img = load_image(tmp_path / "b.png")
    assert img[..., 0].min() == 1.0 and img[..., 2].max() == 0.0


def test_load_image_errors(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_image(tmp_path / "missing.png")
    (tmp_path / "junk.png").write_bytes(b"not an image")
    with pytest.raises(OSError):
        load_image(tmp_path / "junk.png")
    _write_png(tmp_path / "gray.png", np.zeros((4, 4), np.uint8))
    with pytest.raises(ImageFormatError):
        load_image(tmp_path / "gray.png")


def test_png_and_float_roundtrip(tmp_path, rng):
    img = rng.random((5, 6, 3)).astype(np.float32)
    save_image(tmp_path / "x.png", img)
    back = load_image(tmp_path / "x.png")
    assert np.abs(back - img).max() <= 0.5 / 255 + 1e-6
    save_tensor(tmp_path / "x.npy", img)
    assert np.array_equal(load_tensor(tmp_path / "x.npy"), img)


def test_manifest_roundtrip(tmp_path):
    entries = [ManifestEntry(tmp_path / "in" / "a.png", tmp_path / "gt" / "a.png", True),
               ManifestEntry(tmp_path / "in" / "b.png", tmp_path / "gt" / "b.png", False)]
    write_manifest(tmp_path / "m.txt", entries)
    back = read_manifest(tmp_path / "m.txt")
    assert [(e.input_path, e.target_path, e.aligned) for e in back] == \
        [(e.input_path, e.target_path, e.aligned) for e in entries]


def test_training_sample_alignment_invariant():
    with pytest.raises(DimensionError):
        TrainingSample(np.zeros((4, 4, 3)), np.zeros((5, 4, 3)), aligned=True)
    TrainingSample(np.zeros((4, 4, 3)), np.zeros((5, 4, 3)), aligned=False)


# ---------------------------------------------------------------------------
# synthesis

def test_zero_reflection_gives_transmission(rng):
    t = rng.random((40, 40, 3)).astype(np.float32)
    s = synthesize_pair(t, np.zeros_like(t), SynthesisParams(crop_size=32), seed=3)
    assert np.array_equal(s.input, s.transmission)
    assert s.aligned and s.reflection is not None


def _reflect_index(i, n):
    # scipy "reflect": (d c b a | a b c d | d c b a)
    if i < 0:
        return -i - 1
    if i >= n:
        return 2 * n - i - 1
    return i


def _conv_oracle(img, kernel):
    h, w, c = img.shape
    kh, kw = kernel.shape
    out = np.zeros((h, w, c))
    for y in range(h):
        for x in range(w):
            for ch in range(c):
                acc = 0.0
                for i in range(kh):
                    for j in range(kw):
                        # true convolution flips the kernel
                        yy = _reflect_index(y + kh // 2 - i, h)
                        xx = _reflect_index(x + kw // 2 - j, w)
                        acc += kernel[i, j] * img[yy, xx, ch]
                out[y, x, ch] = acc
    return out


@pytest.mark.parametrize("constant", [True, False])
def test_fixed_kernel_composite_matches_convolution_oracle(constant, rng):
    kernel = np.array([[0.0, 0.1, 0.0], [0.1, 0.5, 0.2], [0.0, 0.05, 0.05]])
    if constant:
        t = np.full((8, 8, 3), 0.3, np.float32)
        r = np.full((8, 8, 3), 0.4, np.float32)
    else:
        t = (0.5 * rng.random((8, 8, 3))).astype(np.float32)
        r = rng.random((8, 8, 3)).astype(np.float32)
    params = SynthesisParams(reflection_weight_range=(0.5, 0.5), crop_size=8, blur_kernel=kernel,
                             clip_mode="hard-clip")
    s = synthesize_pair(t, r, params, seed=0)
    expected = np.clip(t.astype(np.float64) + 0.5 * _conv_oracle(r.astype(np.float64), kernel), 0, 1)
    np.testing.assert_allclose(s.input, expected, atol=1e-6)


def test_subtract_adapt_removes_mean_overflow():
    t = np.full((2, 2, 3), 0.8)
    r = np.full((2, 2, 3), 0.2)
    r[0, 0] = 0.6  # overflow 0.4 at one pixel, 0.0 elsewhere -> mean overflow over overflowing pixels = 0.4
    mixed, used = composite(t, r, "subtract-adapt")
    np.testing.assert_allclose(used[0, 0], 0.2)
    np.testing.assert_allclose(used[1, 1], 0.0, atol=1e-12)
    np.testing.assert_allclose(mixed, np.clip(t + used, 0, 1))


def test_default_crop_is_224():
    assert SynthesisParams().crop_size == 224
    t = procedural_scene(240, seed=0)
    s = synthesize_pair(t, procedural_scene(240, seed=1), seed=0)
    assert s.input.shape == (224, 224, 3)


def test_synthesis_rejects_undersized_sources():
    with pytest.raises(DimensionError):
        synthesize_pair(np.zeros((100, 300, 3)), np.zeros((300, 300, 3)), SynthesisParams())


def test_synthesis_deterministic():
    t, r = procedural_scene(48, seed=5), procedural_scene(48, seed=6)
    p = SynthesisParams(crop_size=32)
    a, b = synthesize_pair(t, r, p, seed=11), synthesize_pair(t, r, p, seed=11)
    assert np.array_equal(a.input, b.input) and np.array_equal(a.reflection, b.reflection)
    c = synthesize_pair(t, r, p, seed=12)
    assert not np.array_equal(a.input, c.input)


@settings(max_examples=1000, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), mode=st.sampled_from(["subtract-adapt", "hard-clip"]))
def test_composite_stays_in_unit_range(seed, mode):
    g = np.random.default_rng(seed)
    t = g.random((8, 8, 3))
    r = g.random((8, 8, 3)) * g.uniform(0.01, 1.0)
    mixed, used = composite(t, r, mode)
    assert np.isfinite(mixed).all()
    assert mixed.min() >= 0 and mixed.max() <= 1


# ---------------------------------------------------------------------------
# misalignment

def test_zero_shift_is_identity(rng):
    img = rng.random((16, 16, 3)).astype(np.float32)
    assert np.array_equal(random_misalign(img, 0, seed=4), img)


def test_forced_shift_index_remap():
    h, w = 12, 10
    yy, xx = np.mgrid[0:h, 0:w]
    ramp = np.stack([yy, xx, yy * w + xx], axis=-1).astype(np.float64)
    out = shift_image(ramp, 3, -2)
    for y in range(h):
        for x in range(w):
            sy, sx = y - 3, x + 2
            if 0 <= sy < h and 0 <= sx < w:
                assert np.array_equal(out[y, x], ramp[sy, sx])
            else:  # edge replication
                assert np.array_equal(out[y, x], ramp[min(max(sy, 0), h - 1), min(max(sx, 0), w - 1)])


def test_default_max_shift_is_10():
    import inspect
    assert inspect.signature(random_misalign).parameters["max_shift"].default == 10


def test_shift_sampling_uniform_range():
    shifts = np.array([sample_shift(3, s) for s in range(2000)])
    assert shifts.min() == -3 and shifts.max() == 3
    counts = np.bincount(shifts[:, 0] + 3)
    assert counts.min() > 2000 / 7 * 0.7


def test_shift_policy(rng):
    img = rng.random((40, 40, 3))
    with pytest.warns(MisalignmentPolicyWarning):
        random_misalign(img, 25, seed=0)
    with pytest.raises(ValueError):
        random_misalign(img, 25, seed=0, strict=True)
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        random_misalign(img, 20, seed=0)


@settings(max_examples=200, deadline=None)
@given(dy=st.integers(-10, 10), dx=st.integers(-10, 10), seed=st.integers(0, 1000))
def test_shift_then_unshift_restores_interior(dy, dx, seed):
    img = np.random.default_rng(seed).random((40, 36, 3))
    back = shift_image(shift_image(img, dy, dx), -dy, -dx)
    m = 10
    assert np.array_equal(back[m:-m, m:-m], img[m:-m, m:-m])


def test_misalign_deterministic(rng):
    img = rng.random((32, 32, 3))
    assert np.array_equal(random_misalign(img, 10, seed=9), random_misalign(img, 10, seed=9))
