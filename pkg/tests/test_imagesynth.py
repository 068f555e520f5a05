import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from grain_ad import imagesynth
from grain_ad.errors import DataError, InvalidArgumentError
from grain_ad.image import Image, write_png
from grain_ad.imagesynth import SynthConfig, blend_anomaly

unit = st.floats(0.0, 1.0, allow_nan=False, width=32)


def _case(draw_shape=(6, 5)):
    return st.tuples(
        hnp.arrays(np.float32, draw_shape + (3,), elements=unit),
        hnp.arrays(np.float32, draw_shape + (3,), elements=unit),
        hnp.arrays(bool, draw_shape),
        st.floats(0.0, 1.0),
    )


def test_blend_hand_value():
    x = Image(np.full((1, 2, 3), 0.2, np.float32))
    a = Image(np.full((1, 2, 3), 0.8, np.float32))
    out = blend_anomaly(x, a, np.array([[True, False]]), 0.25)
    np.testing.assert_allclose(out.pixels[0, 0], 0.35, atol=1e-7)
    np.testing.assert_array_equal(out.pixels[0, 1], x.pixels[0, 1])


@settings(max_examples=100, deadline=None)
@given(_case())
def test_blend_properties(case):
    x, a, m, beta = case
    i_x, i_a = Image(x), Image(a)
    out = blend_anomaly(i_x, i_a, m, beta).pixels
    # locality: untouched outside the mask
    np.testing.assert_array_equal(out[~m], x[~m])
    # convexity: inside the mask the value lies between the two inputs
    lo, hi = np.minimum(x, a), np.maximum(x, a)
    assert np.all(out >= lo) and np.all(out <= hi)
    # agrees with the blend formula up to float32 rounding
    ref = (1 - m[..., None]) * x + beta * (m[..., None] * a) + (1 - beta) * (m[..., None] * x)
    np.testing.assert_allclose(out, ref, atol=1e-6)


@settings(max_examples=50, deadline=None)
@given(_case())
def test_blend_identities(case):
    x, a, _, beta = case
    empty = np.zeros(x.shape[:2], bool)
    full = np.ones(x.shape[:2], bool)
    np.testing.assert_array_equal(blend_anomaly(Image(x), Image(a), empty, beta).pixels, x)
    np.testing.assert_array_equal(blend_anomaly(Image(x), Image(a), full, 1.0).pixels, a)
    np.testing.assert_array_equal(blend_anomaly(Image(x), Image(a), full, 0.0).pixels, x)


def test_blend_rejects_bad_input():
    x = Image(np.zeros((4, 4, 3), np.float32))
    with pytest.raises(InvalidArgumentError):
        blend_anomaly(x, x, np.ones((4, 4), bool), 1.5)
    with pytest.raises(InvalidArgumentError):
        blend_anomaly(x, Image(np.zeros((3, 4, 3), np.float32)), np.ones((4, 4), bool), 0.5)
    with pytest.raises(InvalidArgumentError):
        blend_anomaly(x, x, np.ones((4, 3), bool), 0.5)


def test_blend_grey_source_into_rgb():
    x = Image(np.zeros((2, 2, 3), np.float32))
    a = Image(np.ones((2, 2, 1), np.float32))
    out = blend_anomaly(x, a, np.ones((2, 2), bool), 1.0)
    assert out.pixels.shape == (2, 2, 3)
    np.testing.assert_array_equal(out.pixels, 1.0)


def test_beta_sampling_range():
    rng = np.random.default_rng(0)
    betas = [imagesynth.sample_beta(rng) for _ in range(2000)]
    assert min(betas) >= 0.15 and max(betas) <= 1.0
    assert np.mean(betas) == pytest.approx(0.575, abs=0.02)


def test_synth_config_validation():
    with pytest.raises(InvalidArgumentError):
        SynthConfig(beta_range=(0.8, 0.2))
    with pytest.raises(InvalidArgumentError):
        SynthConfig(max_area_ratio=1.2)


def _kernel_image(size=64):
    yy, xx = np.mgrid[:size, :size]
    fg = (yy - size / 2) ** 2 + (xx - size / 2) ** 2 < (size / 3) ** 2
    pixels = np.where(fg[..., None], 0.7, 0.05).astype(np.float32) * np.ones((1, 1, 3), np.float32)
    return Image(pixels, fg)


def test_synthesis_respects_foreground_and_ratio():
    i_x = _kernel_image()
    cfg = SynthConfig(max_area_ratio=0.2)
    rng = np.random.default_rng(1)
    hits = 0
    for _ in range(30):
        res = imagesynth.synthesize_with_retries(i_x, cfg, rng)
        fg = i_x.foreground
        assert res.mask.sum() <= 0.2 * fg.sum()
        assert not (res.mask & ~fg).any()
        np.testing.assert_array_equal(res.image.pixels[~res.mask], i_x.pixels[~res.mask])
        if not res.degenerate:
            hits += 1
            assert 0.15 <= res.beta <= 1.0
    assert hits >= 25


def test_ratio_zero_returns_input_unchanged():
    i_x = _kernel_image()
    res = imagesynth.synthesize_with_retries(i_x, SynthConfig(max_area_ratio=0.0), np.random.default_rng(0))
    assert res.degenerate and not res.mask.any()
    np.testing.assert_array_equal(res.image.pixels, i_x.pixels)
    i_n, m = res
    assert i_n is res.image and m is res.mask


def test_synthesis_is_seeded():
    i_x = _kernel_image()
    a = imagesynth.synthesize_anomaly(i_x, SynthConfig(), np.random.default_rng(7))
    b = imagesynth.synthesize_anomaly(i_x, SynthConfig(), np.random.default_rng(7))
    np.testing.assert_array_equal(a.image.pixels, b.image.pixels)
    np.testing.assert_array_equal(a.mask, b.mask)


def test_procedural_pool_is_deterministic():
    src1 = imagesynth.ProceduralSource(pool_size=4, pool_seed=2)
    src2 = imagesynth.ProceduralSource(pool_size=4, pool_seed=2)
    a = src1.sample(32, 32, np.random.default_rng(0)).pixels
    b = src2.sample(32, 32, np.random.default_rng(0)).pixels
    np.testing.assert_array_equal(a, b)
    assert a.shape == (32, 32, 3) and a.min() >= 0 and a.max() <= 1


def test_directory_source(tmp_path):
    write_png(tmp_path / "b.png", np.full((10, 12, 3), 0.5, np.float32))
    write_png(tmp_path / "a.png", np.zeros((8, 8, 3), np.float32))
    src = imagesynth.make_source(tmp_path)
    assert [p.name for p in src.paths] == ["a.png", "b.png"]
    img = src.sample(16, 16, np.random.default_rng(0))
    assert img.pixels.shape == (16, 16, 3)


def test_directory_source_errors(tmp_path):
    with pytest.raises(DataError):
        imagesynth.DirectorySource(tmp_path / "missing")
    with pytest.raises(DataError):
        imagesynth.DirectorySource(tmp_path)


def test_single_pixel_half_opacity():
    out = blend_anomaly(
        Image(np.full((1, 1, 1), 0.2, np.float32)), Image(np.full((1, 1, 1), 0.8, np.float32)),
        np.ones((1, 1), bool), 0.5,
    )
    assert out.pixels[0, 0, 0] == pytest.approx(0.5, abs=1e-7)


def test_beta_draws_are_reproducible():
    a = [imagesynth.sample_beta(np.random.default_rng(3)) for _ in range(3)]
    assert len(set(a)) == 1
    rng1, rng2 = np.random.default_rng(8), np.random.default_rng(8)
    assert [imagesynth.sample_beta(rng1) for _ in range(10)] == [imagesynth.sample_beta(rng2) for _ in range(10)]


def test_procedural_textures_in_unit_range():
    src = imagesynth.ProceduralSource()
    rng = np.random.default_rng(0)
    lo, hi = 1.0, 0.0
    for _ in range(1000):
        px = src.sample(16, 16, rng).pixels
        lo, hi = min(lo, px.min()), max(hi, px.max())
    assert lo >= 0.0 and hi <= 1.0
    a = src.render(16, 16, np.random.default_rng(5))
    np.testing.assert_array_equal(a, src.render(16, 16, np.random.default_rng(5)))


def test_single_image_directory_pool(tmp_path):
    px = np.random.default_rng(0).random((8, 8, 3)).astype(np.float32)
    write_png(tmp_path / "only.png", px)
    img = imagesynth.DirectorySource(tmp_path).sample(8, 8, np.random.default_rng(0))
    np.testing.assert_allclose(img.pixels, np.round(px * 255) / 255, atol=1e-6)


def test_default_synthesis_changes_masked_pixels():
    i_x = _kernel_image()
    res = imagesynth.synthesize_with_retries(i_x, SynthConfig(), np.random.default_rng(2))
    assert not res.degenerate
    changed = np.any(res.image.pixels != i_x.pixels, axis=2)
    assert not (changed & ~res.mask).any()
    assert changed[res.mask].mean() > 0.9
