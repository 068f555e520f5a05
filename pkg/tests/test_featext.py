import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from grain_ad import featext
from grain_ad.errors import InvalidArgumentError, ModelLoadError
from grain_ad.featext import ExtractorSpec, FeatureExtractor
from grain_ad.image import Image


def naive_aggregate(f, p):
    h, w, _ = f.shape
    r = p // 2
    out = np.zeros_like(f, dtype=np.float64)
    for i in range(h):
        for j in range(w):
            win = f[max(0, i - r) : i + r + 1, max(0, j - r) : j + r + 1]
            out[i, j] = win.reshape(-1, f.shape[2]).mean(axis=0)
    return out


def linear_1d(v, n_out):
    """Closed-form align-corners sampling of a 1-D signal."""
    n_in = len(v)
    out = np.empty(n_out)
    for i in range(n_out):
        s = i * (n_in - 1) / (n_out - 1) if n_out > 1 else 0.0
        k = min(int(np.floor(s)), n_in - 2) if n_in > 1 else 0
        t = s - k
        out[i] = v[k] * (1 - t) + v[min(k + 1, n_in - 1)] * t
    return out


@settings(max_examples=150, deadline=None)
@given(
    h=st.integers(1, 6), w=st.integers(1, 6), c=st.integers(1, 4),
    p=st.sampled_from([1, 3, 5]), seed=st.integers(0, 2**32),
)
def test_aggregate_matches_double_loop(h, w, c, p, seed):
    f = np.random.default_rng(seed).normal(size=(h, w, c)) * 10
    np.testing.assert_allclose(featext.aggregate_patches(f, p), naive_aggregate(f, p), rtol=1e-9, atol=1e-12)


def test_aggregate_hand_value():
    f = np.arange(9, dtype=np.float64).reshape(3, 3, 1)
    out = featext.aggregate_patches(f, 3)[..., 0]
    assert out[1, 1] == 4.0
    assert out[0, 0] == pytest.approx((0 + 1 + 3 + 4) / 4)
    assert out[0, 1] == pytest.approx((0 + 1 + 2 + 3 + 4 + 5) / 6)


def test_aggregate_batch_axis_and_validation():
    f = np.random.default_rng(0).normal(size=(2, 4, 5, 3))
    out = featext.aggregate_patches(f, 3)
    np.testing.assert_allclose(out[1], naive_aggregate(f[1], 3))
    with pytest.raises(InvalidArgumentError):
        featext.aggregate_patches(f, 2)


@settings(max_examples=100, deadline=None)
@given(n_in=st.integers(1, 9), n_out=st.integers(2, 20), seed=st.integers(0, 1000))
def test_interpolation_matches_closed_form(n_in, n_out, seed):
    if n_out < n_in:
        n_out = n_in
    v = np.random.default_rng(seed).normal(size=n_in)
    col = featext.interpolate_to(v[:, None, None], n_out, 1)[:, 0, 0]
    np.testing.assert_allclose(col, linear_1d(v, n_out), atol=1e-9, rtol=0)
    row = featext.interpolate_to(v[None, :, None], 1, n_out)[0, :, 0]
    np.testing.assert_allclose(row, linear_1d(v, n_out), atol=1e-9, rtol=0)


def test_fuse_shapes_and_order():
    lo = np.ones((4, 4, 2))
    hi = np.full((2, 2, 3), 5.0)
    fused = featext.fuse_features(lo, hi)
    assert fused.shape == (4, 4, 5)
    np.testing.assert_array_equal(fused[..., :2], 1.0)
    np.testing.assert_allclose(fused[..., 2:], 5.0)
    with pytest.raises(InvalidArgumentError):
        featext.fuse_features(hi, lo)


def test_spec_validation():
    with pytest.raises(InvalidArgumentError):
        ExtractorSpec(channels=(1, 2, 3))
    with pytest.raises(InvalidArgumentError):
        ExtractorSpec(patch_size=4)
    with pytest.raises(InvalidArgumentError):
        ExtractorSpec(fusion_stages=(4, 3))
    with pytest.raises(InvalidArgumentError):
        ExtractorSpec.from_backbone("resnet9000")
    assert ExtractorSpec().feature_dim == 128 + 256


def test_hierarchical_shapes():
    ex = FeatureExtractor(ExtractorSpec.from_backbone("conv4-s"))
    img = Image(np.random.default_rng(0).random((256, 256, 3)).astype(np.float32))
    maps = featext.extract_hierarchical(img, ex)
    assert [m.shape for m in maps] == [(64, 64, 16), (32, 32, 32), (16, 16, 64), (8, 8, 128)]
    fused = featext.patch_features(img, ex)
    assert fused.shape == (16, 16, 192)
    batch = featext.patch_features([img, img], ex)
    assert batch.shape == (2, 16, 16, 192)
    np.testing.assert_array_equal(batch[0], fused)


def test_small_images_are_resized_to_working_size():
    ex = FeatureExtractor(ExtractorSpec.from_backbone("conv4-s"))
    img = Image(np.full((40, 50, 3), 0.5, np.float32))
    assert featext.patch_features(img, ex).shape == (16, 16, 192)


def test_seeded_weights_reproducible_and_file_roundtrip(tmp_path):
    spec = ExtractorSpec.from_backbone("conv4-s", seed=4)
    a, b = FeatureExtractor(spec), FeatureExtractor(spec)
    for wa, wb in zip(a.weights, b.weights):
        np.testing.assert_array_equal(wa, wb)
    path = tmp_path / "w.bin"
    featext.write_weight_file(path, a)
    loaded = FeatureExtractor(ExtractorSpec.from_backbone("conv4-s", weight_source=str(path)))
    for wa, wb in zip(a.weights, loaded.weights):
        np.testing.assert_array_equal(wa, wb)


def test_weight_file_errors(tmp_path):
    with pytest.raises(ModelLoadError):
        FeatureExtractor(ExtractorSpec(weight_source=str(tmp_path / "missing.bin")))
    small = FeatureExtractor(ExtractorSpec.from_backbone("conv4-s"))
    path = tmp_path / "w.bin"
    featext.write_weight_file(path, small)
    with pytest.raises(ModelLoadError):
        FeatureExtractor(ExtractorSpec.from_backbone("conv4", weight_source=str(path)))


def test_last_stage_gradient_matches_finite_differences():
    spec = ExtractorSpec.from_backbone("conv4-s")
    base = FeatureExtractor(spec)
    ex = FeatureExtractor(spec, [w.astype(np.float64) for w in base.weights], [b.astype(np.float64) for b in base.biases])
    rng = np.random.default_rng(0)
    batch = rng.random((2, 64, 64, 3)).astype(np.float32)
    fused, cache = featext.patch_features_with_cache(batch, ex)
    g = rng.normal(size=fused.shape)
    gw, gb = featext.last_stage_grads(g, cache, ex)

    def loss():
        return float(np.sum(featext.patch_features(batch, ex) * g))

    eps = 1e-5
    for _ in range(12):
        i, j = rng.integers(0, ex.weights[3].shape[0]), rng.integers(0, ex.weights[3].shape[1])
        old = ex.weights[3][i, j]
        ex.weights[3][i, j] = old + eps
        up = loss()
        ex.weights[3][i, j] = old - eps
        down = loss()
        ex.weights[3][i, j] = old
        assert gw[i, j] == pytest.approx((up - down) / (2 * eps), rel=1e-4, abs=1e-6)
    for j in rng.integers(0, len(gb), size=4):
        old = ex.biases[3][j]
        ex.biases[3][j] = old + eps
        up = loss()
        ex.biases[3][j] = old - eps
        down = loss()
        ex.biases[3][j] = old
        assert gb[j] == pytest.approx((up - down) / (2 * eps), rel=1e-4, abs=1e-6)


def test_reference_examples():
    f = np.array([[1.0, 2.0], [3.0, 4.0]])[:, :, None]
    np.testing.assert_allclose(featext.aggregate_patches(f, 3)[..., 0], 2.5)
    np.testing.assert_array_equal(featext.aggregate_patches(f, 1), f)
    const = np.full((5, 4, 2), 1.7)
    np.testing.assert_allclose(featext.aggregate_patches(const, 3), 1.7)
    row = featext.interpolate_to(np.array([[[0.0], [1.0]]]), 1, 4)[0, :, 0]
    np.testing.assert_allclose(row, [0, 1 / 3, 2 / 3, 1], atol=1e-15)
    fused = featext.fuse_features(np.zeros((16, 16, 3)), np.full((8, 8, 5), -0.25))
    assert fused.shape == (16, 16, 8)
    np.testing.assert_allclose(fused[..., 3:], -0.25)


def test_aggregate_stays_within_neighbourhood_range():
    f = np.random.default_rng(0).normal(size=(7, 6, 3)).astype(np.float32)
    out = featext.aggregate_patches(f, 3)
    for i in range(7):
        for j in range(6):
            win = f[max(0, i - 1) : i + 2, max(0, j - 1) : j + 2].reshape(-1, 3)
            assert np.all(out[i, j] >= win.min(axis=0)) and np.all(out[i, j] <= win.max(axis=0))


def test_constant_image_gives_constant_channels():
    ex = FeatureExtractor(ExtractorSpec.from_backbone("conv4-s"))
    maps = featext.extract_hierarchical(Image(np.zeros((256, 256, 3), np.float32)), ex)
    assert [m.shape[:2] for m in maps] == [(64, 64), (32, 32), (16, 16), (8, 8)]
    for m in maps:
        np.testing.assert_array_equal(m, np.broadcast_to(m[:1, :1], m.shape))


def test_patch_features_is_the_composition():
    ex = FeatureExtractor(ExtractorSpec.from_backbone("conv4-s"))
    img = Image(np.random.default_rng(1).random((256, 256, 3)).astype(np.float32))
    maps = featext.extract_hierarchical(img, ex)
    manual = featext.fuse_features(featext.aggregate_patches(maps[2], 3), featext.aggregate_patches(maps[3], 3))
    np.testing.assert_array_equal(featext.patch_features(img, ex), manual)
    np.testing.assert_array_equal(featext.patch_features(img, ex), featext.patch_features(img, ex))
