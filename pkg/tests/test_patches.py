import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from writerid.patches import (
    AugmentPolicy,
    BlurSpec,
    FlipSpec,
    MixupSpec,
    augment,
    mixup_blend,
    patchify,
    unpatchify,
)


def coordinate_image(h, w):
    """Pixel value encodes its own (row, col), for index-arithmetic checks."""
    ys, xs = np.mgrid[0:h, 0:w]
    return (ys * w + xs).astype(np.float64)


class TestPatchify:
    def test_token_count_vit_scale(self):
        img = np.zeros((224, 224))
        seq = patchify(img, 16)
        assert seq.num_patches == 196  # M = H*W / P^2

    def test_single_patch(self):
        img = np.random.default_rng(0).random((16, 16))
        seq = patchify(img, 16)
        assert seq.num_patches == 1
        np.testing.assert_array_equal(seq.patches[0], img.ravel())

    def test_grid_indexing(self):
        img = coordinate_image(128, 128)
        seq = patchify(img, 16)
        assert seq.num_patches == 64
        # patch 9 is grid cell (1, 1): rows 16..31, cols 16..31
        expected = img[16:32, 16:32].ravel()
        np.testing.assert_array_equal(seq.patches[9], expected)

    def test_non_divisible_error_names_dimension(self):
        with pytest.raises(ValueError, match="width"):
            patchify(np.zeros((32, 33)), 16)
        with pytest.raises(ValueError, match="height"):
            patchify(np.zeros((33, 32)), 16)

    def test_channel_last_flattening(self):
        img = np.random.default_rng(1).random((4, 4, 3))
        seq = patchify(img, 2)
        tile = img[0:2, 0:2, :]
        np.testing.assert_array_equal(seq.patches[0], tile.reshape(-1))


class TestUnpatchify:
    @settings(max_examples=100, deadline=None)
    @given(
        rows=st.integers(1, 6),
        cols=st.integers(1, 6),
        p=st.sampled_from([1, 2, 4, 8]),
        channels=st.sampled_from([0, 1, 3]),
        seed=st.integers(0, 2**31),
    )
    def test_round_trip_bit_exact(self, rows, cols, p, channels, seed):
        rng = np.random.default_rng(seed)
        shape = (rows * p, cols * p) if channels == 0 else (rows * p, cols * p, channels)
        img = rng.random(shape)
        back = unpatchify(patchify(img, p))
        assert back.shape == img.shape
        assert np.array_equal(back, img)

    def test_permuting_two_patches_swaps_tiles(self):
        img = coordinate_image(64, 64)
        seq = patchify(img, 16)  # 4x4 grid: patch 5 is tile (1, 1)
        swapped = seq.patches.copy()
        swapped[[0, 5]] = swapped[[5, 0]]
        out = unpatchify(
            type(seq)(patches=swapped, grid=seq.grid, patch_size=16, source_shape=seq.source_shape)
        )
        np.testing.assert_array_equal(out[0:16, 0:16], img[16:32, 16:32])
        np.testing.assert_array_equal(out[16:32, 16:32], img[0:16, 0:16])
        np.testing.assert_array_equal(out[0:16, 16:32], img[0:16, 16:32])

    def test_metadata_mismatch_raises(self):
        seq = patchify(np.zeros((8, 8)), 4)
        bad = type(seq)(patches=seq.patches[:2], grid=seq.grid, patch_size=4, source_shape=(8, 8))
        with pytest.raises(ValueError):
            unpatchify(bad)


class TestAugment:
    def test_all_probabilities_zero_is_identity(self):
        rng = np.random.default_rng(2)
        img = rng.random((32, 32))
        out = augment(img, AugmentPolicy(seed=1))
        np.testing.assert_array_equal(out, img)

    def test_flip_twice_is_identity(self):
        rng = np.random.default_rng(3)
        img = rng.random((16, 16))
        policy = AugmentPolicy(horizontal_flip=FlipSpec(1.0), seed=4)
        once = augment(img, policy, sample_key="a")
        twice = augment(once, policy, sample_key="a")
        np.testing.assert_array_equal(twice, img)

    def test_mixup_half_is_pixel_mean(self):
        rng = np.random.default_rng(5)
        a, b = rng.random((8, 8)), rng.random((8, 8))
        out = mixup_blend(a, b, 0.5)
        idx = rng.integers(0, 8, size=(10, 2))
        for y, x in idx:
            assert out[y, x] == pytest.approx((a[y, x] + b[y, x]) / 2, abs=1e-15)

    def test_mixup_without_partner_raises(self):
        policy = AugmentPolicy(mixup=MixupSpec(1.0, 0.4), seed=6)
        with pytest.raises(ValueError, match="partner"):
            augment(np.zeros((8, 8)), policy)

    @settings(max_examples=50, deadline=None)
    @given(seed=st.integers(0, 2**31), key=st.integers(0, 100))
    def test_range_shape_and_determinism(self, seed, key):
        rng = np.random.default_rng(seed)
        img = rng.random((24, 24))
        partner = rng.random((24, 24))
        policy = AugmentPolicy(
            gaussian_blur=BlurSpec(0.7, (0.2, 1.5)),
            mixup=MixupSpec(0.5, 0.3),
            horizontal_flip=FlipSpec(0.5),
            seed=seed,
        )
        out1 = augment(img, policy, partner=partner, sample_key=key)
        out2 = augment(img, policy, partner=partner, sample_key=key)
        assert out1.shape == img.shape
        assert out1.min() >= 0.0 and out1.max() <= 1.0
        np.testing.assert_array_equal(out1, out2)

    def test_invalid_policy_rejected(self):
        with pytest.raises(ValueError):
            AugmentPolicy(horizontal_flip=FlipSpec(1.5))
        with pytest.raises(ValueError):
            AugmentPolicy(gaussian_blur=BlurSpec(0.5, (0.0, 1.0)))
