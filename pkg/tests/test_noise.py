"""Contamination model: calibration, determinism, and the patch pipeline."""

import numpy as np
import pytest

from median_denoise.noise import (NoiseSpec, apply_salt_pepper,
                                  noisy_psnr_reference, build_training_set,
                                  DEFAULT_LEVELS)

CHI2_CRIT_DF2_P01 = 9.21034  # chi-square critical value, df=2, alpha=0.01


def test_spec_validation():
    for bad in (0.0, 1.0, -0.2, 1.5):
        with pytest.raises(ValueError):
            NoiseSpec(level=bad)
    with pytest.raises(ValueError):
        NoiseSpec(level=0.5, channel_mode="per_row")
    with pytest.raises(ValueError):
        NoiseSpec(level=0.5, salt=0.0, pepper=1.0)


def test_tiny_level_leaves_image_untouched():
    rng = np.random.default_rng(0)
    img = rng.random((64, 64))
    out = apply_salt_pepper(img, NoiseSpec(level=1e-9, seed=1))
    np.testing.assert_array_equal(out, img)


def test_near_one_level_saturates_to_extremes():
    img = np.full((64, 64), 0.5)
    out = apply_salt_pepper(img, NoiseSpec(level=0.999999, seed=2))
    values = set(np.unique(out).tolist())
    assert values <= {0.0, 1.0}
    salt_frac = (out == 1.0).mean()
    assert 0.45 < salt_frac < 0.55


@pytest.mark.parametrize("p", [0.3, 0.5, 0.7])
def test_contamination_fraction_within_3_sigma(p):
    img = np.full((256, 256), 0.5)
    n = img.size
    sd = np.sqrt(p * (1 - p) / n)
    out = apply_salt_pepper(img, NoiseSpec(level=p, seed=3))
    frac = (out != 0.5).mean()
    assert abs(frac - p) < 3 * sd
    hit = out[out != 0.5]
    split_sd = np.sqrt(0.25 / hit.size)
    assert abs((hit == 1.0).mean() - 0.5) < 3 * split_sd


def test_category_counts_pass_chi_square():
    # aggregate pepper/salt/clean counts over repeated trials and compare
    # with the (p/2, p/2, 1-p) multinomial via a df=2 chi-square statistic
    p = 0.4
    counts = np.zeros(3)
    for trial in range(100):
        out = apply_salt_pepper(np.full((32, 32), 0.5),
                                NoiseSpec(level=p, seed=1000 + trial))
        counts += [(out == 0.0).sum(), (out == 1.0).sum(), (out == 0.5).sum()]
    expected = counts.sum() * np.array([p / 2, p / 2, 1 - p])
    chi2 = ((counts - expected) ** 2 / expected).sum()
    assert chi2 < CHI2_CRIT_DF2_P01


def test_untouched_pixels_bit_identical_and_hits_exact():
    rng = np.random.default_rng(4)
    img = rng.random((50, 50))
    out = apply_salt_pepper(img, NoiseSpec(level=0.5, seed=5))
    changed = out != img
    np.testing.assert_array_equal(out[~changed], img[~changed])
    assert set(np.unique(out[changed]).tolist()) <= {0.0, 1.0}


def test_same_spec_gives_bit_identical_noise():
    rng = np.random.default_rng(6)
    img = rng.random((40, 40, 3))
    spec = NoiseSpec(level=0.3, seed=7)
    np.testing.assert_array_equal(apply_salt_pepper(img, spec),
                                  apply_salt_pepper(img, spec))
    other = apply_salt_pepper(img, NoiseSpec(level=0.3, seed=8))
    assert (other != apply_salt_pepper(img, spec)).any()


def test_per_pixel_mode_hits_all_channels_together():
    rng = np.random.default_rng(9)
    img = rng.random((60, 60, 3)) * 0.8 + 0.1  # keep away from 0 and 1
    out = apply_salt_pepper(img, NoiseSpec(level=0.5, seed=10,
                                           channel_mode="per_pixel"))
    changed = (out != img).any(axis=-1)
    assert ((out[changed] == 0.0) | (out[changed] == 1.0)).all()
    # within one hit pixel all channels share the same extreme
    assert (out[changed].min(axis=-1) == out[changed].max(axis=-1)).all()


def test_per_channel_mode_hits_channels_independently():
    rng = np.random.default_rng(11)
    img = rng.random((60, 60, 3)) * 0.8 + 0.1
    out = apply_salt_pepper(img, NoiseSpec(level=0.5, seed=12))
    changed = out != img
    partial = changed.any(axis=-1) & ~changed.all(axis=-1)
    assert partial.any()


def test_out_of_range_image_rejected():
    with pytest.raises(ValueError, match="outside"):
        apply_salt_pepper(np.full((4, 4), 2.0), NoiseSpec(level=0.5))


def test_8bit_spec_uses_0_255_extremes():
    img = np.full((32, 32), 128.0)
    out = apply_salt_pepper(img, NoiseSpec.for_8bit(level=0.9, seed=13))
    assert set(np.unique(out).tolist()) <= {0.0, 128.0, 255.0}


def test_noisy_psnr_reference_deterministic_and_sane():
    rng = np.random.default_rng(14)
    img = rng.random((128, 128))
    spec = NoiseSpec(level=0.01, seed=15)
    a = noisy_psnr_reference(img, spec)
    assert a == noisy_psnr_reference(img, spec)
    assert a > 25.0  # 1% contamination barely dents PSNR
    assert noisy_psnr_reference(img, NoiseSpec(level=0.7, seed=15)) < a


# -- training pairs ----------------------------------------------------------

def test_training_set_count_for_200px_image():
    img = np.random.default_rng(16).random((200, 200))
    pairs = list(build_training_set([img]))
    # 2x2 grid of 70px patches times 9 levels
    assert len(pairs) == 36
    assert pairs[0][0].shape == (1, 70, 70)


def test_training_set_clean_member_constant_across_levels():
    img = np.random.default_rng(17).random((80, 80))
    pairs = list(build_training_set([img], levels=(0.1, 0.5, 0.9)))
    cleans = [clean for _, clean, _ in pairs[:3]]
    np.testing.assert_array_equal(cleans[0], cleans[1])
    np.testing.assert_array_equal(cleans[1], cleans[2])
    levels = [lvl for _, _, lvl in pairs[:3]]
    assert levels == [0.1, 0.5, 0.9]


def test_training_set_high_level_mostly_extreme():
    img = np.random.default_rng(18).random((80, 80)) * 0.8 + 0.1
    for noisy, _, level in build_training_set([img], levels=(0.9,)):
        extreme = ((noisy == 0.0) | (noisy == 1.0)).mean()
        assert extreme >= 0.85


def test_training_set_rejects_small_images():
    with pytest.raises(ValueError, match="exceeds"):
        list(build_training_set([np.zeros((32, 32))], patch_size=70))


def test_default_levels_cover_10_to_90_percent():
    assert DEFAULT_LEVELS == (0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9)
