import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from archrobust import corruptions as K
from archrobust.datastore import CORRUPTION_KEYS

NOISY = ("gaussian_noise", "shot_noise", "impulse_noise")


@pytest.fixture(scope="module")
def images():
    return np.random.default_rng(0).uniform(size=(4, 3, 32, 32))


def test_kinds_are_dataset_keys():
    assert set(K.KINDS) <= set(CORRUPTION_KEYS) and len(K.KINDS) == 7


def test_ladders_strictly_monotone():
    up = lambda v: all(b > a for a, b in zip(v, v[1:]))
    down = lambda v: all(b < a for a, b in zip(v, v[1:]))
    for kind in ("gaussian_noise", "impulse_noise", "brightness"):
        assert up(K.LADDERS[kind])
    for kind in ("shot_noise", "contrast", "pixelate"):
        assert down(K.LADDERS[kind])
    # blur grows with the second moment of the kernel
    spread = []
    for p in K.LADDERS["defocus_blur"]:
        k = K.defocus_kernel(*p)
        r = np.arange(len(k)) - len(k) // 2
        spread.append(float((k * np.add.outer(r**2, r**2)).sum()))
    assert up(spread)


@pytest.mark.parametrize("kind", K.KINDS)
def test_distortion_grows_with_severity(kind, images):
    d = [np.abs(K.corrupt(images, kind, s) - images).mean() for s in range(1, 6)]
    assert all(b > a for a, b in zip(d, d[1:])), d


@settings(max_examples=25, deadline=None)
@given(kind=st.sampled_from(K.KINDS), severity=st.integers(1, 5), seed=st.integers(0, 2**31), scale=st.floats(0, 1))
def test_range_and_determinism(kind, severity, seed, scale):
    x = np.random.default_rng(seed).uniform(size=(2, 3, 8, 8)) * scale
    a = K.corrupt(x, kind, severity, seed)
    assert a.shape == x.shape and a.min() >= 0 and a.max() <= 1
    assert np.array_equal(a, K.corrupt(x, kind, severity, seed))


@pytest.mark.parametrize("kind", NOISY)
def test_noise_depends_on_seed(kind, images):
    assert not np.array_equal(K.corrupt(images, kind, 3, 0), K.corrupt(images, kind, 3, 1))


@pytest.mark.parametrize("kind", sorted(set(K.KINDS) - set(NOISY)))
def test_deterministic_kinds_ignore_seed(kind, images):
    assert np.array_equal(K.corrupt(images, kind, 3, 0), K.corrupt(images, kind, 3, 99))


@pytest.mark.parametrize("severity", range(1, 6))
def test_brightness_shift_exact(severity):
    x = np.full((2, 3, 4, 4), 0.3)
    x[0, 0, 0, 0] = 0.1
    out = K.corrupt(x, "brightness", severity)
    assert np.isclose(out.mean() - x.mean(), K.LADDERS["brightness"][severity - 1], rtol=0, atol=1e-15)


def test_contrast_keeps_channel_mean(images):
    out = K.corrupt(images, "contrast", 5)
    assert np.allclose(out.mean(axis=(2, 3)), images.mean(axis=(2, 3)))
    assert np.allclose(out.std(axis=(2, 3)), 0.15 * images.std(axis=(2, 3)))


def test_gaussian_noise_statistics():
    x = np.full((1, 1, 200, 200), 0.5)
    out = K.corrupt(x, "gaussian_noise", 5, seed=1)
    assert abs(out.std() - 0.10) < 0.003 and abs(out.mean() - 0.5) < 0.003


def test_shot_noise_is_poisson():
    x = np.full((1, 1, 300, 300), 0.4)
    out = K.corrupt(x, "shot_noise", 5)
    counts = out * 50
    assert np.allclose(counts, np.round(counts))
    assert abs(counts.mean() - 20) < 0.1 and abs(counts.var() - 20) < 0.6


def test_impulse_fraction():
    x = np.full((1, 3, 200, 200), 0.5)
    out = K.corrupt(x, "impulse_noise", 5)
    hit = out != 0.5
    assert abs(hit.mean() - 0.07) < 0.004
    assert set(np.unique(out[hit])) == {0.0, 1.0}


def test_pixelate_blocks():
    x = np.arange(16.0).reshape(1, 1, 4, 4) / 16
    out = K.corrupt(x, "pixelate", 5)  # 4 * 0.65 -> 2x2 blocks
    assert np.allclose(out[0, 0, :2, :2], x[0, 0, :2, :2].mean())
    assert len(np.unique(out)) == 4


def test_defocus_preserves_constant_image():
    x = np.full((1, 3, 8, 8), 0.7)
    for s in range(1, 6):
        assert np.allclose(K.corrupt(x, "defocus_blur", s), 0.7)
        assert np.isclose(K.defocus_kernel(*K.LADDERS["defocus_blur"][s - 1]).sum(), 1)


def test_single_image_accepted(images):
    assert np.array_equal(K.corrupt(images[0], "contrast", 2), K.corrupt(images[:1], "contrast", 2)[0])


def test_errors(images):
    with pytest.raises(ValueError, match="unknown"):
        K.corrupt(images, "rain", 1)
    with pytest.raises(K.UnsupportedCorruption):
        K.corrupt(images, "fog", 1)
    for bad in (0, 6, 2.0):
        with pytest.raises(ValueError, match="severity"):
            K.corrupt(images, "brightness", bad)


def test_evaluate_corruption_record(trained_small, small_data):
    _, te = small_data
    rec = K.evaluate_corruption(trained_small, te, "gaussian_noise")
    assert rec.key == "gaussian_noise" and len(rec) == 5 and rec.levels == [1, 2, 3, 4, 5]
    rec.check()
    for a, m in zip(rec.accuracy, rec.cm):
        assert a == np.trace(m) / len(te)
    # frozen fixture run: accuracy never rises with severity
    assert all(b <= a for a, b in zip(rec.accuracy, rec.accuracy[1:])), rec.accuracy
    assert rec.accuracy[-1] < rec.accuracy[0]
