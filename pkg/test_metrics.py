import numpy as np
import pytest

from errors import ContractError, ShapeError
from metrics import SSIM_C1, gaussian_window, psnr, rgb_to_y, ssim
from models import ImageU8


def image(data):
    return ImageU8(data=np.asarray(data, dtype=np.uint8))


def random_rgb(h=32, w=32, seed=0):
    return image(np.random.default_rng(seed).integers(0, 256, (h, w, 3)))


def test_rgb_to_y_extremes():
    y = rgb_to_y(np.array([[[255, 255, 255], [0, 0, 0]]], dtype=np.float64))
    assert y.shape == (1, 2, 1)
    assert y[0, 0, 0] == pytest.approx(235.0)
    assert y[0, 1, 0] == pytest.approx(16.0)


def test_rgb_to_y_needs_three_channels():
    with pytest.raises(ShapeError):
        rgb_to_y(np.zeros((2, 2, 1)))


class TestPsnr:
    def test_identical_is_infinite(self):
        a = random_rgb()
        assert psnr(a, a) == float("inf")

    def test_uniform_difference_of_one(self):
        a = image(np.full((16, 16, 1), 100))
        b = image(np.full((16, 16, 1), 101))
        assert psnr(a, b, on_y=False) == pytest.approx(48.1308, abs=1e-4)

    def test_y_channel_matches_direct_formula(self):
        a, b = random_rgb(seed=1), random_rgb(seed=2)
        ya = a.data.astype(np.float64) @ np.array([65.481, 128.553, 24.966]) / 255.0 + 16.0
        yb = b.data.astype(np.float64) @ np.array([65.481, 128.553, 24.966]) / 255.0 + 16.0
        expected = 10 * np.log10(255.0**2 / np.mean((ya - yb) ** 2))
        assert psnr(a, b) == pytest.approx(expected, rel=1e-12)

    def test_more_noise_scores_lower(self):
        rng = np.random.default_rng(3)
        clean = rng.integers(40, 216, (32, 32, 3))
        scores = []
        for sigma in (2, 8, 20):
            noisy = np.clip(clean + rng.normal(0, sigma, clean.shape), 0, 255).round()
            scores.append(psnr(image(clean), image(noisy)))
        assert scores == sorted(scores, reverse=True)

    def test_crop_border_ignores_edges(self):
        a = np.full((16, 16, 1), 50)
        b = a.copy()
        b[0, :] = 0
        assert psnr(image(a), image(b), crop_border=1, on_y=False) == float("inf")

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            psnr(random_rgb(16, 16), random_rgb(16, 17))

    def test_crop_too_large(self):
        with pytest.raises(ContractError):
            psnr(random_rgb(16, 16), random_rgb(16, 16), crop_border=8)


class TestSsim:
    def test_identical_is_one(self):
        a = random_rgb()
        assert ssim(a, a) == pytest.approx(1.0, abs=1e-12)

    def test_constant_images_closed_form(self):
        a = image(np.full((16, 16, 1), 100))
        b = image(np.full((16, 16, 1), 110))
        expected = (2 * 100 * 110 + SSIM_C1) / (100**2 + 110**2 + SSIM_C1)
        assert ssim(a, b, on_y=False) == pytest.approx(expected, rel=1e-9)

    def test_symmetric(self):
        a, b = random_rgb(seed=4), random_rgb(seed=5)
        assert ssim(a, b) == pytest.approx(ssim(b, a), rel=1e-12)

    def test_bounded_for_unrelated_images(self):
        assert -1.0 <= ssim(random_rgb(seed=6), random_rgb(seed=7)) < 0.5

    def test_too_small_after_crop(self):
        with pytest.raises(ShapeError):
            ssim(random_rgb(14, 14), random_rgb(14, 14), crop_border=2)

    def test_gaussian_window(self):
        w = gaussian_window()
        assert w.shape == (11, 11)
        assert w.sum() == pytest.approx(1.0)
        assert w[5, 5] == w.max()
