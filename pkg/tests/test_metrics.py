import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays
from skimage.metrics import structural_similarity

from oracles import ie_ref, psnr_ref
from tsain.metrics import interpolation_error, mse, psnr, quantize, ssim
from tsain.numerics import Tensor4

PSNR_OFFSET_16 = 10 * math.log10(255.0 ** 2 / 16.0 ** 2)


def _img(rng, h=24, w=20, lo=0, hi=256):
    return rng.integers(lo, hi, size=(h, w), dtype=np.uint8)


def test_psnr_identical_is_inf(rng):
    a = _img(rng)
    assert psnr(a, a) == math.inf


def test_offset_16(rng):
    a = _img(rng, hi=240)
    b = a + 16
    assert abs(psnr(a, b) - PSNR_OFFSET_16) <= 1e-6
    assert interpolation_error(a, b) == 16.0


def test_random_pairs_match_oracles(rng):
    for _ in range(10):
        a, b = _img(rng), _img(rng)
        assert abs(psnr(a, b) - psnr_ref(a, b)) <= 1e-9
        assert abs(interpolation_error(a, b) - ie_ref(a, b)) <= 1e-9
        ref = structural_similarity(a, b, gaussian_weights=True, sigma=1.5, use_sample_covariance=False,
                                    data_range=255)
        assert abs(ssim(a, b) - ref) <= 1e-8


def test_ssim_constant_images():
    a = np.full((16, 16), 100, np.uint8)
    b = np.full((16, 16), 130, np.uint8)
    c1, c2 = (0.01 * 255) ** 2, (0.03 * 255) ** 2
    expected = (2 * 100 * 130 + c1) * c2 / ((100 ** 2 + 130 ** 2 + c1) * c2)
    assert ssim(a, b) == pytest.approx(expected, rel=1e-12)


def test_ssim_identity_exact(rng):
    a = _img(rng)
    assert ssim(a, a) == 1.0


def test_errors(rng):
    with pytest.raises(ValueError):
        psnr(_img(rng, 5, 5), _img(rng, 5, 6))
    with pytest.raises(ValueError):
        ssim(_img(rng, 10, 20), _img(rng, 10, 20))
    with pytest.raises(ValueError):
        psnr(np.full((3, 3), 300), np.zeros((3, 3), int))


class TestQuantize:
    @pytest.mark.parametrize("v,expected", [(0.0, 0), (1.0, 255), (0.5, 128), (-0.2, 0), (1.7, 255)])
    def test_values(self, v, expected):
        assert quantize(Tensor4(np.full((1, 1, 1, 1), v)))[0, 0] == expected

    def test_multichannel_rejected(self):
        with pytest.raises(ValueError):
            quantize(Tensor4(np.zeros((1, 2, 2, 2))))


@settings(max_examples=25, deadline=None)
@given(arrays(np.uint8, (12, 13)), arrays(np.uint8, (12, 13)))
def test_symmetry_and_consistency(a, b):
    assert psnr(a, b) == psnr(b, a)
    assert interpolation_error(a, b) == interpolation_error(b, a)
    assert abs(ssim(a, b) - ssim(b, a)) <= 1e-12
    assert -1.0 <= ssim(a, b) <= 1.0
    ie = interpolation_error(a, b)
    if ie > 0:
        assert abs(psnr(a, b) - 10 * math.log10(255 ** 2 / ie ** 2)) <= 1e-9
        assert ie ** 2 == pytest.approx(mse(a, b), rel=1e-15)
