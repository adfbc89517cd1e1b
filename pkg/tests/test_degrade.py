import io
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from PIL import Image

from refkv import jpeg
from refkv.degrade import (IDENTITY, PRESETS, DegradationParams, DegradationPreset, degrade, gaussian_blur,
                           gaussian_kernel, resample, sample_params)
from refkv.evalbench import psnr
from refkv.synthfaces import random_identity, render_identity
from refkv.tensorcore import Rng


def face(seed=0):
    return render_identity(random_identity(seed), 1)[0].astype(np.float64)


# ---------------------------------------------------------------- blur


def test_blur_sigma_zero_is_bitwise_identity():
    x = Rng(0).uniform(0, 1, size=(3, 20, 17))
    assert np.array_equal(gaussian_blur(x, 0.0), x)


@pytest.mark.parametrize("sigma", [0.5, 1.3, 4.0, 16.0])
def test_blur_keeps_constants_and_kernel_sums_to_one(sigma):
    assert abs(gaussian_kernel(sigma).sum() - 1.0) < 1e-9
    x = np.full((3, 24, 24), 0.37)
    np.testing.assert_allclose(gaussian_blur(x, sigma), x, atol=1e-12)


def test_blur_impulse_reproduces_kernel():
    sigma = 1.5
    x = np.zeros((3, 31, 31))
    x[:, 15, 15] = 1.0
    out = gaussian_blur(x, sigma)
    r = math.ceil(3 * sigma)
    u = np.arange(-r, r + 1)
    k = np.exp(-0.5 * (u / sigma) ** 2)
    k /= k.sum()
    np.testing.assert_allclose(out[1, 15 - r : 16 + r, 15 - r : 16 + r], np.outer(k, k), atol=1e-6)


def test_blur_negative_sigma_errors():
    with pytest.raises(ValueError):
        gaussian_kernel(-1.0)


# ---------------------------------------------------------------- resample


def test_resample_factor_one_and_constants():
    x = Rng(1).uniform(0, 1, size=(3, 13, 19))
    np.testing.assert_allclose(resample(x, 1.0, "down"), x, atol=1e-6)
    c = np.full((3, 32, 32), 0.6)
    for f in (1.7, 3.0, 7.5):
        small = resample(c, f, "down")
        np.testing.assert_allclose(small, 0.6, atol=1e-9)
        np.testing.assert_allclose(resample(small, f, "up", size=(32, 32)), 0.6, atol=1e-9)


def test_resample_ramp_matches_midpoints():
    w = 16
    ramp = np.broadcast_to(np.arange(w, dtype=np.float64), (3, 8, w)).copy()
    half = resample(ramp, 2.0, "down")
    # half-pixel centres: output j samples input coordinate 2j + 0.5
    np.testing.assert_allclose(half[0, 0], 2 * np.arange(w // 2) + 0.5, atol=1e-5)


def test_resample_sizes_and_errors():
    x = np.zeros((3, 32, 32))
    assert resample(x, 3.3, "down").shape == (3, round(32 / 3.3), round(32 / 3.3))
    with pytest.raises(ValueError):
        resample(x, 64.0, "down")
    with pytest.raises(ValueError):
        resample(x, 0.5, "down")
    with pytest.raises(ValueError):
        resample(x, 2.0, "sideways")


# ---------------------------------------------------------------- JPEG


def test_quality_scaling_rule():
    base = np.full(64, 16)
    assert np.all(jpeg.quality_table(base, 100) == 1)
    assert np.all(jpeg.quality_table(base, 50) == 16)
    assert np.all(jpeg.quality_table(base, 25) == 32)


@pytest.mark.parametrize("subsampling", ["4:4:4", "4:2:0"])
def test_mid_gray_round_trips_exactly(subsampling):
    x = np.full((21, 30, 3), 128, np.uint8)
    for q in (1, 30, 75, 100):
        assert np.array_equal(jpeg.round_trip(x, q, subsampling), x)


def test_q100_round_trip_error_bound():
    g = Rng(2).generator
    worst = 0
    for _ in range(20):
        x = g.integers(0, 256, size=(32, 32, 3), dtype=np.uint8)
        worst = max(worst, int(np.abs(jpeg.round_trip(x, 100, "4:4:4").astype(int) - x).max()))
    assert worst <= 2


def test_lower_quality_loses_more():
    x = (face(3).transpose(1, 2, 0) * 255).round().astype(np.uint8)
    err = {q: np.mean((jpeg.round_trip(x, q).astype(float) - x) ** 2) for q in (30, 90)}
    assert err[30] >= err[90]


@pytest.mark.parametrize("subsampling", ["4:4:4", "4:2:0"])
def test_bitstream_parses_with_pillow(subsampling):
    g = Rng(3).generator
    x = g.integers(0, 256, size=(37, 45, 3), dtype=np.uint8)
    data = jpeg.encode(x, 75, subsampling)
    ours = jpeg.decode(data)
    theirs = np.asarray(Image.open(io.BytesIO(data)).convert("RGB"))
    assert theirs.shape == ours.shape == x.shape
    # decoders may differ in IDCT rounding and chroma upsampling
    assert np.abs(theirs.astype(int) - ours).mean() < 2.0


def test_decoder_reads_pillow_output():
    x = (face(4).transpose(1, 2, 0) * 255).round().astype(np.uint8)
    buf = io.BytesIO()
    Image.fromarray(x).save(buf, "JPEG", quality=90)
    ours = jpeg.decode(buf.getvalue())
    ref = np.asarray(Image.open(io.BytesIO(buf.getvalue())).convert("RGB"))
    assert np.abs(ours.astype(int) - ref).mean() < 2.0


def test_malformed_bitstream_reports_offset():
    with pytest.raises(jpeg.JpegError) as err:
        jpeg.decode(b"\xff\xd8\xff\xc0\x00")
    assert err.value.offset == 2 and "byte 2" in str(err.value)
    with pytest.raises(jpeg.JpegError):
        jpeg.decode(b"not a jpeg")
    data = jpeg.encode(np.zeros((8, 8, 3), np.uint8), 50)
    with pytest.raises(jpeg.JpegError):
        jpeg.decode(data[: len(data) // 2])


@settings(max_examples=20, deadline=None)
@given(st.integers(1, 40), st.integers(1, 40), st.integers(1, 100), st.integers(0, 2**31 - 1))
def test_decode_never_errors_on_own_output(h, w, q, seed):
    x = Rng(seed).generator.integers(0, 256, size=(h, w, 3), dtype=np.uint8)
    assert jpeg.round_trip(x, q).shape == (h, w, 3)


# ---------------------------------------------------------------- pipeline and sampling


def test_identity_params_near_lossless():
    x = face()
    out = degrade(x, IDENTITY, Rng(0))
    assert out.shape == x.shape and np.abs(out - x).max() <= 2 / 255 + 1e-6


def test_degrade_deterministic_and_in_range():
    x = face(1)
    p = DegradationParams(3.0, 5.5, 12.0, 40)
    a, b = degrade(x, p, Rng(7)), degrade(x, p, Rng(7))
    assert np.array_equal(a, b) and a.min() >= 0 and a.max() <= 1 and a.shape == x.shape


def test_severe_worse_than_moderate():
    imgs = [face(s) for s in range(5)]
    scores = {}
    for preset in ("moderate", "severe"):
        vals = []
        for k in range(50):
            x = imgs[k % 5]
            p = sample_params(preset, Rng([k, 1]))
            vals.append(psnr(degrade(x, p, Rng([k, 2])), x))
        scores[preset] = np.mean(vals)
    assert scores["severe"] < scores["moderate"]


def test_sample_params_ranges():
    g = Rng(11)
    draws = [sample_params("severe", g.child(i)) for i in range(10_000)]
    s = np.array([[d.sigma, d.r, d.delta, d.q] for d in draws])
    assert s[:, 0].min() >= 8 and s[:, 0].max() <= 16
    assert s[:, 1].min() >= 8 and s[:, 1].max() <= 32
    assert s[:, 2].min() >= 0 and s[:, 2].max() <= 20
    assert s[:, 3].min() >= 30 and s[:, 3].max() <= 100
    moderate = np.array([sample_params("moderate", g.child(10_000 + i)).sigma for i in range(10_000)])
    assert abs(moderate.mean() - 4.0) < 0.1
    assert sample_params("training", Rng(5)) == sample_params("training", Rng(5))


def test_param_validation():
    with pytest.raises(ValueError, match="preset"):
        sample_params("apocalyptic", Rng(0))
    for bad in (dict(sigma=-1), dict(r=0.5), dict(delta=-2), dict(q=0), dict(q=101)):
        with pytest.raises(ValueError):
            DegradationParams(**bad)
    with pytest.raises(ValueError):
        DegradationPreset("bad", (0, 1), (0.5, 2), (0, 1), (10, 20))
    assert set(PRESETS) == {"moderate", "severe", "training"}
