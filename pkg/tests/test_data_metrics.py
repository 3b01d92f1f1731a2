import math
import os

import numpy as np
import numpy.testing as npt
import pytest

from spsalab import data as dt
from spsalab.attention import CATEGORIES, SegProbMap
from spsalab.autodiff import ShapeError
from spsalab.data import (
    AUX,
    PRIMARY,
    DatasetManifest,
    FormatError,
    ImageBuffer,
    ManifestEntry,
    Region,
    gaussian_window,
    make_textured_image,
    prepare_sample,
    psnr,
    read_png,
    read_segmap,
    rgb_to_y,
    sample_batch,
    ssim,
    synth_segmap,
    write_png,
    write_segmap,
)


# ---------------------------------------------------------------------------
# ImageBuffer / PNG io

def test_u8_float_roundtrip_is_identity():
    rng = np.random.default_rng(0)
    u8 = rng.integers(0, 256, size=(7, 9, 3), dtype=np.uint8)
    buf = ImageBuffer(u8)
    again = ImageBuffer.from_float(buf.float)
    npt.assert_array_equal(again.u8, u8)


def test_png_roundtrip(tmp_path):
    rng = np.random.default_rng(1)
    img = rng.random((12, 16, 3)).astype(np.float32)
    path = tmp_path / "img.png"
    write_png(path, img)
    back = read_png(path)
    npt.assert_allclose(back, np.round(img * 255) / 255, atol=1e-6)


# ---------------------------------------------------------------------------
# rgb_to_y

def test_y_of_white():
    y = rgb_to_y(np.ones((1, 1, 3)))
    npt.assert_allclose(y, [[235.0 / 255.0]], atol=1e-9)


def test_y_of_black():
    y = rgb_to_y(np.zeros((1, 1, 3)))
    npt.assert_allclose(y, [[16.0 / 255.0]], atol=1e-9)


def test_y_of_gray_is_affine_midpoint():
    y = rgb_to_y(np.full((1, 1, 3), 0.5))
    npt.assert_allclose(y, [[(16.0 + 219.0 * 0.5) / 255.0]], atol=1e-9)


# ---------------------------------------------------------------------------
# psnr

def test_psnr_identical_is_inf():
    a = np.random.default_rng(2).random((8, 8))
    assert psnr(a, a) == math.inf


def test_psnr_constant_offset_is_20db():
    a = np.full((16, 16), 0.4)
    assert psnr(a, a + 0.1) == pytest.approx(20.0, abs=1e-9)


def test_psnr_symmetric_and_monotone_in_noise():
    rng = np.random.default_rng(3)
    a = rng.random((32, 32)) * 0.5 + 0.25
    values = []
    for amp in (0.01, 0.05, 0.2):
        noise = rng.uniform(-amp, amp, size=a.shape)
        assert psnr(a, a + noise) == pytest.approx(psnr(a + noise, a))
        values.append(psnr(a, a + noise))
    assert values[0] > values[1] > values[2]


def test_psnr_rejects_mismatched_dims():
    with pytest.raises(ShapeError):
        psnr(np.zeros((4, 4)), np.zeros((4, 5)))


# ---------------------------------------------------------------------------
# ssim with an independent per-window oracle

def _ssim_oracle(a, b, size=11, sigma=1.5, k1=0.01, k2=0.03):
    """Direct per-window reimplementation of the SSIM formula."""
    win = gaussian_window(size, sigma)
    c1, c2 = k1 * k1, k2 * k2
    h, w = a.shape
    vals = []
    for i in range(h - size + 1):
        for j in range(w - size + 1):
            pa = a[i:i + size, j:j + size]
            pb = b[i:i + size, j:j + size]
            mu_a = float((win * pa).sum())
            mu_b = float((win * pb).sum())
            var_a = float((win * pa * pa).sum()) - mu_a ** 2
            var_b = float((win * pb * pb).sum()) - mu_b ** 2
            cov = float((win * pa * pb).sum()) - mu_a * mu_b
            vals.append(((2 * mu_a * mu_b + c1) * (2 * cov + c2)) /
                        ((mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2)))
    return float(np.mean(vals))


def test_ssim_self_similarity_is_one():
    a = np.random.default_rng(4).random((16, 16))
    assert ssim(a, a) == pytest.approx(1.0, abs=1e-12)


def test_ssim_symmetry():
    rng = np.random.default_rng(5)
    a = rng.random((16, 16))
    b = rng.random((16, 16))
    assert abs(ssim(a, b) - ssim(b, a)) <= 1e-9


def test_ssim_matches_oracle_on_three_fixtures():
    rng = np.random.default_rng(6)
    base = rng.random((14, 14)) * 0.5 + 0.25
    checker = (np.indices((14, 14)).sum(axis=0) % 2).astype(np.float64)
    fixtures = [
        (base, base + rng.uniform(-0.05, 0.05, base.shape)),
        (checker, 1.0 - checker),
        (base, np.clip(base * 1.3, 0, 1)),
    ]
    for a, b in fixtures:
        assert abs(ssim(a, b) - _ssim_oracle(a, b)) <= 1e-4


def test_ssim_checkerboard_inverse_is_strongly_negative():
    checker = (np.indices((16, 16)).sum(axis=0) % 2).astype(np.float64)
    assert ssim(checker, 1.0 - checker) < -0.5


def test_ssim_shift_invariance_within_window_stability():
    # contrast/structure terms are exactly shift invariant; the luminance
    # term is stable when window means stay well away from the C1 regime
    rng = np.random.default_rng(7)
    a = rng.random((16, 16)) * 0.4 + 0.3
    b = a + rng.uniform(-1e-3, 1e-3, a.shape)
    assert abs(ssim(a + 0.2, b + 0.2) - ssim(a, b)) <= 1e-6


def test_ssim_rejects_small_rasters():
    with pytest.raises(ShapeError):
        ssim(np.zeros((8, 8)), np.zeros((8, 8)))


# ---------------------------------------------------------------------------
# seg map file io and synthesis

def test_segmap_roundtrip_exact(tmp_path):
    seg = synth_segmap(8, 8, [Region(category="water", kind="rect",
                                     y0=0, x0=0, y1=4, x1=4)], base="plant")
    path = tmp_path / "map.spm"
    write_segmap(path, seg)
    back = read_segmap(path)
    npt.assert_array_equal(back.data, seg.data)


def test_segmap_bad_magic_rejected(tmp_path):
    path = tmp_path / "bad.spm"
    path.write_bytes(b"NOPE" + b"\0" * 64)
    with pytest.raises(FormatError):
        read_segmap(path)


def test_segmap_unnormalized_rejected(tmp_path):
    seg = synth_segmap(4, 4)
    raw = bytearray()
    import struct

    raw += b"SPM1" + struct.pack("<III", 4, 4, 8)
    arr = seg.data.copy()
    arr[0, 1, 2] += 0.5  # denormalize one pixel
    raw += arr.astype("<f4").tobytes()
    path = tmp_path / "unnorm.spm"
    path.write_bytes(bytes(raw))
    with pytest.raises(FormatError) as exc:
        read_segmap(path)
    assert "(1, 2)" in str(exc.value)


def test_synth_all_sky():
    seg = synth_segmap(8, 8, [], base="sky")
    npt.assert_array_equal(seg.data[CATEGORIES.index("sky")], np.ones((8, 8)))
    assert seg.data.sum() == 64.0


def test_synth_two_halfplanes_normalized_with_soft_edge():
    seg = synth_segmap(16, 16, [Region(category="grass", kind="halfplane",
                                       axis="x", at=8)], base="sky",
                       soft_edge=4.0)
    sums = seg.data.sum(axis=0)
    npt.assert_allclose(sums, 1.0, atol=1e-6)
    grass = seg.data[CATEGORIES.index("grass")]
    assert grass[0, 0] == 0.0 and grass[0, 15] == 1.0
    boundary = grass[0, 6:10]
    assert (np.diff(boundary) > 0).all()  # ramp across the soft edge


def test_textured_image_in_range_and_deterministic():
    seg = synth_segmap(32, 32, [Region(category="water", kind="halfplane",
                                       axis="y", at=16)], base="building")
    img1 = make_textured_image(seg, np.random.default_rng(8))
    img2 = make_textured_image(seg, np.random.default_rng(8))
    npt.assert_array_equal(img1, img2)
    assert img1.min() >= 0.0 and img1.max() <= 1.0


# ---------------------------------------------------------------------------
# prepare_sample

def _fixture_pair(size=32, seed=9):
    seg = synth_segmap(size, size, [Region(category="grass", kind="halfplane",
                                           axis="x", at=size // 2)], base="sky")
    img = make_textured_image(seg, np.random.default_rng(seed))
    return img, seg


def test_prepare_sample_full_image_crop():
    img, seg = _fixture_pair(32)
    lr, hr, sc = prepare_sample(img, seg, 32, seed=0)
    assert lr.shape == (3, 8, 8)
    assert hr.shape == (3, 32, 32)
    assert sc.shape == (8, 32, 32)


def test_prepare_sample_constant_image_constant_lr():
    base = np.full((32, 32, 3), 0.43)
    seg = synth_segmap(32, 32)
    lr, _, _ = prepare_sample(base, seg, 16, seed=1)
    npt.assert_allclose(lr, 0.43, atol=1e-5)


def test_prepare_sample_deterministic_offsets():
    img, seg = _fixture_pair(48)
    a = prepare_sample(img, seg, 16, seed=7)
    b = prepare_sample(img, seg, 16, seed=7)
    for x, y in zip(a, b):
        npt.assert_array_equal(x, y)


def test_prepare_sample_rejects_small_images():
    img, seg = _fixture_pair(16)
    with pytest.raises(ShapeError):
        prepare_sample(img, seg, 32, seed=0)


def test_prepare_sample_offsets_aligned_and_uniform():
    img, seg = _fixture_pair(40)  # offsets in {0,4,8} per axis
    counts = np.zeros((3, 3))
    rng = np.random.default_rng(10)
    for _ in range(3000):
        lr, hr, sc = dt._crop_aligned(img, seg, 32, rng)
        # recover the offset by matching the first pixel row/col
        offs = []
        for oy in (0, 4, 8):
            for ox in (0, 4, 8):
                if np.array_equal(hr[:, 0, 0], img[oy, ox].astype(np.float32)):
                    offs.append((oy // 4, ox // 4))
        assert offs
        counts[offs[0]] += 1
    # chi-square against uniform over the 9 cells
    expected = 3000 / 9
    chi2 = float(((counts - expected) ** 2 / expected).sum())
    # dof 8, p > 0.001 <=> chi2 < 26.12
    assert chi2 < 26.12


# ---------------------------------------------------------------------------
# manifest + sample_batch

def _manifest_dir(tmp_path, n_primary=3, n_aux=2, size=32):
    entries = []
    rng = np.random.default_rng(11)
    for i in range(n_primary + n_aux):
        seg = synth_segmap(size, size, [Region(category="animal", kind="rect",
                                               y0=4, x0=4, y1=16, x1=16)],
                           base="plant")
        img = make_textured_image(seg, rng)
        hr = tmp_path / f"im{i}.png"
        sm = tmp_path / f"im{i}.spm"
        write_png(hr, img)
        write_segmap(sm, seg)
        tag = PRIMARY if i < n_primary else AUX
        entries.append(ManifestEntry(hr_path=str(hr), seg_path=str(sm), tag=tag))
    return entries


def test_manifest_roundtrip(tmp_path):
    entries = _manifest_dir(tmp_path)
    man = DatasetManifest(entries, ratio=(10, 1), crop=16, seed=3)
    path = tmp_path / "manifest.txt"
    man.save(path)
    back = DatasetManifest.load(path)
    assert back.ratio == (10, 1)
    assert back.crop == 16
    assert [e.hr_path for e in back.entries] == [e.hr_path for e in entries]
    back.validate_files()


def test_sample_batch_primary_only():
    entries = [ManifestEntry(hr_path="x", seg_path="y", tag=PRIMARY)]
    man = DatasetManifest(entries, ratio=(1, 0), crop=16)
    # ratio 1:0 never touches aux; use real files to actually draw
    # (covered more fully below); here just check the ratio guard
    assert man.ratio == (1, 0)


def test_sample_batch_demands_aux_when_ratio_needs_it(tmp_path):
    entries = _manifest_dir(tmp_path, n_primary=2, n_aux=0)
    man = DatasetManifest(entries, ratio=(10, 1), crop=16)
    with pytest.raises(ValueError):
        sample_batch(man, 4, np.random.default_rng(0))


def test_sample_batch_shapes_and_determinism(tmp_path):
    entries = _manifest_dir(tmp_path)
    man = DatasetManifest(entries, ratio=(10, 1), crop=16)
    lr, hr, seg = sample_batch(man, 5, np.random.default_rng(12))
    assert lr.shape == (5, 3, 4, 4)
    assert hr.shape == (5, 3, 16, 16)
    assert seg.shape == (5, 8, 16, 16)
    lr2, hr2, seg2 = sample_batch(man, 5, np.random.default_rng(12))
    npt.assert_array_equal(lr, lr2)
    npt.assert_array_equal(hr, hr2)
    npt.assert_array_equal(seg, seg2)


def test_mixing_ratio_binomial_statistics():
    # count primary draws over 11,000 seeded source decisions
    rng = np.random.default_rng(13)
    p = 10.0 / 11.0
    draws = rng.random(11_000) < p
    count = int(draws.sum())
    sigma = math.sqrt(11_000 * p * (1 - p))
    assert abs(count - 10_000) <= 3 * sigma


def test_sample_batch_source_mix_matches_ratio(tmp_path):
    # end-to-end check that the tag frequency follows ratio within 3 sigma
    entries = _manifest_dir(tmp_path, n_primary=1, n_aux=1, size=16)
    man = DatasetManifest(entries, ratio=(10, 1), crop=16)
    # make the two sources distinguishable by pixel content
    white = np.ones((16, 16, 3))
    write_png(entries[0].hr_path, white)
    rng = np.random.default_rng(14)
    n = 1100
    lr, hr, seg = sample_batch(man, n, rng)
    primary_hits = int(sum(hr[i].min() > 0.9 for i in range(n)))
    p = 10.0 / 11.0
    sigma = math.sqrt(n * p * (1 - p))
    assert abs(primary_hits - n * p) <= 3 * sigma
