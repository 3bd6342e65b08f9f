import numpy as np
import pytest

from udaforge import kspace as ks


def rand_image(rng, h=16, w=16):
    return rng.random((h, w))


# ---------------------------------------------------------------------------
# fft conventions


def test_fft_round_trip_identity():
    rng = np.random.default_rng(0)
    img = rand_image(rng)
    back = ks.ifft2_centered(ks.fft2_centered(img))
    assert np.max(np.abs(back - img)) < 1e-10


def test_constant_image_has_only_dc():
    h, w = 12, 8
    k = ks.fft2_centered(np.full((h, w), 0.37))
    dc = k[h // 2, w // 2]
    assert abs(dc - 0.37 * h * w) < 1e-9
    k[h // 2, w // 2] = 0.0
    assert np.max(np.abs(k)) < 1e-9


def test_parseval():
    rng = np.random.default_rng(1)
    img = rand_image(rng, 10, 14)
    k = ks.fft2_centered(img)
    lhs = np.sum(img**2)
    rhs = np.sum(np.abs(k) ** 2) / (10 * 14)
    assert abs(lhs - rhs) / lhs < 1e-8


def test_center_impulse_flat_magnitude_vs_direct_dft():
    h = w = 8
    img = np.zeros((h, w))
    img[h // 2, w // 2] = 1.0
    k = ks.fft2_centered(img)
    assert np.max(np.abs(np.abs(k) - 1.0)) < 1e-12

    # direct DFT summation oracle, centered indexing
    direct = np.zeros((h, w), dtype=complex)
    for r in range(h):
        for c in range(w):
            fy, fx = r - h // 2, c - w // 2
            acc = 0.0
            for u in range(h):
                for v in range(w):
                    acc += img[u, v] * np.exp(-2j * np.pi * (fy * u / h + fx * v / w))
            direct[r, c] = acc * np.exp(
                2j * np.pi * (fy * (h // 2) / h + fx * (w // 2) / w)
            )
    # magnitudes must agree regardless of phase reference
    assert np.max(np.abs(np.abs(direct) - np.abs(k))) < 1e-10


def test_rejects_tiny_and_nonfinite_input():
    with pytest.raises(ValueError):
        ks.fft2_centered(np.ones((2, 8)))
    bad = np.ones((8, 8))
    bad[0, 0] = np.nan
    with pytest.raises(ValueError):
        ks.fft2_centered(bad)


# ---------------------------------------------------------------------------
# Gibbs truncation


def dirichlet_kernel(n, kept_rows):
    idx = np.arange(n)
    return sum(
        np.exp(2j * np.pi * (r - n // 2) * idx / n) for r in kept_rows
    ) / n


def direct_gibbs(img, keep_fraction):
    """Independent oracle: circular convolution with the separable Dirichlet
    kernel of the kept band, by direct shift-and-add summation."""
    h, w = img.shape
    keep_h = max(1, int(round(keep_fraction * h)))
    keep_w = max(1, int(round(keep_fraction * w)))
    rows = np.arange(h // 2 - keep_h // 2, h // 2 - keep_h // 2 + keep_h)
    cols = np.arange(w // 2 - keep_w // 2, w // 2 - keep_w // 2 + keep_w)
    kern = np.outer(dirichlet_kernel(h, rows), dirichlet_kernel(w, cols))
    out = np.zeros((h, w), dtype=complex)
    for u in range(h):
        for v in range(w):
            out += img[u, v] * np.roll(kern, (u, v), axis=(0, 1))
    return np.clip(out.real, 0.0, 1.0)


def test_gibbs_full_band_is_identity():
    rng = np.random.default_rng(2)
    img = rand_image(rng)
    assert np.max(np.abs(ks.gibbs_truncate(img, 1.0) - img)) < 1e-10


def test_gibbs_equals_dirichlet_convolution_on_square_phantom():
    img = np.zeros((16, 16))
    img[4:12, 5:11] = 0.8
    got = ks.gibbs_truncate(img, 0.25)
    want = direct_gibbs(img, 0.25)
    assert np.max(np.abs(got - want)) < 1e-8


def test_gibbs_equals_dirichlet_convolution_on_random_images():
    rng = np.random.default_rng(3)
    for _ in range(5):
        img = rand_image(rng)
        kf = rng.uniform(0.15, 0.6)
        assert np.max(np.abs(ks.gibbs_truncate(img, kf) - direct_gibbs(img, kf))) < 1e-8


def test_gibbs_constant_image_unchanged():
    img = np.full((12, 12), 0.6)
    out = ks.gibbs_truncate(img, 0.3)
    assert np.max(np.abs(out - img)) < 1e-10


def test_gibbs_rejects_bad_fraction():
    with pytest.raises(ValueError):
        ks.gibbs_truncate(np.ones((8, 8)) * 0.5, 0.0)


# ---------------------------------------------------------------------------
# aliasing


def replica_sum(img, factor):
    h = img.shape[0]
    out = np.zeros_like(img)
    for m in range(factor):
        out += np.roll(img, m * (h // factor), axis=0)
    return np.clip(out, 0.0, 1.0)


def test_alias_degenerate_comb_is_identity():
    rng = np.random.default_rng(4)
    img = rand_image(rng)
    assert np.max(np.abs(ks.alias_subsample(img, 1, 0) - img)) < 1e-10


@pytest.mark.parametrize("factor", [2, 3, 4])
def test_alias_replica_superposition(factor):
    rng = np.random.default_rng(5 + factor)
    img = rand_image(rng, 24, 16)
    got = ks.alias_subsample(img, factor, 0)
    assert np.max(np.abs(got - replica_sum(img, factor))) < 1e-8


def test_alias_periodic_rows_scale_by_factor():
    # an H/R-periodic image lives entirely on the comb rows, which are
    # scaled by R: the output is R * image (kept below the clamp here)
    rng = np.random.default_rng(9)
    r = 3
    tile = rng.random((8, 16)) / r
    img = np.tile(tile, (r, 1))
    out = ks.alias_subsample(img, r, 0)
    assert np.max(np.abs(out - r * img)) < 1e-8


def test_alias_rejects_bad_arguments():
    img = np.ones((10, 10)) * 0.5
    with pytest.raises(ValueError):
        ks.alias_subsample(img, 3, 0)  # 10 % 3 != 0
    with pytest.raises(ValueError):
        ks.alias_subsample(img, 2, 3)  # odd center_keep
    with pytest.raises(ValueError):
        ks.alias_subsample(img, 2, 10)  # center_keep >= H
    with pytest.raises(ValueError):
        ks.alias_subsample(img, 0, 0)


def test_alias_center_band_preserves_mean():
    rng = np.random.default_rng(11)
    img = rand_image(rng, 16, 16)
    out = ks.alias_subsample(img, 2, 4)
    # DC sits in the unscaled center band, so mean brightness survives
    assert abs(out.mean() - img.mean()) < 0.02


# ---------------------------------------------------------------------------
# respiratory motion


def test_respiratory_zero_amplitude_is_identity():
    rng = np.random.default_rng(12)
    img = rand_image(rng)
    out = ks.respiratory_motion(img, 0.0, 4.0, 1.0)
    assert np.max(np.abs(out - img)) < 1e-10


def test_respiratory_constant_displacement_is_pure_shift():
    rng = np.random.default_rng(13)
    img = rand_image(rng)
    # cycles=0, phase pi/2 -> d(t) = 3 for every row
    out = ks.respiratory_motion(img, 3.0, 0.0, np.pi / 2.0)
    assert np.max(np.abs(out - np.roll(img, 3, axis=0))) < 1e-8


def test_respiratory_ghosts_leak_energy_outside_support():
    h = w = 32
    yy, xx = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    disk = ((yy - 10.0) ** 2 + (xx - 16.0) ** 2) <= 36.0
    img = np.where(disk, 0.9, 0.0)
    out = ks.respiratory_motion(img, 3.0, 4.0, 0.0)
    outside = ~disk
    assert np.sum(out[outside] ** 2) > np.sum(img[outside] ** 2) + 1e-3


# ---------------------------------------------------------------------------
# cardiac motion


def test_cardiac_zero_fraction_is_identity():
    rng = np.random.default_rng(14)
    img = rand_image(rng)
    assert np.max(np.abs(ks.cardiac_motion(img, 0.2, 0.0) - img)) < 1e-10


def test_cardiac_zero_deformation_is_identity():
    rng = np.random.default_rng(15)
    img = rand_image(rng)
    assert np.max(np.abs(ks.cardiac_motion(img, 0.0, 0.7) - img)) < 1e-10


def test_cardiac_full_replacement_equals_deformed():
    rng = np.random.default_rng(16)
    img = rand_image(rng)
    out = ks.cardiac_motion(img, 0.2, 1.0)
    want = np.clip(ks.radial_deform(img, 0.2), 0.0, 1.0)
    assert np.max(np.abs(out - want)) < 1e-8


def test_cardiac_seeded_rows_are_deterministic():
    rng = np.random.default_rng(17)
    img = rand_image(rng)
    a = ks.cardiac_motion(img, 0.15, 0.4, seed=5)
    b = ks.cardiac_motion(img, 0.15, 0.4, seed=5)
    c = ks.cardiac_motion(img, 0.15, 0.4, seed=6)
    assert np.array_equal(a, b)
    assert not np.array_equal(a, c)


def test_cardiac_rejects_bad_fraction():
    with pytest.raises(ValueError):
        ks.cardiac_motion(np.ones((8, 8)) * 0.5, 0.1, 1.5)


# ---------------------------------------------------------------------------
# severity sampling and dispatch


def test_sample_severity_class0_is_empty():
    sev = ks.sample_severity(np.random.default_rng(0), 0)
    assert sev.params == {}


def test_sample_severity_ranges():
    rng = np.random.default_rng(18)
    for _ in range(50):
        g = ks.sample_severity(rng, ks.CLASS_GIBBS)
        assert ks.GIBBS_KEEP_RANGE[0] <= g.params["keep_fraction"] <= ks.GIBBS_KEEP_RANGE[1]
        a = ks.sample_severity(rng, ks.CLASS_ALIASING, image_hw=(32, 32))
        assert a.params["factor"] in (2, 4)  # 3 does not divide 32
        assert a.params["center_keep"] in ks.ALIAS_CENTER_KEEP
        r = ks.sample_severity(rng, ks.CLASS_RESPIRATORY)
        assert ks.RESP_AMPLITUDE_RANGE[0] <= r.params["amplitude_px"] <= ks.RESP_AMPLITUDE_RANGE[1]
        assert ks.RESP_CYCLES_RANGE[0] <= r.params["cycles"] <= ks.RESP_CYCLES_RANGE[1]
        c = ks.sample_severity(rng, ks.CLASS_CARDIAC)
        assert ks.CARDIAC_DEFORM_RANGE[0] <= c.params["deform_strength"] <= ks.CARDIAC_DEFORM_RANGE[1]
        assert ks.CARDIAC_LINE_RANGE[0] <= c.params["line_fraction"] <= ks.CARDIAC_LINE_RANGE[1]


def test_sample_severity_deterministic_stream():
    draws1 = [ks.sample_severity(np.random.default_rng(9), c) for c in (1, 2, 3, 4)]
    draws2 = [ks.sample_severity(np.random.default_rng(9), c) for c in (1, 2, 3, 4)]
    assert [d.params for d in draws1] == [d.params for d in draws2]


def test_sample_severity_rejects_unknown_class():
    with pytest.raises(ValueError):
        ks.sample_severity(np.random.default_rng(0), 7)


@pytest.mark.parametrize("class_id", [0, 1, 2, 3, 4])
def test_apply_artifact_shape_range_determinism(class_id):
    rng = np.random.default_rng(20 + class_id)
    img = rand_image(rng, 24, 24)
    sev = ks.sample_severity(np.random.default_rng(3), class_id, image_hw=(24, 24))
    out1 = ks.apply_artifact(img, sev)
    out2 = ks.apply_artifact(img, sev)
    assert out1.shape == img.shape
    assert out1.min() >= 0.0 and out1.max() <= 1.0
    assert np.array_equal(out1, out2)


def test_apply_artifact_class0_identity():
    rng = np.random.default_rng(25)
    img = rand_image(rng)
    out = ks.apply_artifact(img, ks.SeverityParams(0, {}))
    assert np.array_equal(out, img)
