import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cdformer.config import ConfigError
from cdformer.degradation import (
    DegradationSpec,
    bicubic_down,
    degrade,
    make_anisotropic_kernel,
    make_isotropic_kernel,
    make_protocol_grid,
    read_png,
    write_png,
)
from cdformer.metrics import psnr

from oracles import aniso_cov, degrade_loops, gaussian_grid

# frozen from oracles.gaussian_grid (point-by-point exp evaluation, then normalisation)
ISO_12_CENTER = 0.1105242660358385
ISO_12_RIGHT = 0.07810178225571335
ANISO_CENTER = 0.11368210130603185
ANISO_DIAG_MAJOR = 0.0885357095183404  # (row+1, col+1)
ANISO_DIAG_MINOR = 0.014769875119279673  # (row+1, col-1)


def test_width_zero_is_delta():
    k = make_isotropic_kernel(0.0, 21)
    assert k[10, 10] == 1.0
    assert k.sum() == 1.0
    assert np.count_nonzero(k) == 1


def test_isotropic_normalised_and_rotation_symmetric():
    k = make_isotropic_kernel(1.2, 21)
    assert abs(k.sum() - 1.0) < 1e-6
    np.testing.assert_allclose(k, np.rot90(k), atol=1e-15)


def test_isotropic_matches_grid_oracle():
    k = make_isotropic_kernel(1.2, 21)
    assert k[10, 10] == pytest.approx(ISO_12_CENTER, rel=1e-12)
    assert k[10, 11] == pytest.approx(ISO_12_RIGHT, rel=1e-12)
    np.testing.assert_allclose(k, gaussian_grid(21, ((1.44, 0.0), (0.0, 1.44))), atol=1e-15)


def test_even_size_rejected():
    with pytest.raises(ConfigError):
        make_isotropic_kernel(1.0, 20)
    with pytest.raises(ConfigError):
        make_anisotropic_kernel(1.0, 1.0, 0.0, 4)


@pytest.mark.parametrize("theta", [0.0, 0.3, math.pi / 2, 2.0])
def test_degenerate_anisotropy_is_isotropic(theta):
    np.testing.assert_allclose(make_anisotropic_kernel(1.2, 1.2, theta), make_isotropic_kernel(1.2), atol=1e-14)


def test_anisotropic_pi_periodic():
    np.testing.assert_allclose(
        make_anisotropic_kernel(2.0, 0.7, 0.4), make_anisotropic_kernel(2.0, 0.7, 0.4 + math.pi), atol=1e-14
    )


def test_anisotropic_major_axis_and_oracle():
    k = make_anisotropic_kernel(2.0, 0.7, math.pi / 4)
    np.testing.assert_allclose(k, gaussian_grid(21, aniso_cov(2.0, 0.7, math.pi / 4)), atol=1e-15)
    assert k[10, 10] == pytest.approx(ANISO_CENTER, rel=1e-12)
    assert k[11, 11] == pytest.approx(ANISO_DIAG_MAJOR, rel=1e-12)
    assert k[11, 9] == pytest.approx(ANISO_DIAG_MINOR, rel=1e-12)
    assert k[11, 11] > k[11, 9]


@pytest.mark.parametrize("s1,s2", [(0.0, 1.0), (1.0, -0.5)])
def test_anisotropic_rejects_nonpositive(s1, s2):
    with pytest.raises(ConfigError):
        make_anisotropic_kernel(s1, s2, 0.0)


@settings(max_examples=40, deadline=None)
@given(
    st.floats(0.05, 5.0),
    st.floats(0.05, 5.0),
    st.floats(0.0, 2 * math.pi),
)
def test_kernels_normalised_nonnegative(s1, s2, theta):
    for k in (make_isotropic_kernel(s1), make_anisotropic_kernel(s1, s2, theta)):
        assert abs(k.sum() - 1.0) < 1e-6
        assert (k >= 0).all()


def test_identity_spec():
    img = np.random.default_rng(0).random((12, 10, 3))
    out = degrade(img, DegradationSpec("none", scale=1))
    assert np.array_equal(out, img)


def test_width_zero_equals_bicubic():
    img = np.random.default_rng(1).random((32, 24, 3))
    out = degrade(img, DegradationSpec("isotropic", width=0.0, scale=4))
    assert out.shape == (8, 6, 3)
    np.testing.assert_array_equal(out, np.clip(bicubic_down(img, 4), 0, 1))


def test_constant_image_stays_constant():
    img = np.full((16, 16, 3), 0.5)
    out = degrade(img, DegradationSpec("isotropic", width=1.2, scale=2))
    assert out.shape == (8, 8, 3)
    np.testing.assert_allclose(out, 0.5, atol=1e-12)


def test_crops_to_scale_multiple():
    img = np.random.default_rng(2).random((17, 19, 3))
    assert degrade(img, DegradationSpec("isotropic", width=0.8, scale=4)).shape == (4, 4, 3)


@pytest.mark.parametrize(
    "spec",
    [
        DegradationSpec("isotropic", width=1.2, scale=2),
        DegradationSpec("isotropic", width=2.4, scale=4),
        DegradationSpec("anisotropic", sigma1=2.0, sigma2=0.7, theta=math.pi / 4, scale=4),
        DegradationSpec("isotropic", width=0.0, scale=3),
    ],
    ids=lambda s: s.label(),
)
def test_degrade_matches_loop_oracle(spec):
    img = np.random.default_rng(3).random((16, 16, 3))
    np.testing.assert_allclose(degrade(img, spec), degrade_loops(img, spec.kernel(), spec.scale), atol=1e-5)


def test_noise_reproducible_and_clamped():
    img = np.random.default_rng(4).random((32, 32, 3))
    spec = DegradationSpec("isotropic", width=1.2, scale=2, noise_level=10, seed=7)
    a, b = degrade(img, spec), degrade(img, spec)
    assert np.array_equal(a, b)
    assert a.min() >= 0 and a.max() <= 1
    c = degrade(img, DegradationSpec("isotropic", width=1.2, scale=2, noise_level=10, seed=8))
    assert not np.array_equal(a, c)


def test_noise_monotonically_lowers_psnr():
    rng = np.random.default_rng(5)
    imgs = [rng.random((32, 32, 3)) * 0.6 + 0.2 for _ in range(4)]
    means = []
    for level in (0, 5, 10, 20):
        vals = []
        for i, img in enumerate(imgs):
            ref = degrade(img, DegradationSpec("isotropic", width=1.2, scale=2))
            out = degrade(img, DegradationSpec("isotropic", width=1.2, scale=2, noise_level=level, seed=i))
            vals.append(psnr(out, ref, space="rgb"))
        means.append(np.mean(vals))
    assert all(a > b for a, b in zip(means, means[1:]))


def test_invalid_spec_rejected():
    with pytest.raises(ConfigError):
        degrade(np.zeros((8, 8, 3)), DegradationSpec("isotropic", width=-1.0))
    with pytest.raises(ConfigError):
        degrade(np.zeros((8, 8, 3)), DegradationSpec("isotropic", noise_level=-1.0))


def test_protocol_grids():
    iso4 = make_protocol_grid("isotropic_noisefree", 4)
    assert [s.width for s in iso4] == [0.0, 1.2, 2.4, 3.6]
    assert [s.width for s in make_protocol_grid("isotropic_noisefree", 2)] == [0.0, 0.6, 1.2, 1.8]
    assert [s.width for s in make_protocol_grid("isotropic_noisefree", 3)] == [0.0, 0.8, 1.6, 2.4]
    general = make_protocol_grid("general")
    assert len(general) == 27
    assert sorted({s.noise_level for s in general}) == [0.0, 5.0, 10.0]
    assert len({(s.sigma1, s.sigma2, s.theta) for s in general}) == 9
    assert all(s.kernel_type == "anisotropic" and s.scale == 4 for s in general)
    with pytest.raises(ConfigError):
        make_protocol_grid("bogus")


def test_png_roundtrip_lossless(tmp_path):
    arr = np.random.default_rng(6).integers(0, 256, size=(9, 7, 3)).astype(np.float64) / 255.0
    write_png(tmp_path / "a.png", arr)
    assert np.array_equal(read_png(tmp_path / "a.png"), arr)


def test_spec_dict_roundtrip():
    spec = DegradationSpec("anisotropic", sigma1=2.0, sigma2=1.0, theta=0.5, noise_level=5, seed=3)
    assert DegradationSpec.from_dict(spec.to_dict()) == spec
