import math

import numpy as np
import pytest

from lfdeconv.deconv import SerialEngine
from lfdeconv.errors import ValidationError
from lfdeconv.lfmodel import forward_project
from lfdeconv.phantom import (
    PhantomSpec,
    SyntheticPsfSpec,
    add_poisson_noise,
    bead_centers,
    gen_bead_volume,
    gen_psf,
    simulate,
)
from conftest import BEAD_PSF, bead_phantom
from oracles import sphere_voxels


def test_center_kernel_symmetric():
    psf = gen_psf(SyntheticPsfSpec(nz=5, nnum=3, kh=15, kw=15, sigma0=1.2, sigma_slope=0.4, shear=2.0))
    h = psf.kernels[2, 1, 1]
    assert np.array_equal(h, h[::-1, ::-1])


@pytest.mark.parametrize("spec", [
    SyntheticPsfSpec(),
    BEAD_PSF,
    SyntheticPsfSpec(nz=4, nnum=5, kh=17, kw=13, sigma0=0.8, sigma_slope=0.3, shear=1.5),
])
def test_layer_groups_sum_to_one(spec):
    psf = gen_psf(spec)
    assert np.allclose(psf.kernels.sum(axis=(1, 2, 3, 4)), 1.0, atol=1e-9, rtol=0)
    assert np.all(psf.kernels >= 0)


@pytest.mark.parametrize("sigma0", [1.0, 1.5, 2.3])
def test_focal_kernel_second_moment(sigma0):
    psf = gen_psf(SyntheticPsfSpec(nz=5, nnum=3, kh=25, kw=25, sigma0=sigma0, sigma_slope=0.3, shear=1.0))
    h = psf.kernels[2, 1, 1]
    h = h / h.sum()
    r = np.arange(25) - 12
    var_rows = float(np.sum(h.sum(axis=1) * r**2))
    var_cols = float(np.sum(h.sum(axis=0) * r**2))
    assert var_rows == pytest.approx(sigma0**2, rel=0.02)
    assert var_cols == pytest.approx(sigma0**2, rel=0.02)


def test_shear_moves_off_center_kernels():
    psf = gen_psf(SyntheticPsfSpec(nz=3, nnum=3, kh=15, kw=15, sigma0=1.0, sigma_slope=0.0, shear=3.0))
    r = np.arange(15)
    # layer 2 is one step past focus; offset a - c = 1 moves the row centroid by shear/nnum = 1 px
    h = psf.kernels[2, 2, 1]
    assert float(np.sum(h.sum(axis=1) * r) / h.sum()) == pytest.approx(8.0, abs=1e-6)
    h = psf.kernels[0, 2, 1]
    assert float(np.sum(h.sum(axis=1) * r) / h.sum()) == pytest.approx(6.0, abs=1e-6)


def test_too_much_shear_rejected():
    with pytest.raises(ValidationError, match="mass"):
        gen_psf(SyntheticPsfSpec(nz=7, nnum=3, kh=15, kw=15, sigma0=1.0, sigma_slope=0.5, shear=3.0))


def test_psf_spec_validation():
    with pytest.raises(ValidationError):
        SyntheticPsfSpec(kh=14)
    with pytest.raises(ValidationError):
        SyntheticPsfSpec(sigma0=0.0)


def test_bead_volume_deterministic():
    spec = bead_phantom(seed=3)
    assert np.array_equal(gen_bead_volume(spec), gen_bead_volume(spec))
    assert not np.array_equal(gen_bead_volume(spec), gen_bead_volume(bead_phantom(seed=4)))


def test_zero_beads():
    spec = PhantomSpec(nz=3, height=9, width=9, bead_count=0)
    assert not np.any(gen_bead_volume(spec))


@pytest.mark.parametrize("radius, count", [(0, 12), (1, 10), (2, 5)])
def test_total_intensity(radius, count):
    spec = PhantomSpec(nz=9, height=40, width=40, bead_count=count, bead_radius_px=radius, seed=1,
                       photon_scale=37.5)
    vol = gen_bead_volume(spec)
    assert vol.sum() == pytest.approx(count * sphere_voxels(radius) * 37.5)
    assert set(np.unique(vol)) <= {0.0, 37.5}


def test_beads_do_not_overlap():
    spec = PhantomSpec(nz=7, height=30, width=30, bead_count=15, bead_radius_px=1, seed=9)
    c = bead_centers(spec)
    d = np.sqrt(((c[:, None, :] - c[None, :, :]) ** 2).sum(-1))
    assert np.all(d[np.triu_indices(len(c), 1)] > 2)


def test_overcrowded_phantom_rejected():
    with pytest.raises(ValidationError, match="could not place"):
        gen_bead_volume(PhantomSpec(nz=3, height=6, width=6, bead_count=20, bead_radius_px=1))


def test_beads_must_fit():
    with pytest.raises(ValidationError, match="fit"):
        PhantomSpec(nz=2, height=30, width=30, bead_count=1, bead_radius_px=1)


def test_poisson_zero_image():
    assert not np.any(add_poisson_noise(np.zeros((5, 5)), seed=1))


def test_poisson_mean_within_clt_bound():
    n, lam = 10_000, 100.0
    sample = add_poisson_noise(np.full((100, 100), lam), seed=11)
    # standard error of the mean is sqrt(lam / n); allow 3 of them
    assert abs(sample.mean() - lam) <= 3 * math.sqrt(lam / n)


def test_poisson_deterministic():
    img = np.linspace(0, 50, 64).reshape(8, 8)
    assert np.array_equal(add_poisson_noise(img, seed=5), add_poisson_noise(img, seed=5))


def test_poisson_rejects_negative():
    with pytest.raises(ValidationError):
        add_poisson_noise(np.array([[1.0, -1.0]]))


def test_simulate_noise_free_is_forward_projection():
    psf = gen_psf(BEAD_PSF)
    x, y = simulate(bead_phantom(0), psf, noise=False)
    assert np.array_equal(y, forward_project(x, psf))


def _relative_errors(spec, psf, iters):
    x_true, y = simulate(spec, psf, noise=False)
    eng = SerialEngine(psf, spec.height, spec.width)
    eng.fill(1.0)
    eng.fill(y.mean() / eng.forward().mean())
    errs = []
    for _ in range(iters):
        eng.update(y / (eng.forward() + eng.epsilon))
        errs.append(np.linalg.norm(eng.x - x_true) / np.linalg.norm(x_true))
    return np.array(errs)


def test_noise_free_recovery_single_plane():
    # one layer: the light-field model is identifiable and RL converges
    spec = PhantomSpec(nz=1, height=63, width=63, bead_count=10, bead_radius_px=0, seed=0)
    psf = gen_psf(SyntheticPsfSpec(nz=1, nnum=3, kh=9, kw=9, sigma0=0.8, sigma_slope=0.0, shear=0.0))
    errs = _relative_errors(spec, psf, 50)
    assert errs[-1] <= 0.10
    assert np.all(np.diff(errs) <= 1e-12)


def test_noise_free_error_improves_in_depth():
    # seven layers from one image is underdetermined: the error falls slowly
    # and RL may plateau briefly, so compare every tenth iterate
    errs = _relative_errors(bead_phantom(0), gen_psf(BEAD_PSF), 50)
    checkpoints = errs[::10]
    assert np.all(np.diff(checkpoints) < 0)
    assert errs[-1] < errs[0]
