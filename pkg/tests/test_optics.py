import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lfdeconv.errors import ValidationError
from lfdeconv.optics import (
    OpticsParams,
    cutoff_region,
    rectangle_members,
    region_from_sizes,
    resolution_limit,
    sample_pitch,
    triangle_members,
)
from oracles import count_triangle


def params(wavelength=0.52, na=0.5, pitch=150.0, mag=40.0, nnum=15):
    return OpticsParams(wavelength, na, pitch, mag, nnum)


@pytest.mark.parametrize("pitch, mag, nnum, expected", [
    (150.0, 40.0, 15, 0.25),
    (100.0, 1.0, 1, 100.0),
    (125.0, 25.0, 5, 1.0),
])
def test_sample_pitch(pitch, mag, nnum, expected):
    assert sample_pitch(params(pitch=pitch, mag=mag, nnum=nnum)) == pytest.approx(expected, rel=1e-15)


@pytest.mark.parametrize("wavelength, na, nnum, expected", [
    (0.52, 0.5, 15, 19.032),
    (0.5, 0.61, 1, 1.0),
])
def test_resolution_limit(wavelength, na, nnum, expected):
    assert resolution_limit(params(wavelength=wavelength, na=na, nnum=nnum)) == pytest.approx(expected, rel=1e-12)


def test_single_virtual_pixel_is_airy_unit():
    p = params(wavelength=0.6, na=1.2, nnum=1)
    assert resolution_limit(p) == pytest.approx(1.22 * 0.6 / 1.2, rel=1e-15)


@pytest.mark.parametrize("kwargs", [
    dict(wavelength=0.0), dict(na=-0.1), dict(pitch=float("nan")), dict(mag=float("inf")),
    dict(na=1.7), dict(nnum=0), dict(nnum=14), dict(nnum=3.0),
])
def test_invalid_params_rejected(kwargs):
    with pytest.raises(ValidationError):
        params(**kwargs)


def test_even_nnum_diagnosis_mentions_odd():
    with pytest.raises(ValidationError, match="odd"):
        params(nnum=14)


def test_cutoff_region_reference_case():
    # P_u = 0.25 um, d_psf = 1.22*0.52*15/0.8 = 11.895 um; 0.25*600/11.895 = 12.61 -> 13
    p = params(wavelength=0.52, na=0.8, pitch=150.0, mag=40.0, nnum=15)
    assert resolution_limit(p) == pytest.approx(11.895)
    region = cutoff_region(p, 600, 600)
    assert (region.x_s, region.y_s) == (13, 13)
    assert region.g_s == 84.5
    assert region.cutoff_position_p == pytest.approx((11.895 / 0.25 * 600,) * 2)


def test_cutoff_region_boundary_is_single_coefficient():
    # P_u = 1, d_psf = 1.22*1/0.61 = 2 = P_u*N
    p = OpticsParams(wavelength_um=1.0, na=0.61, mla_pitch_um=1.0, magnification=1.0, nnum=1)
    region = cutoff_region(p, 2, 2)
    assert (region.x_s, region.y_s) == (1, 1)
    assert region.members.tolist() == [[0, 0]]


def test_square_image_gives_square_region():
    region = cutoff_region(params(), 120, 120)
    assert region.x_s == region.y_s


def test_region_clamped_to_image():
    # tiny d_psf relative to the pitch would ask for more coefficients than exist
    p = OpticsParams(wavelength_um=0.3, na=1.5, mla_pitch_um=500.0, magnification=1.0, nnum=1)
    region = cutoff_region(p, 16, 24)
    assert (region.x_s, region.y_s) == (24, 16)


def test_rejects_tiny_images():
    with pytest.raises(ValidationError):
        cutoff_region(params(), 1, 10)


def test_rectangle_variant_covers_bounds():
    region = region_from_sizes(4, 3, 10, 10)
    rect = region.indices("rectangle")
    assert len(rect) == 12
    assert set(map(tuple, region.members)) <= set(map(tuple, rect))
    assert region.mask("triangle").sum() == len(region.members)
    with pytest.raises(ValidationError):
        region.indices("circle")


def test_members_order_is_u_major():
    m = triangle_members(5, 4)
    keys = [tuple(r) for r in m]
    assert keys == sorted(keys)


# -- properties --------------------------------------------------------------

@given(st.floats(0.3, 0.9), st.floats(0.2, 1.4), st.floats(10, 500), st.floats(1, 100),
       st.sampled_from([1, 3, 5, 11, 15]), st.sampled_from([2.0, 4.0, 0.5]))
def test_homogeneity(wavelength, na, pitch, mag, nnum, factor):
    base = OpticsParams(wavelength, na, pitch, mag, nnum)
    assert sample_pitch(OpticsParams(wavelength, na, pitch * factor, mag, nnum)) == sample_pitch(base) * factor
    scaled = resolution_limit(OpticsParams(wavelength * factor, na, pitch, mag, nnum))
    assert scaled == pytest.approx(resolution_limit(base) * factor, rel=2.3e-16)


@given(st.integers(1, 40), st.integers(1, 40))
def test_members_downward_closed(x_s, y_s):
    members = set(map(tuple, triangle_members(x_s, y_s)))
    assert (0, 0) in members
    for u, v in members:
        for du, dv in ((u - 1, v), (u, v - 1)):
            if du >= 0 and dv >= 0:
                assert (du, dv) in members


def test_member_counts_exhaustive():
    for x_s in range(1, 65):
        for y_s in range(1, 65):
            m = triangle_members(x_s, y_s)
            assert len(m) == count_triangle(x_s, y_s)
            assert abs(len(m) - x_s * y_s / 2) <= x_s + y_s


@settings(max_examples=200)
@given(st.floats(0.3, 0.9), st.floats(0.1, 1.4), st.floats(0.1, 1.4), st.integers(2, 400), st.integers(2, 400))
def test_larger_psf_never_grows_region(wavelength, na1, na2, m, n):
    hi, lo = max(na1, na2), min(na1, na2)
    sharp = cutoff_region(OpticsParams(wavelength, hi, 150.0, 40.0, 3), m, n)
    blurry = cutoff_region(OpticsParams(wavelength, lo, 150.0, 40.0, 3), m, n)
    assert blurry.x_s <= sharp.x_s and blurry.y_s <= sharp.y_s


def test_rectangle_members_count():
    assert len(rectangle_members(7, 9)) == 63
