"""Optical parameters of a light-field microscope and the derived DCT cutoff geometry."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ValidationError

AIRY_FACTOR = 1.22
MAX_NA = 1.6

# ratios this close to an integer are treated as that integer before ceil,
# so P_u*N == d_psf lands on 1 rather than 2 after round-off
_CEIL_RTOL = 1e-9


@dataclass(frozen=True)
class OpticsParams:
    """Objective and microlens-array description.

    Parameters
    ----------
    wavelength_um : float
        Emission wavelength in micrometers.
    na : float
        Numerical aperture of the objective.
    mla_pitch_um : float
        Microlens pitch in micrometers.
    magnification : float
        Objective magnification.
    nnum : int
        Virtual pixels behind each microlens, per axis. Must be odd.
    """

    wavelength_um: float
    na: float
    mla_pitch_um: float
    magnification: float
    nnum: int

    def __post_init__(self):
        for name in ("wavelength_um", "na", "mla_pitch_um", "magnification"):
            value = getattr(self, name)
            if not isinstance(value, (int, float)) or isinstance(value, bool):
                raise ValidationError(f"{name}: expected a number, got {value!r}")
            if not math.isfinite(value) or value <= 0:
                raise ValidationError(f"{name}: must be strictly positive and finite, got {value!r}")
        if self.na > MAX_NA:
            raise ValidationError(f"na: must be <= {MAX_NA}, got {self.na!r}")
        if isinstance(self.nnum, bool) or not isinstance(self.nnum, (int, np.integer)):
            raise ValidationError(f"nnum: expected a positive odd integer, got {self.nnum!r}")
        if self.nnum < 1:
            raise ValidationError(f"nnum: must be >= 1, got {self.nnum}")
        if self.nnum % 2 == 0:
            raise ValidationError(f"nnum: must be odd so the lenslet lattice has a center, got {self.nnum}")


def sample_pitch(params: OpticsParams) -> float:
    """Object-space size of one virtual pixel, ``d_ML / (Q * Nnum)``, in micrometers."""
    return params.mla_pitch_um / (params.magnification * params.nnum)


def resolution_limit(params: OpticsParams) -> float:
    """Light-field PSF resolution limit ``1.22 * lambda * Nnum / NA`` in micrometers.

    With ``nnum == 1`` this is the classical Airy unit.
    """
    return AIRY_FACTOR * params.wavelength_um * params.nnum / params.na


def _ceil_index(ratio: float) -> int:
    nearest = round(ratio)
    if abs(ratio - nearest) <= _CEIL_RTOL * max(1.0, abs(ratio)):
        return int(nearest)
    return math.ceil(ratio)


def triangle_members(x_s: int, y_s: int) -> np.ndarray:
    """Lattice points ``(u, v)`` with ``u*y_s + v*x_s < x_s*y_s``, sorted u-major."""
    u, v = np.meshgrid(np.arange(x_s), np.arange(y_s), indexing="ij")
    inside = u * y_s + v * x_s < x_s * y_s
    return np.stack([u[inside], v[inside]], axis=1)


def rectangle_members(x_s: int, y_s: int) -> np.ndarray:
    """All ``(u, v)`` with ``u < x_s`` and ``v < y_s``, sorted u-major."""
    u, v = np.meshgrid(np.arange(x_s), np.arange(y_s), indexing="ij")
    return np.stack([u.ravel(), v.ravel()], axis=1)


@dataclass(frozen=True)
class CutoffRegion:
    """Low-frequency DCT region resolvable by the optics.

    ``u`` indexes DCT columns (image width ``N``) and ``v`` indexes DCT rows
    (image height ``M``), so coefficient ``(u, v)`` is ``F[v, u]``.
    """

    x_s: int
    y_s: int
    g_s: float
    height: int
    width: int
    cutoff_position_p: tuple[float, float]
    members: np.ndarray = field(repr=False, compare=False)

    def indices(self, shape: str = "triangle") -> np.ndarray:
        if shape == "triangle":
            return self.members
        if shape == "rectangle":
            return rectangle_members(self.x_s, self.y_s)
        raise ValidationError(f"region_shape: expected 'triangle' or 'rectangle', got {shape!r}")

    def mask(self, shape: str = "triangle") -> np.ndarray:
        """Boolean ``(height, width)`` mask selecting the region in a DCT array."""
        out = np.zeros((self.height, self.width), dtype=bool)
        idx = self.indices(shape)
        out[idx[:, 1], idx[:, 0]] = True
        return out


def region_from_sizes(x_s: int, y_s: int, height: int, width: int,
                      cutoff_position_p=(math.nan, math.nan)) -> CutoffRegion:
    """Build a region directly from its extents, bypassing the optics."""
    if height < 2 or width < 2:
        raise ValidationError(f"image must be at least 2x2, got {height}x{width}")
    if not (1 <= x_s <= width and 1 <= y_s <= height):
        raise ValidationError(f"region {x_s}x{y_s} does not fit a {height}x{width} image")
    return CutoffRegion(
        x_s=int(x_s),
        y_s=int(y_s),
        g_s=x_s * y_s / 2,
        height=int(height),
        width=int(width),
        cutoff_position_p=tuple(float(p) for p in cutoff_position_p),
        members=triangle_members(int(x_s), int(y_s)),
    )


def cutoff_region(params: OpticsParams, height_m: int, width_n: int) -> CutoffRegion:
    """Triangular DCT region bounded by the optical resolution limit.

    Parameters
    ----------
    params : OpticsParams
    height_m, width_n : int
        Image height ``M`` and width ``N`` in pixels, both at least 2.

    Returns
    -------
    CutoffRegion
        ``x_s = ceil(P_u*N/d_psf)`` and ``y_s = ceil(P_u*M/d_psf)``, each
        clamped to the image. ``cutoff_position_p`` holds ``(d_psf/P_u)*W``
        for the width and height axes; it is informational only.
    """
    if height_m < 2 or width_n < 2:
        raise ValidationError(f"image must be at least 2x2, got {height_m}x{width_n}")
    p_u = sample_pitch(params)
    d_psf = resolution_limit(params)
    x_s = min(max(_ceil_index(p_u * width_n / d_psf), 1), width_n)
    y_s = min(max(_ceil_index(p_u * height_m / d_psf), 1), height_m)
    p_info = (d_psf / p_u * width_n, d_psf / p_u * height_m)
    return region_from_sizes(x_s, y_s, height_m, width_n, p_info)
