"""Synthetic PSF banks, bead volumes and Poisson-noisy measurements."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import erf

from .errors import ValidationError
from .lfmodel import PsfStack, forward_project

MAX_LOST_MASS = 0.01
MAX_PLACEMENT_TRIES = 10_000


@dataclass(frozen=True)
class SyntheticPsfSpec:
    """Gaussian-with-parallax PSF description.

    ``sigma_slope`` widens the Gaussian per layer away from the focal layer;
    ``shear`` displaces kernels in proportion to depth and lattice offset,
    standing in for light-field parallax.
    """

    nz: int = 7
    nnum: int = 3
    kh: int = 21
    kw: int = 21
    sigma0: float = 1.0
    sigma_slope: float = 0.5
    shear: float = 3.0

    def __post_init__(self):
        if self.nz < 1:
            raise ValidationError(f"nz: must be >= 1, got {self.nz}")
        if self.nnum < 1 or self.nnum % 2 == 0:
            raise ValidationError(f"nnum: must be a positive odd integer, got {self.nnum}")
        if self.kh < 1 or self.kw < 1 or self.kh % 2 == 0 or self.kw % 2 == 0:
            raise ValidationError(f"kernel size must be odd, got {self.kh}x{self.kw}")
        if not self.sigma0 > 0:
            raise ValidationError(f"sigma0: must be > 0, got {self.sigma0}")
        if self.sigma_slope < 0:
            raise ValidationError(f"sigma_slope: must be >= 0, got {self.sigma_slope}")


@dataclass(frozen=True)
class PhantomSpec:
    """Bead phantom description. ``photon_scale`` is the bead voxel value."""

    nz: int = 7
    height: int = 63
    width: int = 63
    bead_count: int = 6
    bead_radius_px: int = 1
    seed: int = 0
    photon_scale: float = 200.0

    def __post_init__(self):
        if min(self.nz, self.height, self.width) < 1:
            raise ValidationError(f"volume size must be positive, got {(self.nz, self.height, self.width)}")
        if self.bead_count < 0:
            raise ValidationError(f"bead_count: must be >= 0, got {self.bead_count}")
        if self.bead_radius_px < 0:
            raise ValidationError(f"bead_radius_px: must be >= 0, got {self.bead_radius_px}")
        r = self.bead_radius_px
        if self.bead_count and 2 * r + 1 > min(self.nz, self.height, self.width):
            raise ValidationError(
                f"beads of radius {r} do not fit a {self.nz}x{self.height}x{self.width} volume"
            )
        if not self.photon_scale >= 0:
            raise ValidationError(f"photon_scale: must be >= 0, got {self.photon_scale}")


def _window_mass(center: float, sigma: float, size: int) -> float:
    # fraction of a continuous Gaussian falling inside pixels [-0.5, size - 0.5)
    lo = (-0.5 - center) / (sigma * math.sqrt(2))
    hi = (size - 0.5 - center) / (sigma * math.sqrt(2))
    return 0.5 * (erf(hi) - erf(lo))


def gen_psf(spec: SyntheticPsfSpec) -> PsfStack:
    """Shift-variant Gaussian PSF bank.

    Kernel ``h[z][a][b]`` is a sampled Gaussian of width
    ``sigma0 + sigma_slope * |z - zc|`` centered at
    ``shear * (z - zc) * ((a, b) - (c, c)) / nnum`` from the kernel center,
    with ``zc = (nz - 1) / 2`` and ``c = (nnum - 1) / 2``. Each layer's kernels
    jointly sum to 1.

    Raises
    ------
    ValidationError
        If any kernel would lose more than 1% of its mass outside the support.
    """
    n, kh, kw = spec.nnum, spec.kh, spec.kw
    zc = (spec.nz - 1) / 2
    c = (n - 1) / 2
    ii = np.arange(kh)[:, None]
    jj = np.arange(kw)[None, :]
    kernels = np.empty((spec.nz, n, n, kh, kw))
    for z in range(spec.nz):
        sigma = spec.sigma0 + spec.sigma_slope * abs(z - zc)
        for a in range(n):
            for b in range(n):
                di = spec.shear * (z - zc) * (a - c) / n
                dj = spec.shear * (z - zc) * (b - c) / n
                ci, cj = (kh - 1) / 2 + di, (kw - 1) / 2 + dj
                kept = _window_mass(ci, sigma, kh) * _window_mass(cj, sigma, kw)
                if 1.0 - kept > MAX_LOST_MASS:
                    raise ValidationError(
                        f"kernel z={z} a={a} b={b} loses {100 * (1 - kept):.1f}% of its mass "
                        f"outside the {kh}x{kw} support; enlarge the kernel or reduce shear/sigma"
                    )
                kernels[z, a, b] = np.exp(-((ii - ci) ** 2 + (jj - cj) ** 2) / (2 * sigma**2))
        kernels[z] /= kernels[z].sum()
    return PsfStack(kernels)


def sphere_offsets(radius: int) -> np.ndarray:
    """Integer offsets ``(dz, dy, dx)`` with ``dz^2 + dy^2 + dx^2 <= radius^2``."""
    r = np.arange(-radius, radius + 1)
    dz, dy, dx = np.meshgrid(r, r, r, indexing="ij")
    inside = dz**2 + dy**2 + dx**2 <= radius**2
    return np.stack([dz[inside], dy[inside], dx[inside]], axis=1)


def bead_centers(spec: PhantomSpec) -> np.ndarray:
    """Seeded non-overlapping bead centers, ``(bead_count, 3)`` integer array."""
    rng = np.random.default_rng(spec.seed)
    r = spec.bead_radius_px
    lo = np.array([r, r, r])
    hi = np.array([spec.nz, spec.height, spec.width]) - r
    centers: list[np.ndarray] = []
    tries = 0
    while len(centers) < spec.bead_count:
        if tries >= MAX_PLACEMENT_TRIES:
            raise ValidationError(
                f"could not place {spec.bead_count} non-overlapping beads of radius {r} "
                f"after {MAX_PLACEMENT_TRIES} attempts"
            )
        tries += 1
        cand = rng.integers(lo, hi)
        # centers further apart than 2r share no voxel
        if all(np.sum((cand - other) ** 2) > (2 * r) ** 2 for other in centers):
            centers.append(cand)
    return np.array(centers, dtype=int).reshape(-1, 3)


def gen_bead_volume(spec: PhantomSpec) -> np.ndarray:
    """Hard-sphere bead volume, ``photon_scale`` inside beads and 0 elsewhere."""
    vol = np.zeros((spec.nz, spec.height, spec.width))
    offsets = sphere_offsets(spec.bead_radius_px)
    for center in bead_centers(spec):
        pts = center + offsets
        vol[pts[:, 0], pts[:, 1], pts[:, 2]] = spec.photon_scale
    return vol


def add_poisson_noise(image, seed=0) -> np.ndarray:
    """Independent Poisson sample per pixel with the pixel value as mean.

    ``seed`` is anything :func:`numpy.random.default_rng` accepts.
    """
    image = np.asarray(image, dtype=np.float64)
    if not np.all(np.isfinite(image)):
        raise ValidationError("image contains non-finite values")
    if np.any(image < 0):
        raise ValidationError("Poisson means must be nonnegative")
    rng = np.random.default_rng(seed)
    return rng.poisson(image).astype(np.float64)


def noise_seed(seed: int) -> tuple[int, int]:
    """Noise stream derived from a phantom seed, distinct from bead placement."""
    return (seed, 1)


def simulate(spec: PhantomSpec, psf: PsfStack, noise: bool = True):
    """Bead volume and its light-field measurement ``H x`` (Poisson-sampled if ``noise``).

    Returns ``(volume, image)``.
    """
    if psf.nz != spec.nz:
        raise ValidationError(f"phantom has {spec.nz} layers but PSF has {psf.nz}")
    volume = gen_bead_volume(spec)
    image = forward_project(volume, psf)
    if noise:
        image = add_poisson_noise(image, noise_seed(spec.seed))
    return volume, image
