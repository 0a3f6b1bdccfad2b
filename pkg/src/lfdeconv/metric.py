"""DCT-entropy image quality metric.

The metric is the Shannon entropy of L2-normalized DCT coefficient
magnitudes inside the low-frequency cutoff region set by the optics. It is
evaluated on z-maximum projections of reconstructed volumes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import scipy.fft

from .errors import DimensionError, ValidationError
from .optics import CutoffRegion

REGION_SHAPES = ("triangle", "rectangle")


@dataclass(frozen=True)
class MetricConfig:
    """Metric options.

    Only the region shape is selectable. The L2 normalization is always over
    the full coefficient matrix and ``0 * log2(0)`` is always 0.
    """

    region_shape: str = "triangle"

    def __post_init__(self):
        if self.region_shape not in REGION_SHAPES:
            raise ValidationError(
                f"region_shape: expected one of {REGION_SHAPES}, got {self.region_shape!r}"
            )


def _as_image(image) -> np.ndarray:
    arr = np.asarray(image, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 1:
        raise DimensionError(f"expected a non-empty 2D image, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValidationError("image contains non-finite values")
    return arr


def dct2(image) -> np.ndarray:
    """Orthonormal 2D DCT-II.

    ``F[v, u] = sum_{y,x} f[y, x] C_v(y, M) C_u(x, N)`` with
    ``C_k(n, Z) = c(k, Z) cos((2n + 1) pi k / 2Z)``, ``c(0, Z) = 1/sqrt(Z)``
    and ``c(k, Z) = sqrt(2/Z)`` otherwise. Output is float64.
    """
    return scipy.fft.dctn(_as_image(image), type=2, norm="ortho", workers=1)


def idct2(coeffs) -> np.ndarray:
    """Inverse of :func:`dct2`."""
    return scipy.fft.idctn(_as_image(coeffs), type=2, norm="ortho", workers=1)


def shannon_entropy(p) -> float:
    """Shannon entropy in bits, ``-sum p log2 p`` with ``0 log2 0 = 0``.

    The input is not renormalized.
    """
    p = np.asarray(p, dtype=np.float64).ravel()
    if np.any(p < 0):
        raise ValidationError("probabilities must be nonnegative")
    nz = p[p > 0]
    return math.fsum(-nz * np.log2(nz)) + 0.0


def max_project_z(volume) -> np.ndarray:
    """Per-pixel maximum over the leading (z) axis of a ``(nz, H, W)`` volume."""
    vol = np.asarray(volume)
    if vol.ndim != 3 or vol.shape[0] < 1:
        raise DimensionError(f"expected a (nz, H, W) volume with nz >= 1, got shape {vol.shape}")
    return vol.max(axis=0)


def entropy_terms(coeffs: np.ndarray, idx: np.ndarray) -> np.ndarray:
    """Per-member contributions ``-w log2 w`` for ``w = |F[v, u]| / ||F||_2``.

    ``idx`` is an ``(K, 2)`` array of ``(u, v)`` pairs. Terms come back in the
    order of ``idx``; an all-zero matrix gives all-zero terms.
    """
    norm = float(np.sqrt(np.sum(coeffs * coeffs)))
    if norm == 0.0:
        return np.zeros(len(idx))
    w = np.abs(coeffs[idx[:, 1], idx[:, 0]]) / norm
    terms = np.zeros_like(w)
    pos = w > 0
    terms[pos] = -w[pos] * np.log2(w[pos])
    return terms


def dct_entropy(image, region: CutoffRegion, config: MetricConfig | None = None) -> float:
    """DCT entropy of ``image`` over ``region``.

    Returns ``(2 / (X_S * Y_S)) * sum(-w log2 w)`` where ``w`` runs over the
    normalized coefficient magnitudes inside the region. Scale invariant in
    ``image``; 0 for a constant or all-zero image.
    """
    config = config or MetricConfig()
    img = _as_image(image)
    if img.shape != (region.height, region.width):
        raise DimensionError(
            f"image shape {img.shape} does not match region built for "
            f"{(region.height, region.width)}"
        )
    terms = entropy_terms(dct2(img), region.indices(config.region_shape))
    # fsum is correctly rounded, hence independent of summation order
    return 2.0 / (region.x_s * region.y_s) * math.fsum(terms) + 0.0
