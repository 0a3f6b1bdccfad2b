"""Shift-variant light-field forward model and its adjoint.

A volume voxel at lateral position ``(p, q)`` with lattice phase
``(a, b) = (p % nnum, q % nnum)`` on layer ``z`` is imaged through kernel
``h[z][a][b]``. The measurement is the sum over layers and phases of
"same"-size zero-padded convolutions of lattice-masked layers.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.fft
import scipy.signal

from .errors import DimensionError, ValidationError

METHODS = ("fft", "direct")


@dataclass(frozen=True)
class PsfStack:
    """Shift-variant kernel bank ``kernels[z, a, b]`` of shape ``(nz, nnum, nnum, kh, kw)``."""

    kernels: np.ndarray

    def __post_init__(self):
        k = np.asarray(self.kernels, dtype=np.float64)
        if k.ndim != 5:
            raise DimensionError(f"kernels must be 5D (nz, nnum, nnum, kh, kw), got shape {k.shape}")
        nz, na, nb, kh, kw = k.shape
        if nz < 1 or na < 1:
            raise DimensionError(f"kernels must have nz >= 1 and nnum >= 1, got shape {k.shape}")
        if na != nb:
            raise DimensionError(f"lattice axes must be equal, got {na} and {nb}")
        if kh % 2 == 0 or kw % 2 == 0:
            raise ValidationError(f"kernel dimensions must be odd, got {kh}x{kw}")
        if not np.all(np.isfinite(k)):
            raise ValidationError("kernels contain non-finite values")
        if np.any(k < 0):
            z = int(np.argwhere(k < 0)[0][0])
            raise ValidationError(f"kernels must be nonnegative (first negative value in layer z={z})")
        empty = [z for z in range(nz) if not np.any(k[z])]
        if empty:
            raise ValidationError(f"every layer needs at least one nonzero kernel; empty layers: {empty}")
        object.__setattr__(self, "kernels", k)

    @property
    def nz(self) -> int:
        return self.kernels.shape[0]

    @property
    def nnum(self) -> int:
        return self.kernels.shape[1]

    @property
    def kh(self) -> int:
        return self.kernels.shape[3]

    @property
    def kw(self) -> int:
        return self.kernels.shape[4]

    def layers(self, start: int, stop: int) -> "PsfStack":
        return PsfStack(self.kernels[start:stop])


def check_lateral(height: int, width: int, nnum: int) -> None:
    if height < 1 or width < 1:
        raise DimensionError(f"lateral size must be positive, got {height}x{width}")
    if height % nnum or width % nnum:
        raise DimensionError(
            f"lateral size {height}x{width} is not divisible by nnum={nnum}; "
            "input must be rectified to whole lenslets"
        )


def padded_shape(height: int, width: int, kh: int, kw: int) -> tuple[int, int]:
    """FFT size used for alias-free linear convolution of an image with a kernel."""
    return (
        scipy.fft.next_fast_len(height + kh - 1, real=True),
        scipy.fft.next_fast_len(width + kw - 1, real=True),
    )


class LayerOperator:
    """Forward and adjoint projections for a contiguous block of PSF layers.

    Kernel spectra are computed once on construction and reused for every
    call, so an instance is the natural unit a pipeline worker owns.

    Parameters
    ----------
    kernels : ndarray
        ``(nz_local, nnum, nnum, kh, kw)`` slab of a :class:`PsfStack`. May be
        empty along the first axis.
    height, width : int
        Lateral size of measurement and volume.
    method : {"fft", "direct"}
        FFT convolution, or direct spatial convolution for checking.
    """

    def __init__(self, kernels: np.ndarray, height: int, width: int, method: str = "fft"):
        if method not in METHODS:
            raise ValidationError(f"method must be one of {METHODS}, got {method!r}")
        kernels = np.asarray(kernels, dtype=np.float64)
        self.nz, self.nnum, _, self.kh, self.kw = kernels.shape
        check_lateral(height, width, self.nnum)
        self.kernels = kernels
        self.height, self.width = height, width
        self.method = method
        self.ch, self.cw = (self.kh - 1) // 2, (self.kw - 1) // 2
        if method == "fft":
            self.pad_shape = padded_shape(height, width, self.kh, self.kw)
            hp, wp = self.pad_shape
            self.spectra = scipy.fft.rfft2(kernels, s=self.pad_shape, axes=(-2, -1), workers=1)
            # circular indices of the "same" window inside the padded correlation
            self._corr_rows = (np.arange(height) - self.ch) % hp
            self._corr_cols = (np.arange(width) - self.cw) % wp
        else:
            self.pad_shape = (height + self.kh - 1, width + self.kw - 1)

    def forward_layers(self, x: np.ndarray) -> np.ndarray:
        """Per-layer contributions ``(nz_local, H, W)`` to the light-field image."""
        x = np.asarray(x, dtype=np.float64)
        if x.shape != (self.nz, self.height, self.width):
            raise DimensionError(
                f"volume shape {x.shape} does not match operator {(self.nz, self.height, self.width)}"
            )
        out = np.empty((self.nz, self.height, self.width))
        nonneg = self.nz == 0 or x.min() >= 0
        n = self.nnum
        masked = np.zeros((self.height, self.width))
        for z in range(self.nz):
            if self.method == "fft":
                acc = None
                for a in range(n):
                    for b in range(n):
                        masked[:] = 0.0
                        masked[a::n, b::n] = x[z, a::n, b::n]
                        term = scipy.fft.rfft2(masked, s=self.pad_shape, workers=1)
                        term *= self.spectra[z, a, b]
                        if acc is None:
                            acc = term
                        else:
                            acc += term
                full = scipy.fft.irfft2(acc, s=self.pad_shape, workers=1)
                out[z] = full[self.ch:self.ch + self.height, self.cw:self.cw + self.width]
            else:
                out[z] = 0.0
                for a in range(n):
                    for b in range(n):
                        masked[:] = 0.0
                        masked[a::n, b::n] = x[z, a::n, b::n]
                        out[z] += scipy.signal.convolve2d(masked, self.kernels[z, a, b], mode="same")
        if nonneg and self.method == "fft":
            # FFT round-off can leave -1e-17 where the exact result is 0
            np.maximum(out, 0.0, out=out)
        return out

    def backward(self, y: np.ndarray) -> np.ndarray:
        """Adjoint projection of a light-field image onto this block's layers."""
        y = np.asarray(y, dtype=np.float64)
        if y.shape != (self.height, self.width):
            raise DimensionError(f"image shape {y.shape} does not match operator {(self.height, self.width)}")
        out = np.zeros((self.nz, self.height, self.width))
        if self.nz == 0:
            return out
        n = self.nnum
        if self.method == "fft":
            nonneg = y.min() >= 0
            spec = scipy.fft.rfft2(y, s=self.pad_shape, workers=1)
            for z in range(self.nz):
                for a in range(n):
                    rows = self._corr_rows[a::n]
                    for b in range(n):
                        corr = scipy.fft.irfft2(
                            spec * np.conj(self.spectra[z, a, b]), s=self.pad_shape, workers=1
                        )
                        out[z, a::n, b::n] = corr[np.ix_(rows, self._corr_cols[b::n])]
            if nonneg:
                np.maximum(out, 0.0, out=out)
        else:
            for z in range(self.nz):
                for a in range(n):
                    for b in range(n):
                        flipped = self.kernels[z, a, b, ::-1, ::-1]
                        corr = scipy.signal.convolve2d(y, flipped, mode="same")
                        out[z, a::n, b::n] = corr[a::n, b::n]
        return out


def reduce_layers(partial: np.ndarray, acc: np.ndarray | None = None) -> np.ndarray:
    """Add per-layer images into ``acc`` one layer at a time, in ascending z.

    Chaining this over consecutive layer blocks reproduces the single-block
    sum bit for bit, whatever the block boundaries.
    """
    if acc is None:
        acc = np.zeros(partial.shape[1:])
    for layer in partial:
        acc += layer
    return acc


def _check_pair(x_shape, psf: PsfStack):
    nz, h, w = x_shape
    if nz != psf.nz:
        raise DimensionError(f"volume has {nz} layers but PSF has {psf.nz}")
    check_lateral(h, w, psf.nnum)


def forward_project(x, psf: PsfStack, method: str = "fft") -> np.ndarray:
    """Light-field image ``H x`` of a ``(nz, H, W)`` volume (float64, same lateral size)."""
    x = np.asarray(x)
    if x.ndim != 3:
        raise DimensionError(f"volume must be 3D, got shape {x.shape}")
    _check_pair(x.shape, psf)
    op = LayerOperator(psf.kernels, x.shape[1], x.shape[2], method)
    return reduce_layers(op.forward_layers(x))


def backward_project(y, psf: PsfStack, method: str = "fft") -> np.ndarray:
    """Adjoint ``H^T y``: a ``(nz, H, W)`` float64 volume."""
    y = np.asarray(y)
    if y.ndim != 2:
        raise DimensionError(f"light-field image must be 2D, got shape {y.shape}")
    _check_pair((psf.nz,) + y.shape, psf)
    return LayerOperator(psf.kernels, y.shape[0], y.shape[1], method).backward(y)


def compute_normalizer(psf: PsfStack, height: int, width: int, method: str = "fft") -> np.ndarray:
    """Per-voxel sensitivity ``H^T 1``."""
    check_lateral(height, width, psf.nnum)
    return backward_project(np.ones((height, width)), psf, method)
