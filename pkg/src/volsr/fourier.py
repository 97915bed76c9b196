"""Centered 3D DFTs, factor-2 k-space truncation and zero-filling.

The spectrum is stored with the DC coefficient at index ``n // 2`` on every
axis (``numpy.fft.fftshift`` convention). The forward transform is
unnormalized, the inverse carries the ``1 / N`` factor.

For even low-resolution sizes the Nyquist plane needs care: zero-filling
splits it evenly between ``-m/2`` and ``+m/2`` on the fine grid, and
truncation folds ``+m/2`` back onto ``-m/2``. This keeps both outputs real
and makes truncation an exact left inverse of zero-filling.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConsistencyError, ValidationError
from .volgrid import Volume

IMAG_TOL = 1e-6


@dataclass(frozen=True)
class KSpaceGrid:
    """Complex centered spectrum (complex128, shape ``dims``)."""

    coefficients: np.ndarray

    def __post_init__(self):
        arr = np.array(self.coefficients, dtype=np.complex128, copy=True)
        if arr.ndim != 3 or min(arr.shape) < 1:
            raise ValidationError(f"k-space must be a non-empty 3D array, got {arr.shape}")
        arr.setflags(write=False)
        object.__setattr__(self, "coefficients", arr)

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(int(n) for n in self.coefficients.shape)

    @property
    def dc_index(self) -> tuple[int, int, int]:
        return tuple(n // 2 for n in self.dims)


def fftc3(x: np.ndarray) -> np.ndarray:
    return np.fft.fftshift(np.fft.fftn(x, axes=(0, 1, 2)), axes=(0, 1, 2))


def ifftc3(k: np.ndarray) -> np.ndarray:
    return np.fft.ifftn(np.fft.ifftshift(k, axes=(0, 1, 2)), axes=(0, 1, 2))


def dft3_forward(v: Volume) -> KSpaceGrid:
    """Unnormalized forward DFT of the volume, DC moved to the centre index."""
    return KSpaceGrid(fftc3(v.data.astype(np.float64)))


def _real_part(x: np.ndarray, scale: float) -> np.ndarray:
    residue = np.abs(x.imag).max() if x.size else 0.0
    if residue > IMAG_TOL * max(scale, np.finfo(float).tiny):
        raise ConsistencyError(
            f"inverse transform has imaginary residue {residue:.3g} "
            f"(relative {residue / scale:.3g}); spectrum is not Hermitian"
        )
    return x.real


def _inverse_real(k: np.ndarray) -> np.ndarray:
    x = ifftc3(k)
    scale = max(np.abs(x.real).max(), np.abs(k).max() / k.size)
    return _real_part(x, scale)


def dft3_inverse(k: KSpaceGrid, spacing=(1.0, 1.0, 1.0)) -> Volume:
    """``1/N`` normalized inverse; raises if the result is not real."""
    return Volume(_inverse_real(k.coefficients), spacing)


def _check_factor(factor):
    if factor != 2:
        raise ValidationError(f"only factor 2 is supported, got {factor}")


def crop_axis(k: np.ndarray, axis: int, m: int) -> np.ndarray:
    """Keep ``m`` centred frequencies along ``axis``; fold +m/2 onto -m/2 if m is even."""
    n = k.shape[axis]
    start = n // 2 - m // 2
    out = np.take(k, np.arange(start, start + m), axis=axis)
    if m % 2 == 0 and start + m < n:
        nyq = [slice(None)] * 3
        nyq[axis] = slice(0, 1)
        mirror = [slice(None)] * 3
        mirror[axis] = slice(start + m, start + m + 1)
        out[tuple(nyq)] += k[tuple(mirror)]
    return out


def embed_axis(k: np.ndarray, axis: int, n: int) -> np.ndarray:
    """Inverse of :func:`crop_axis`: centre ``k`` in ``n`` samples, splitting the Nyquist plane."""
    m = k.shape[axis]
    start = n // 2 - m // 2
    shape = list(k.shape)
    shape[axis] = n
    out = np.zeros(shape, dtype=np.complex128)
    idx = [slice(None)] * 3
    idx[axis] = slice(start, start + m)
    out[tuple(idx)] = k
    if m % 2 == 0 and start + m < n:
        nyq = [slice(None)] * 3
        nyq[axis] = slice(start, start + 1)
        mirror = [slice(None)] * 3
        mirror[axis] = slice(start + m, start + m + 1)
        half = out[tuple(nyq)] * 0.5
        out[tuple(nyq)] = half
        out[tuple(mirror)] = half
    return out


def raised_cosine_taper(m: int, width: int) -> np.ndarray:
    """Weights over ``m`` centred frequencies; the outermost ``width`` roll off.

    Weights depend on ``|frequency|`` only, so Hermitian symmetry survives.
    """
    freqs = np.arange(m) - m // 2
    edge = m // 2
    dist = edge - np.abs(freqs)  # 0 at the outermost retained frequency
    w = np.ones(m)
    if width > 0:
        ramp = dist < width
        w[ramp] = 0.5 * (1.0 - np.cos(np.pi * (dist[ramp] + 1) / (width + 1)))
    return w


def truncate_array(x: np.ndarray) -> np.ndarray:
    """Array core of :func:`kspace_truncate_downsample`."""
    x = np.asarray(x, dtype=np.float64)
    if any(n % 2 for n in x.shape):
        raise ValidationError(f"truncation needs even dims, got {x.shape}")
    k = fftc3(x)
    for axis, n in enumerate(x.shape):
        k = crop_axis(k, axis, n // 2)
    return _inverse_real(k / 8.0)


def zerofill_array(x: np.ndarray, edge_filter: int | None = None) -> np.ndarray:
    """Array core of :func:`kspace_zerofill_upsample`."""
    x = np.asarray(x, dtype=np.float64)
    k = fftc3(x)
    if edge_filter is not None:
        if edge_filter < 0:
            raise ValidationError("edge filter width must be >= 0")
        for axis, m in enumerate(x.shape):
            shape = [1, 1, 1]
            shape[axis] = m
            k = k * raised_cosine_taper(m, int(edge_filter)).reshape(shape)
    for axis, m in enumerate(x.shape):
        k = embed_axis(k, axis, 2 * m)
    return _inverse_real(k * 8.0)


def kspace_truncate_downsample(v: Volume, factor: int = 2) -> Volume:
    """Factor-2 degradation by centred k-space cropping.

    Output dims are halved, spacing doubled, mean preserved.
    """
    _check_factor(factor)
    return Volume(truncate_array(v.data), tuple(2.0 * s for s in v.spacing))


def kspace_zerofill_upsample(v: Volume, factor: int = 2, edge_filter: int | None = None) -> Volume:
    """Factor-2 upsampling by embedding the spectrum in a zero grid.

    ``edge_filter=w`` applies a raised-cosine taper over the outermost ``w``
    retained frequencies per axis before embedding; default is no filter.
    """
    _check_factor(factor)
    return Volume(zerofill_array(v.data, edge_filter), tuple(0.5 * s for s in v.spacing))
