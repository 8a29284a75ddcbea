"""Radix-2 Cooley-Tukey FFT and complex tensors.

Transforms act on the last two axes. ``ifft2`` carries the ``1/(H*W)``
factor. A :class:`ComplexTensor` is a pair of real tensors, so gradients flow
into the real and imaginary parts separately.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .core import Tensor


def _is_pow2(n: int) -> bool:
    return n >= 1 and (n & (n - 1)) == 0


@lru_cache(maxsize=None)
def _bitrev(n: int) -> np.ndarray:
    bits = n.bit_length() - 1
    idx = np.arange(n)
    rev = np.zeros(n, dtype=np.int64)
    for b in range(bits):
        rev |= ((idx >> b) & 1) << (bits - 1 - b)
    return rev


@lru_cache(maxsize=None)
def _twiddles(half: int, sign: int) -> np.ndarray:
    return np.exp(sign * 2j * np.pi * np.arange(half) / (2 * half))


def fft_last_axis(x: np.ndarray, inverse: bool = False) -> np.ndarray:
    """Iterative decimation-in-time FFT along the last axis (unnormalised)."""
    n = x.shape[-1]
    if not _is_pow2(n):
        raise ValueError(f"FFT size {n} is not a power of two")
    lead = x.shape[:-1]
    ctype = np.complex64 if x.dtype in (np.float32, np.complex64) else np.complex128
    a = np.asarray(x, dtype=ctype)[..., _bitrev(n)]
    sign = 1 if inverse else -1
    m = 1
    while m < n:
        w = _twiddles(m, sign).astype(ctype)
        blocks = a.reshape(*lead, n // (2 * m), 2, m)
        even = blocks[..., 0, :]
        odd = blocks[..., 1, :] * w
        a = np.concatenate([even + odd, even - odd], axis=-1)
        m *= 2
    return a.reshape(*lead, n)


def fft2_array(x: np.ndarray) -> np.ndarray:
    y = fft_last_axis(x)
    return np.swapaxes(fft_last_axis(np.swapaxes(y, -1, -2)), -1, -2)


def ifft2_array(x: np.ndarray) -> np.ndarray:
    y = fft_last_axis(x, inverse=True)
    y = np.swapaxes(fft_last_axis(np.swapaxes(y, -1, -2), inverse=True), -1, -2)
    return y / (x.shape[-1] * x.shape[-2])


@dataclass
class ComplexTensor:
    real: Tensor
    imag: Tensor

    def __post_init__(self):
        if self.real.shape != self.imag.shape:
            raise ValueError(f"real/imag shape mismatch {self.real.shape} vs {self.imag.shape}")

    @classmethod
    def from_array(cls, z: np.ndarray, requires_grad: bool = False, dtype=None) -> "ComplexTensor":
        dtype = dtype or (np.float32 if z.dtype == np.complex64 else np.float64)
        return cls(Tensor(np.ascontiguousarray(z.real, dtype=dtype), requires_grad=requires_grad),
                   Tensor(np.ascontiguousarray(z.imag, dtype=dtype), requires_grad=requires_grad))

    @property
    def shape(self) -> tuple[int, ...]:
        return self.real.shape

    def numpy(self) -> np.ndarray:
        return self.real.data + 1j * self.imag.data


def _transform(z: ComplexTensor, inverse: bool) -> ComplexTensor:
    H, W = z.shape[-2:]
    if not (_is_pow2(H) and _is_pow2(W)):
        raise ValueError(f"FFT needs power-of-two sides, got {(H, W)}")
    dtype = z.real.dtype
    fwd = ifft2_array if inverse else fft2_array
    # adjoint: conj(F) = N * ifft2 for the forward transform, F / N for the inverse
    if inverse:
        def adj(g):
            return fft2_array(g) / (H * W)
    else:
        def adj(g):
            return ifft2_array(g) * (H * W)

    y = fwd(z.real.data + 1j * z.imag.data.astype(dtype))
    parents = (z.real, z.imag)

    def bw_real(g):
        a = adj(g)
        return a.real.astype(dtype), a.imag.astype(dtype)

    def bw_imag(g):
        a = adj(1j * g)
        return a.real.astype(dtype), a.imag.astype(dtype)

    name = "ifft2" if inverse else "fft2"
    re = Tensor._result(np.ascontiguousarray(y.real, dtype=dtype), parents, bw_real, name + ".re")
    im = Tensor._result(np.ascontiguousarray(y.imag, dtype=dtype), parents, bw_imag, name + ".im")
    return ComplexTensor(re, im)


def fft2(z: ComplexTensor) -> ComplexTensor:
    return _transform(z, inverse=False)


def ifft2(z: ComplexTensor) -> ComplexTensor:
    return _transform(z, inverse=True)
