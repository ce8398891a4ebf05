"""Mixed-radix FFT and differentiable 2-D transforms.

The transform core is a recursive decimation-in-time Cooley-Tukey over the
prime factorisation of the length, vectorised over all leading axes. Prime
lengths fall back to a direct DFT matrix product, which is cheap at the
sizes this package uses.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .tensor import DimensionError, Tensor


def _smallest_factor(n: int) -> int:
    if n % 2 == 0:
        return 2
    f = 3
    while f * f <= n:
        if n % f == 0:
            return f
        f += 2
    return n


@lru_cache(maxsize=None)
def _dft_matrix(p: int) -> np.ndarray:
    k = np.arange(p)
    return np.exp(-2j * np.pi * np.outer(k, k) / p)


@lru_cache(maxsize=None)
def _twiddles(p: int, m: int) -> np.ndarray:
    n = p * m
    return np.exp(-2j * np.pi * np.outer(np.arange(p), np.arange(m)) / n)


def _fft_last(x: np.ndarray) -> np.ndarray:
    n = x.shape[-1]
    if n == 1:
        return x.astype(np.complex128, copy=True)
    p = _smallest_factor(n)
    if p == n:
        return x @ _dft_matrix(n).T
    m = n // p
    # sub-sequence r holds x[p*k + r]
    sub = np.swapaxes(x.reshape(*x.shape[:-1], m, p), -1, -2)
    sub = _fft_last(np.ascontiguousarray(sub)) * _twiddles(p, m)
    # X[q*m + s] = sum_r W_p^{rq} sub[r, s]
    out = np.einsum("qr,...rs->...qs", _dft_matrix(p), sub)
    return out.reshape(*x.shape[:-1], n)


def fft(x: np.ndarray, axis: int = -1, inverse: bool = False) -> np.ndarray:
    """Unnormalised forward DFT along ``axis``; ``inverse`` applies 1/n."""
    x = np.moveaxis(np.asarray(x), axis, -1)
    if inverse:
        n = x.shape[-1]
        out = np.conj(_fft_last(np.conj(x))) / n
    else:
        out = _fft_last(x)
    return np.moveaxis(out, -1, axis)


def fft2_array(x: np.ndarray) -> np.ndarray:
    return fft(fft(x, -1), -2)


def ifft2_array(x: np.ndarray) -> np.ndarray:
    return fft(fft(x, -1, inverse=True), -2, inverse=True)


@dataclass
class ComplexTensor:
    """A complex value held as two real tensors of equal shape."""

    real: Tensor
    imag: Tensor

    def __post_init__(self):
        if self.real.shape != self.imag.shape:
            raise DimensionError(f"real {self.real.shape} and imag {self.imag.shape} differ")

    @property
    def shape(self) -> tuple:
        return self.real.shape

    def numpy(self) -> np.ndarray:
        return self.real.data + 1j * self.imag.data


def _complex_op(re: Tensor, im: Tensor | None, forward, adjoint) -> ComplexTensor:
    z = re.data if im is None else re.data + 1j * im.data
    y = forward(z)
    out = np.stack([y.real, y.imag]).astype(re.dtype, copy=False)
    parents = (re,) if im is None else (re, im)

    def backward(g):
        gz = adjoint(g[0] + 1j * g[1])
        gre = gz.real.astype(re.dtype, copy=False)
        if im is None:
            return (gre,)
        return gre, gz.imag.astype(re.dtype, copy=False)

    stacked = Tensor._make(out, parents, backward)
    return ComplexTensor(stacked[0], stacked[1])


def fft2(x) -> ComplexTensor:
    """2-D FFT over the last two axes of a real :class:`Tensor` or a :class:`ComplexTensor`."""
    if isinstance(x, ComplexTensor):
        re, im = x.real, x.imag
    else:
        re, im = x, None
    hw = re.shape[-2] * re.shape[-1]
    # adjoint of F is conj(F) = n * ifft
    return _complex_op(re, im, fft2_array, lambda g: ifft2_array(g) * hw)


def ifft2(z: ComplexTensor, real: bool = True):
    """Inverse 2-D FFT (scaled by 1/(H*W)); returns the real part unless ``real`` is False."""
    hw = z.shape[-2] * z.shape[-1]
    out = _complex_op(z.real, z.imag, ifft2_array, lambda g: fft2_array(g) / hw)
    return out.real if real else out
