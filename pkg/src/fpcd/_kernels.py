"""Hot inner loops, each with a numba and a pure-numpy implementation.

The backend is picked once at import from ``FPCD_NUMBA`` (``0`` forces
numpy) and can be switched at runtime with :func:`set_backend`, which the
benchmark and the equivalence tests use.  im2col is a pure copy and is
bit-identical across backends; col2im and the FFT agree to rounding.
"""

import os

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

try:
    from numba import njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover
    HAVE_NUMBA = False

_BACKEND = "numpy"


def set_backend(name):
    global _BACKEND
    if name not in ("numba", "numpy"):
        raise ValueError(f"unknown backend {name!r}")
    if name == "numba" and not HAVE_NUMBA:
        raise RuntimeError("numba is not installed")
    _BACKEND = name


def get_backend():
    return _BACKEND


if HAVE_NUMBA and os.environ.get("FPCD_NUMBA", "1") != "0":
    _BACKEND = "numba"


# ---------------------------------------------------------------------------
# im2col / col2im for NHWC convolution.  Column order is (ki, kj, cin) so the
# kernel [k, k, Cin, Cout] reshapes directly to [k*k*Cin, Cout].


def _im2col_numpy(xp, k, stride, ho, wo):
    n, hp, wp, c = xp.shape
    # each (row, ox) window of k*c values is contiguous in a flattened row
    rows = np.ascontiguousarray(xp).reshape(n, hp, wp * c)
    win = sliding_window_view(rows, k * c, axis=2)[:, :, ::c * stride][:, :, :wo]
    cols = np.empty((n, ho, wo, k, k * c), dtype=xp.dtype)
    for i in range(k):
        cols[:, :, :, i, :] = win[:, i:i + stride * ho:stride]
    return cols.reshape(n, ho, wo, k * k * c)


def _col2im_numpy(dcols, hp, wp, k, stride):
    n, ho, wo, kkc = dcols.shape
    c = kkc // (k * k)
    d = dcols.reshape(n, ho, wo, k, k, c)
    dxp = np.zeros((n, hp, wp, c), dtype=dcols.dtype)
    for i in range(k):
        for j in range(k):
            dxp[:, i:i + stride * ho:stride, j:j + stride * wo:stride, :] += d[:, :, :, i, j, :]
    return dxp


if HAVE_NUMBA:

    @njit(cache=True, nogil=True)
    def _im2col_nb(xp, k, stride, ho, wo):
        n, hp, wp, c = xp.shape
        rows = xp.reshape(n, hp, wp * c)
        kc = k * c
        cols = np.empty((n, ho, wo, k * kc), dtype=xp.dtype)
        for b in range(n):
            for oy in range(ho):
                for ox in range(wo):
                    x0 = ox * stride * c
                    dst = cols[b, oy, ox]
                    for i in range(k):
                        src = rows[b, oy * stride + i]
                        off = i * kc
                        for q in range(kc):
                            dst[off + q] = src[x0 + q]
        return cols

    @njit(cache=True, nogil=True)
    def _col2im_nb(dcols, hp, wp, k, stride):
        n, ho, wo, kkc = dcols.shape
        c = kkc // (k * k)
        kc = k * c
        out = np.zeros((n, hp, wp * c), dtype=dcols.dtype)
        for i in range(k):
            off = i * kc
            for b in range(n):
                for oy in range(ho):
                    dst = out[b, oy * stride + i]
                    for ox in range(wo):
                        x0 = ox * stride * c
                        src = dcols[b, oy, ox]
                        for q in range(kc):
                            dst[x0 + q] += src[off + q]
        return out.reshape(n, hp, wp, c)


def im2col(xp, k, stride, ho, wo):
    if _BACKEND == "numba":
        return _im2col_nb(np.ascontiguousarray(xp), k, stride, ho, wo)
    return _im2col_numpy(xp, k, stride, ho, wo)


def col2im(dcols, hp, wp, k, stride):
    if _BACKEND == "numba":
        return _col2im_nb(np.ascontiguousarray(dcols), hp, wp, k, stride)
    return _col2im_numpy(dcols, hp, wp, k, stride)


# ---------------------------------------------------------------------------
# Radix-2 FFT along axis 0 of a [T, M] real or complex block.


def _bit_reverse_perm(n):
    bits = n.bit_length() - 1
    idx = np.arange(n)
    rev = np.zeros(n, dtype=np.int64)
    for b in range(bits):
        rev |= ((idx >> b) & 1) << (bits - 1 - b)
    return rev


def _fft_numpy(x):
    n = x.shape[0]
    a = x[_bit_reverse_perm(n)].astype(np.complex128)
    size = 2
    while size <= n:
        half = size // 2
        tw = np.exp(-2j * np.pi * np.arange(half) / size)[:, None]
        a = a.reshape(n // size, size, -1)
        even = a[:, :half, :].copy()
        odd = a[:, half:, :] * tw
        a[:, :half, :] = even + odd
        a[:, half:, :] = even - odd
        a = a.reshape(n, -1)
        size *= 2
    return a


if HAVE_NUMBA:

    @njit(cache=True, nogil=True)
    def _fft_nb(x, perm):
        n, m = x.shape
        a = np.empty((n, m), dtype=np.complex128)
        for t in range(n):
            for col in range(m):
                a[t, col] = x[perm[t], col]
        size = 2
        while size <= n:
            half = size // 2
            for start in range(0, n, size):
                for p in range(half):
                    ang = -2.0 * np.pi * p / size
                    w = complex(np.cos(ang), np.sin(ang))
                    lo = start + p
                    hi = lo + half
                    for col in range(m):
                        e = a[lo, col]
                        o = a[hi, col] * w
                        a[lo, col] = e + o
                        a[hi, col] = e - o
            size *= 2
        return a


def fft_radix2(x):
    """FFT of ``x`` ([T, M]) along axis 0; T must be a power of two."""
    n = x.shape[0]
    if n < 1 or n & (n - 1):
        raise ValueError(f"radix-2 FFT needs a power-of-two length, got {n}")
    if _BACKEND == "numba":
        return _fft_nb(np.ascontiguousarray(x, dtype=np.complex128), _bit_reverse_perm(n))
    return _fft_numpy(x)
