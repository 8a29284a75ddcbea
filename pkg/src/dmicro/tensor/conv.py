"""Convolution and pooling operators (NCHW).

``conv2d`` is a cross-correlation with zero padding. Internally the padded
batch is laid out channels-last and flattened to ``(B*Hp*Wp, C)``; shifting
the row offset by ``i*Wp + j`` moves every window by tap ``(i, j)`` at once,
so each tap is one GEMM on a contiguous block, accumulated in place by BLAS
(``beta=1``). Rows that straddle an image boundary are computed and cropped.
"""

from __future__ import annotations

import numpy as np
from scipy.linalg import blas

from .core import Tensor


def _gemm(dtype):
    return blas.sgemm if dtype == np.float32 else blas.dgemm


def _pad_amount(padding, kh: int, kw: int) -> tuple[int, int]:
    if padding == "same":
        if kh % 2 == 0 or kw % 2 == 0:
            raise ValueError("'same' padding needs odd kernel sides")
        return (kh - 1) // 2, (kw - 1) // 2
    if padding == "valid":
        return 0, 0
    if isinstance(padding, int):
        return padding, padding
    ph, pw = padding
    return int(ph), int(pw)


def _flat_padded(x: np.ndarray, ph: int, pw: int, margin: int) -> np.ndarray:
    B, C, H, W = x.shape
    Hp, Wp = H + 2 * ph, W + 2 * pw
    n = B * Hp * Wp
    xf = np.zeros((n + margin, C), dtype=x.dtype)
    xf[:n].reshape(B, Hp, Wp, C)[:, ph:ph + H, pw:pw + W, :] = x.transpose(0, 2, 3, 1)
    return xf


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor | None = None, padding="same", stride: int = 1) -> Tensor:
    """2-D cross-correlation of ``x[B,C,H,W]`` with ``kernel[O,C,kh,kw]``."""
    if x.ndim != 4 or kernel.ndim != 4:
        raise ValueError("conv2d expects 4-d input and kernel")
    B, C, H, W = x.shape
    O, Ck, kh, kw = kernel.shape
    if C != Ck:
        raise ValueError(f"conv2d: input has {C} channels, kernel expects {Ck}")
    if stride < 1:
        raise ValueError("conv2d: stride must be >= 1")
    if x.dtype not in (np.float32, np.float64):
        raise TypeError(f"conv2d: unsupported dtype {x.dtype}")
    ph, pw = _pad_amount(padding, kh, kw)
    Hp, Wp = H + 2 * ph, W + 2 * pw
    if kh > Hp or kw > Wp:
        raise ValueError("conv2d: kernel larger than padded input")
    Ho, Wo = Hp - kh + 1, Wp - kw + 1
    n = B * Hp * Wp
    margin = (kh - 1) * Wp + (kw - 1)
    dt = x.dtype
    gemm = _gemm(dt)

    xf = _flat_padded(x.data, ph, pw, margin)
    taps = np.ascontiguousarray(kernel.data.transpose(2, 3, 1, 0), dtype=dt)  # kh, kw, C, O
    acc = np.zeros((n, O), dtype=dt)
    for i in range(kh):
        for j in range(kw):
            off = i * Wp + j
            # acc[n,O] += xf[off:off+n] @ taps[i,j], in column-major terms
            gemm(1.0, taps[i, j].T, xf[off:off + n].T, beta=1.0, c=acc.T, overwrite_c=1)
    full = acc.reshape(B, Hp, Wp, O)[:, :Ho, :Wo]
    if stride > 1:
        full = full[:, ::stride, ::stride]
    out = np.ascontiguousarray(full.transpose(0, 3, 1, 2))
    if bias is not None:
        out += bias.data.reshape(1, O, 1, 1)

    def bw(g):
        gf = np.zeros((n, O), dtype=dt)
        view = gf.reshape(B, Hp, Wp, O)[:, :Ho, :Wo]
        if stride > 1:
            view[:, ::stride, ::stride] = g.transpose(0, 2, 3, 1)
        else:
            view[...] = g.transpose(0, 2, 3, 1)
        gx = gk = gb = None
        if kernel.requires_grad:
            gtaps = np.empty((kh, kw, C, O), dtype=dt)
            for i in range(kh):
                for j in range(kw):
                    off = i * Wp + j
                    gtaps[i, j] = gemm(1.0, gf.T, xf[off:off + n].T, trans_b=1).T
            gk = np.ascontiguousarray(gtaps.transpose(3, 2, 0, 1))
        if x.requires_grad:
            gxf = np.zeros_like(xf)
            for i in range(kh):
                for j in range(kw):
                    off = i * Wp + j
                    gemm(1.0, taps[i, j].T, gf.T, beta=1.0, c=gxf[off:off + n].T, trans_a=1, overwrite_c=1)
            gx = np.ascontiguousarray(
                gxf[:n].reshape(B, Hp, Wp, C)[:, ph:ph + H, pw:pw + W, :].transpose(0, 3, 1, 2))
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        return gx, gk, gb

    parents = (x, kernel) if bias is None else (x, kernel, bias)
    return Tensor._result(out, parents, bw, "conv2d")


def transpose_conv2d(x: Tensor, kernel: Tensor, stride: int, bias: Tensor | None = None) -> Tensor:
    """Adjoint of a strided, unpadded ``conv2d``.

    ``kernel`` is laid out ``[C_in, O, kh, kw]``; the output side is
    ``(H - 1) * stride + kh``, i.e. ``H * stride`` when the kernel side equals
    the stride.
    """
    if not isinstance(stride, (int, np.integer)) or stride < 1:
        raise ValueError(f"transpose_conv2d: invalid stride {stride!r}")
    B, C, H, W = x.shape
    Ck, O, kh, kw = kernel.shape
    if C != Ck:
        raise ValueError(f"transpose_conv2d: input has {C} channels, kernel expects {Ck}")
    Ho, Wo = (H - 1) * stride + kh, (W - 1) * stride + kw
    out = np.zeros((B, O, Ho, Wo), dtype=x.dtype)
    hs, ws = (H - 1) * stride + 1, (W - 1) * stride + 1
    xt = np.ascontiguousarray(x.data.transpose(0, 2, 3, 1))  # B,H,W,C
    for i in range(kh):
        for j in range(kw):
            out[:, :, i:i + hs:stride, j:j + ws:stride] += (xt @ kernel.data[:, :, i, j]).transpose(0, 3, 1, 2)
    if bias is not None:
        out += bias.data.reshape(1, O, 1, 1)

    def bw(g):
        gx = gk = gb = None
        if x.requires_grad:
            gxt = np.zeros((B, H, W, C), dtype=g.dtype)
        if kernel.requires_grad:
            gk = np.zeros_like(kernel.data)
        for i in range(kh):
            for j in range(kw):
                gs = np.ascontiguousarray(g[:, :, i:i + hs:stride, j:j + ws:stride].transpose(0, 2, 3, 1))  # B,H,W,O
                if x.requires_grad:
                    gxt += gs @ kernel.data[:, :, i, j].T
                if kernel.requires_grad:
                    gk[:, :, i, j] = xt.reshape(-1, C).T @ gs.reshape(-1, O)
        if x.requires_grad:
            gx = np.ascontiguousarray(gxt.transpose(0, 3, 1, 2))
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        return gx, gk, gb

    parents = (x, kernel) if bias is None else (x, kernel, bias)
    return Tensor._result(out, parents, bw, "transpose_conv2d")


def _windows(a: np.ndarray, n: int) -> np.ndarray:
    *lead, H, W = a.shape
    return a.reshape(*lead, H // n, n, W // n, n)


def pool2d(kind: str, x: Tensor, n: int) -> Tensor:
    """Non-overlapping ``n x n`` pooling over the last two axes.

    ``kind`` is ``"avg"``, ``"sum"`` or ``"max"``. Sum pooling is average
    pooling scaled by ``n**2``. Max pooling routes the gradient to the first
    maximum in row-major window order.
    """
    if x.ndim < 2:
        raise ValueError("pool2d needs at least 2 dims")
    H, W = x.shape[-2:]
    if n < 1 or H % n or W % n:
        raise ValueError(f"pool2d: spatial dims {(H, W)} not divisible by window {n}")
    if kind == "avg":
        out = _windows(x.data, n).mean(axis=(-3, -1), dtype=x.dtype)
        inv = 1.0 / (n * n)

        def bw(g):
            up = np.repeat(np.repeat(g, n, axis=-2), n, axis=-1)
            return (up * np.asarray(inv, dtype=g.dtype),)

        return Tensor._result(out, (x,), bw, "avgpool")
    if kind == "sum":
        from .ops import scale
        return scale(pool2d("avg", x, n), float(n * n))
    if kind == "max":
        w = _windows(x.data, n)
        *lead, Hn, _, Wn, _ = w.shape
        flat = np.moveaxis(w, -3, -2).reshape(*lead, Hn, Wn, n * n)
        idx = flat.argmax(axis=-1)
        out = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]

        def bw(g):
            gflat = np.zeros(flat.shape, dtype=g.dtype)
            np.put_along_axis(gflat, idx[..., None], g[..., None], axis=-1)
            gw = np.moveaxis(gflat.reshape(*lead, Hn, Wn, n, n), -2, -3)
            return (gw.reshape(x.shape),)

        return Tensor._result(out, (x,), bw, "maxpool")
    raise ValueError(f"unknown pool kind {kind!r}")
