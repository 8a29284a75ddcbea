"""Inverse model: upsampling, channel expansion, reconstruction, segmentation."""

from __future__ import annotations

import numpy as np

from .nn import Conv2d, ConvRelu, ConvReluBN, ConvSigmoid, Module
from .tensor import Tensor, transpose_conv2d

DEFAULT_WIDTHS = (32, 32, 16, 16, 8)


def local_project(y: Tensor, W: Tensor) -> Tensor:
    """Per-detector-pixel linear map from ``T`` readings to an ``n x n`` patch.

    ``y`` is ``[B,T,D,D]`` and ``W`` is ``[D,D,T,n*n]``; the result tiles the
    patches into a ``[B,1,D*n,D*n]`` image. Patch ``(i, j)`` depends only on
    ``y[:, :, i, j]`` and ``W[i, j]``.
    """
    B, T, D, D2 = y.shape
    if W.shape[:3] != (D, D2, T):
        raise ValueError(f"upsampler weights {W.shape} do not fit readings {y.shape}")
    nn2 = W.shape[3]
    n = int(round(np.sqrt(nn2)))
    if n * n != nn2:
        raise ValueError("upsampler patch size must be a square")
    yl = np.ascontiguousarray(y.data.transpose(2, 3, 0, 1)).reshape(D * D2, B, T)
    Wl = W.data.reshape(D * D2, T, nn2)
    patches = np.matmul(yl, Wl)  # D*D2, B, n*n
    out = np.ascontiguousarray(
        patches.reshape(D, D2, B, n, n).transpose(2, 0, 3, 1, 4)).reshape(B, 1, D * n, D2 * n)

    def bw(g):
        gp = np.ascontiguousarray(
            g.reshape(B, D, n, D2, n).transpose(1, 3, 0, 2, 4)).reshape(D * D2, B, nn2)
        gy = gW = None
        if y.requires_grad:
            gy = np.ascontiguousarray(
                np.matmul(gp, Wl.transpose(0, 2, 1)).reshape(D, D2, B, T).transpose(2, 3, 0, 1))
        if W.requires_grad:
            gW = np.matmul(yl.transpose(0, 2, 1), gp).reshape(W.shape)
        return gy, gW

    return Tensor._result(out, (y, W), bw, "local_project")


class LocalityAwareUpsampler(Module):
    """One learnable ``T -> n*n`` matrix per detector pixel."""

    def __init__(self, D: int, T: int, n: int, rng=None, dtype=np.float32):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.n = n
        self.W_loc = Tensor((rng.standard_normal((D, D, T, n * n)) * np.sqrt(1.0 / n)).astype(dtype),
                            requires_grad=True)

    def forward(self, y: Tensor) -> Tensor:
        return local_project(y, self.W_loc)


class TransposeUpsampler(Module):
    """Shared ``n x n`` transpose convolution with stride ``n`` (ablation baseline)."""

    def __init__(self, T: int, n: int, out_channels: int = 1, rng=None, dtype=np.float32):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.n = n
        self.kernel = Tensor((rng.standard_normal((T, out_channels, n, n)) * np.sqrt(2.0 / T)).astype(dtype),
                             requires_grad=True)
        self.bias = Tensor(np.zeros(out_channels, dtype=dtype), requires_grad=True)

    def forward(self, y: Tensor) -> Tensor:
        return transpose_conv2d(y, self.kernel, self.n, self.bias)


class ChannelExpansion(Module):
    """Two conv-ReLU blocks lifting the 1-channel upsampled map to ``T`` channels."""

    def __init__(self, T: int, rng=None, dtype=np.float32):
        super().__init__()
        self.block1 = ConvRelu(1, T, rng=rng, dtype=dtype)
        self.block2 = ConvRelu(T, T, rng=rng, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        return self.block2(self.block1(x))


class ReconstructionNet(Module):
    """Five conv-ReLU-BN blocks and a conv-sigmoid output, tapering ``T -> 1``."""

    def __init__(self, T: int, widths=DEFAULT_WIDTHS, rng=None, dtype=np.float32):
        super().__init__()
        chans = [T, *widths]
        if len(widths) != 5:
            raise ValueError("ReconstructionNet needs exactly five hidden widths")
        for i in range(5):
            setattr(self, f"block{i + 1}", ConvReluBN(chans[i], chans[i + 1], rng=rng, dtype=dtype))
        self.block6 = ConvSigmoid(chans[-1], 1, rng=rng, dtype=dtype)
        self.T = T

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[1] != self.T:
            raise ValueError(f"reconstruction net expects {self.T} channels, got {x.shape[1]}")
        for i in range(1, 7):
            x = getattr(self, f"block{i}")(x)
        return x


class SegmentationHead(Module):
    def __init__(self, width: int = 8, rng=None, dtype=np.float32):
        super().__init__()
        self.block1 = ConvRelu(1, width, rng=rng, dtype=dtype)
        self.block2 = ConvRelu(width, width, rng=rng, dtype=dtype)
        self.block3 = ConvRelu(width, width, rng=rng, dtype=dtype)
        self.out = ConvSigmoid(width, 1, k=1, rng=rng, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        return self.out(self.block3(self.block2(self.block1(x))))


class InverseModel(Module):
    """Detector readings ``[B,T,D,D]`` to a reconstruction ``[B,1,P,P]``."""

    def __init__(self, T: int, P: int, n: int, upsampler: str = "locality", widths=DEFAULT_WIDTHS,
                 seed: int = 0, dtype=np.float32, rng=None):
        super().__init__()
        if P % n:
            raise ValueError(f"P={P} not divisible by n={n}")
        rng = rng if rng is not None else np.random.default_rng(seed)
        D = P // n
        if upsampler == "locality":
            self.ups = LocalityAwareUpsampler(D, T, n, rng=rng, dtype=dtype)
        elif upsampler == "transpose":
            self.ups = TransposeUpsampler(T, n, rng=rng, dtype=dtype)
        else:
            raise ValueError(f"unknown upsampler {upsampler!r}")
        self.expand = ChannelExpansion(T, rng=rng, dtype=dtype)
        self.recon = ReconstructionNet(T, widths, rng=rng, dtype=dtype)
        self.T, self.P, self.n = T, P, n
        self.upsampler_kind = upsampler

    def upsample(self, y: Tensor) -> Tensor:
        """Upsampled, channel-expanded features ``[B,T,P,P]``."""
        if y.ndim != 4 or y.shape[1] != self.T or y.shape[2] * self.n != self.P:
            raise ValueError(f"readings {y.shape} do not match T={self.T}, P={self.P}, n={self.n}")
        return self.expand(self.ups(y))

    def forward(self, y: Tensor) -> Tensor:
        return self.recon(self.upsample(y))


def segment(x_recon: Tensor, head: SegmentationHead) -> Tensor:
    return head(x_recon)
