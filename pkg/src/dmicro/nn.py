"""Minimal module system and layers on top of the tensor core."""

from __future__ import annotations

from typing import Iterator

import numpy as np

from .tensor import Tensor, conv2d, relu, sigmoid


class Module:
    """Parameter container.

    Attributes holding a :class:`Tensor` with ``requires_grad`` are
    parameters, attributes holding a :class:`Module` are children and names
    listed in ``_buffer_names`` are non-trainable state (e.g. running
    statistics). Names are dotted attribute paths in definition order.
    """

    _buffer_names: tuple[str, ...] = ()

    def __init__(self):
        self.training = True

    def children(self) -> Iterator[tuple[str, "Module"]]:
        for name, val in vars(self).items():
            if isinstance(val, Module):
                yield name, val

    def named_parameters(self, prefix: str = "") -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for name, val in vars(self).items():
            if isinstance(val, Tensor) and val.requires_grad:
                out[prefix + name] = val
            elif isinstance(val, Module):
                out.update(val.named_parameters(prefix + name + "."))
        return out

    def named_buffers(self, prefix: str = "") -> dict[str, np.ndarray]:
        out = {prefix + name: getattr(self, name) for name in self._buffer_names}
        for name, child in self.children():
            out.update(child.named_buffers(prefix + name + "."))
        return out

    def parameters(self) -> list[Tensor]:
        return list(self.named_parameters().values())

    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.parameters()))

    def train(self, mode: bool = True) -> "Module":
        self.training = mode
        for _, child in self.children():
            child.train(mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def state_dict(self, prefix: str = "") -> dict[str, np.ndarray]:
        state = {k: v.data for k, v in self.named_parameters(prefix).items()}
        state.update(self.named_buffers(prefix))
        return state

    def load_state_dict(self, state: dict[str, np.ndarray], prefix: str = "", strict: bool = True) -> None:
        params = self.named_parameters(prefix)
        for key, p in params.items():
            if key not in state:
                if strict:
                    raise KeyError(f"missing parameter {key}")
                continue
            if state[key].shape != p.shape:
                raise ValueError(f"{key}: shape {state[key].shape} != {p.shape}")
            p.data[...] = state[key]
        self._load_buffers(state, prefix, strict)

    def _load_buffers(self, state, prefix, strict):
        for name in self._buffer_names:
            key = prefix + name
            if key in state:
                getattr(self, name)[...] = state[key]
            elif strict:
                raise KeyError(f"missing buffer {key}")
        for name, child in self.children():
            child._load_buffers(state, prefix + name + ".", strict)

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError


def he_normal(rng: np.random.Generator, shape, fan_in: int, dtype) -> np.ndarray:
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)


class Conv2d(Module):
    def __init__(self, cin: int, cout: int, k: int = 3, rng=None, dtype=np.float32, bias: bool = True):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.kernel = Tensor(he_normal(rng, (cout, cin, k, k), cin * k * k, dtype), requires_grad=True)
        self.bias = Tensor(np.zeros(cout, dtype=dtype), requires_grad=True) if bias else None

    @property
    def in_channels(self) -> int:
        return self.kernel.shape[1]

    def forward(self, x: Tensor) -> Tensor:
        return conv2d(x, self.kernel, self.bias, padding="same")


def batch_norm(x: Tensor, weight: Tensor, bias: Tensor, running_mean: np.ndarray, running_var: np.ndarray,
               training: bool, momentum: float = 0.1, eps: float = 1e-5) -> Tensor:
    """Per-channel batch normalisation over (B, H, W) of an NCHW tensor.

    Training mode normalises with the biased batch variance and updates the
    running estimates in place (unbiased variance); eval mode uses them.
    """
    B, C, H, W = x.shape
    shape = (1, C, 1, 1)
    if training:
        count = B * H * W
        mu = x.data.mean(axis=(0, 2, 3), dtype=x.dtype)
        xc = x.data - mu.reshape(shape)
        var = (xc * xc).mean(axis=(0, 2, 3), dtype=x.dtype)
        running_mean *= 1 - momentum
        running_mean += momentum * mu
        running_var *= 1 - momentum
        running_var += momentum * var * (count / max(count - 1, 1))
    else:
        mu, var = running_mean, running_var
        xc = x.data - mu.reshape(shape)
    inv = (1.0 / np.sqrt(var + eps)).astype(x.dtype)
    xhat = xc * inv.reshape(shape)
    out = xhat * weight.data.reshape(shape) + bias.data.reshape(shape)

    def bw(g):
        gw = (g * xhat).sum(axis=(0, 2, 3)) if weight.requires_grad else None
        gb = g.sum(axis=(0, 2, 3)) if bias.requires_grad else None
        gx = None
        if x.requires_grad:
            gxhat = g * weight.data.reshape(shape)
            if training:
                m1 = gxhat.mean(axis=(0, 2, 3), keepdims=True)
                m2 = (gxhat * xhat).mean(axis=(0, 2, 3), keepdims=True)
                gx = (gxhat - m1 - xhat * m2) * inv.reshape(shape)
            else:
                gx = gxhat * inv.reshape(shape)
        return gx, gw, gb

    return Tensor._result(out, (x, weight, bias), bw, "batch_norm")


class BatchNorm2d(Module):
    _buffer_names = ("running_mean", "running_var")

    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5, dtype=np.float32):
        super().__init__()
        self.weight = Tensor(np.ones(channels, dtype=dtype), requires_grad=True)
        self.bias = Tensor(np.zeros(channels, dtype=dtype), requires_grad=True)
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)
        self.momentum = momentum
        self.eps = eps

    def forward(self, x: Tensor) -> Tensor:
        return batch_norm(x, self.weight, self.bias, self.running_mean, self.running_var,
                          self.training, self.momentum, self.eps)


class ConvReluBN(Module):
    def __init__(self, cin: int, cout: int, rng=None, dtype=np.float32):
        super().__init__()
        self.conv = Conv2d(cin, cout, 3, rng=rng, dtype=dtype)
        self.bn = BatchNorm2d(cout, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        return self.bn(relu(self.conv(x)))


class ConvSigmoid(Module):
    def __init__(self, cin: int, cout: int, k: int = 3, rng=None, dtype=np.float32):
        super().__init__()
        self.conv = Conv2d(cin, cout, k, rng=rng, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        return sigmoid(self.conv(x))


class ConvRelu(Module):
    def __init__(self, cin: int, cout: int, rng=None, dtype=np.float32):
        super().__init__()
        self.conv = Conv2d(cin, cout, 3, rng=rng, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        return relu(self.conv(x))
