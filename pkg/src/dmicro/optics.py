"""Differentiable forward model of the patterned-excitation microscope.

Pipeline for one specimen ``X`` (values in [0, 1]) and ``T`` excitation
patterns ``H``::

    alpha_t = emPSF * ((exPSF * H_t) . X)          encode
    down_t  = sumpool_n(alpha_t)                   demagnify
    y_t     = detect_normalized(down_t / n**2)     detector, normalised units

Photon counts never appear explicitly. A fully-on pattern pixel delivers
``k`` photons, so a detector pixel (``n*n`` specimen pixels) has a budget of
``k * n**2`` photons; dividing the pooled field by ``n**2`` keeps it in
[0, 1] and the detector then runs with photon scale ``k * n**2``. Its output
times that scale has exactly the Poisson(+background) and read-noise
statistics of the unnormalised model.
"""

from __future__ import annotations

import dataclasses
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .tensor import (
    ComplexTensor,
    Tensor,
    clamp_min,
    conv2d,
    custom_sigmoid,
    expand,
    ifft2,
    pool2d,
    reparam_normal,
    reshape,
    scale,
    sqrt,
)
from .tensor.fft import fft2_array

NORMALIZATION = "pooled field divided by n^2; detector photon scale k*n^2"


@dataclass
class PointSpreadFunction:
    kernel: np.ndarray
    role: str = "emission"

    def __post_init__(self):
        k = np.asarray(self.kernel, dtype=np.float64)
        if k.ndim != 2 or k.shape[0] != k.shape[1] or k.shape[0] % 2 == 0:
            raise ValueError(f"PSF kernel must be odd and square, got shape {k.shape}")
        if np.any(k < 0):
            raise ValueError("PSF kernel values must be non-negative")
        if self.role not in ("excitation", "emission"):
            raise ValueError(f"unknown PSF role {self.role!r}")
        self.kernel = k

    @classmethod
    def impulse(cls, role: str = "emission") -> "PointSpreadFunction":
        return cls(np.ones((1, 1)), role)

    @property
    def is_impulse(self) -> bool:
        k = self.kernel
        c = k.shape[0] // 2
        return k[c, c] == 1 and np.count_nonzero(k) == 1


@dataclass
class ForwardConfig:
    k: float = 10000.0
    sigma_read: float = 0.0
    gamma: float = 10.0
    n: int = 8
    noise_enabled: bool = True
    ex_psf: PointSpreadFunction = field(default_factory=lambda: PointSpreadFunction.impulse("excitation"))
    em_psf: PointSpreadFunction = field(default_factory=lambda: PointSpreadFunction.impulse("emission"))

    def __post_init__(self):
        if not self.k > 0:
            raise ValueError("photon count k must be positive")
        if self.sigma_read < 0 or self.gamma < 0:
            raise ValueError("sigma_read and gamma must be non-negative")
        if self.n < 1 or self.n & (self.n - 1):
            raise ValueError(f"downscale factor n must be a power of two, got {self.n}")

    @property
    def detector_scale(self) -> float:
        """Photon budget of one fully lit detector pixel."""
        return self.k * self.n * self.n


# -- excitation patterns ----------------------------------------------------------

@dataclass
class ExcitationPatternBank:
    """Learnable excitation patterns.

    In the default frequency parameterisation the weights are the complex
    spectrum ``W`` and the pre-activations are ``Re(ifft2(W))``. With
    ``W=None`` the pre-activations ``tau`` are learned directly (ablation).
    """

    W: ComplexTensor | None
    m: float = 1.0
    tau_direct: Tensor | None = None
    threshold: bool = False

    def __post_init__(self):
        if (self.W is None) == (self.tau_direct is None):
            raise ValueError("provide exactly one of W or tau_direct")
        if not self.m > 0:
            raise ValueError("slope m must be positive")
        if self.P & (self.P - 1):
            raise ValueError(f"pattern side {self.P} is not a power of two")

    @property
    def frequency_domain(self) -> bool:
        return self.W is not None

    @property
    def shape(self) -> tuple[int, int, int]:
        return (self.W.real if self.W is not None else self.tau_direct).shape

    @property
    def T(self) -> int:
        return self.shape[0]

    @property
    def P(self) -> int:
        return self.shape[-1]

    def tau(self) -> Tensor:
        if self.W is None:
            return self.tau_direct
        return ifft2(self.W).real

    def parameters(self) -> list[Tensor]:
        if self.W is None:
            return [self.tau_direct]
        return [self.W.real, self.W.imag]

    def named_parameters(self) -> dict[str, Tensor]:
        if self.W is None:
            return {"pattern_bank.tau": self.tau_direct}
        return {"pattern_bank.W_real": self.W.real, "pattern_bank.W_imag": self.W.imag}

    def patterns(self) -> Tensor:
        return generate_patterns(self)


def init_pattern_bank(T: int, P: int, seed: int = 0, dtype=np.float32, frequency_domain: bool = True,
                      rng: np.random.Generator | None = None) -> ExcitationPatternBank:
    """Standard-normal pre-activations, stored through their spectrum."""
    if T < 1:
        raise ValueError("need at least one pattern")
    if P < 1 or P & (P - 1):
        raise ValueError(f"pattern side {P} is not a power of two")
    rng = rng if rng is not None else np.random.default_rng(seed)
    tau0 = rng.standard_normal((T, P, P))
    if not frequency_domain:
        return ExcitationPatternBank(W=None, tau_direct=Tensor(tau0.astype(dtype), requires_grad=True))
    spec = fft2_array(tau0)
    W = ComplexTensor(Tensor(spec.real.astype(dtype), requires_grad=True),
                      Tensor(spec.imag.astype(dtype), requires_grad=True))
    return ExcitationPatternBank(W=W, m=1.0)


def generate_patterns(bank: ExcitationPatternBank) -> Tensor:
    """``H = sigmoid(m * tau)``; hard 0/1 when the bank is in threshold mode."""
    tau = bank.tau()
    if bank.threshold:
        return Tensor((tau.data > 0).astype(tau.dtype))
    return custom_sigmoid(bank.m, tau)


def binarization_gap(H) -> np.ndarray:
    """Distance of each pattern value from the nearest of {0, 1}."""
    h = H.data if isinstance(H, Tensor) else np.asarray(H)
    return np.minimum(h, 1 - h)


# -- optics -----------------------------------------------------------------------

def _psf_conv(img: Tensor, psf: PointSpreadFunction) -> Tensor:
    shape = img.shape
    P = shape[-1]
    flat = reshape(img, (-1, 1, shape[-2], P))
    kern = Tensor(psf.kernel.astype(img.dtype).reshape(1, 1, *psf.kernel.shape))
    return reshape(conv2d(flat, kern, padding="same"), shape)


def encode(X: Tensor, H: Tensor, ex_psf: PointSpreadFunction | None = None,
           em_psf: PointSpreadFunction | None = None) -> Tensor:
    """Pattern-encoded specimen, one image per pattern.

    ``X`` is ``[P,P]``, ``[B,P,P]`` or ``[B,1,P,P]``; ``H`` is ``[T,P,P]``.
    Returns ``[T,P,P]`` for a single specimen and ``[B,T,P,P]`` otherwise.
    """
    if H.ndim != 3:
        raise ValueError(f"patterns must be [T,P,P], got {H.shape}")
    T, P, Q = H.shape
    if X.shape[-2:] != (P, Q):
        raise ValueError(f"specimen {X.shape} does not match patterns {H.shape}")
    single = X.ndim == 2
    if X.ndim == 2:
        X = reshape(X, (1, 1, P, Q))
    elif X.ndim == 3:
        X = reshape(X, (X.shape[0], 1, P, Q))
    elif X.ndim != 4 or X.shape[1] != 1:
        raise ValueError(f"specimen must be single-channel, got {X.shape}")
    B = X.shape[0]
    if ex_psf is not None and not ex_psf.is_impulse:
        H = _psf_conv(H, ex_psf)
    full = (B, T, P, Q)
    alpha = expand(X, full) * expand(reshape(H, (1, T, P, Q)), full)
    if em_psf is not None and not em_psf.is_impulse:
        alpha = _psf_conv(alpha, em_psf)
    return reshape(alpha, (T, P, Q)) if single else alpha


def demagnify(alpha: Tensor, n: int) -> Tensor:
    """Optical demagnification: ``n x n`` sum pooling (conserves total flux)."""
    return pool2d("sum", alpha, n)


@dataclass
class DetectorDiagnostics:
    clamped: int = 0
    calls: int = 0


def detect_normalized(alpha_norm: Tensor, cfg: ForwardConfig, rng=None, z=None,
                      diagnostics: DetectorDiagnostics | None = None, scale_photons: float | None = None) -> Tensor:
    """Normalised detector: Gaussian-approximated shot noise plus read noise.

    ``y = a + g/k + sqrt(a/k + g/k**2) * z1 + (s/k) * z2`` where ``k`` is the
    photon scale (``cfg.k`` unless ``scale_photons`` overrides it), ``g`` the
    background and ``s`` the read-noise deviation. Negative inputs are clamped
    to zero under the square root and counted in ``diagnostics``. ``z`` may be
    a ``(z1, z2)`` pair of frozen draws.
    """
    k = float(cfg.k if scale_photons is None else scale_photons)
    g = float(cfg.gamma)
    mean = alpha_norm + g / k
    if not cfg.noise_enabled:
        return mean
    neg = int(np.count_nonzero(alpha_norm.data < 0))
    if diagnostics is not None:
        diagnostics.calls += 1
        diagnostics.clamped += neg
    a = clamp_min(alpha_norm, 0.0) if neg else alpha_norm
    std = sqrt(scale(a, 1.0 / k) + g / (k * k))
    z1, z2 = z if z is not None else (None, None)
    y = reparam_normal(mean, std, rng=rng, z=z1)
    if cfg.sigma_read > 0:
        read_std = Tensor(np.full(y.shape, cfg.sigma_read / k, dtype=y.dtype))
        y = reparam_normal(y, read_std, rng=rng, z=z2)
    return y


def forward_pass(X: Tensor, H, cfg: ForwardConfig, rng=None, z=None,
                 diagnostics: DetectorDiagnostics | None = None) -> Tensor:
    """Specimen to normalised detector readings ``[..., T, P/n, P/n]``.

    ``H`` is a pattern tensor or an :class:`ExcitationPatternBank`.
    """
    if isinstance(H, ExcitationPatternBank):
        H = generate_patterns(H)
    if H.shape[-1] % cfg.n:
        raise ValueError(f"pattern side {H.shape[-1]} not divisible by n={cfg.n}")
    alpha = encode(X, H, cfg.ex_psf, cfg.em_psf)
    down = demagnify(alpha, cfg.n)
    alpha_norm = scale(down, 1.0 / (cfg.n * cfg.n))
    return detect_normalized(alpha_norm, cfg, rng=rng, z=z, diagnostics=diagnostics,
                             scale_photons=cfg.detector_scale)


def with_updates(cfg: ForwardConfig, **changes) -> ForwardConfig:
    return dataclasses.replace(cfg, **changes)


# -- export -----------------------------------------------------------------------

def write_pgm16(path, image: np.ndarray, normalize: bool = False) -> None:
    """Binary 16-bit PGM (P5, maxval 65535, big-endian samples).

    Values are clipped to [0, 1] unless ``normalize`` rescales by the range.
    """
    a = np.asarray(image, dtype=np.float64)
    if a.ndim != 2:
        raise ValueError("PGM export needs a 2-d image")
    if normalize:
        lo, hi = a.min(), a.max()
        a = (a - lo) / (hi - lo) if hi > lo else np.zeros_like(a)
    q = np.round(np.clip(a, 0, 1) * 65535).astype(">u2")
    h, w = a.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n65535\n".encode("ascii") + q.tobytes())


def read_pgm16(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    m = re.match(rb"P5\s+(\d+)\s+(\d+)\s+(\d+)\s", raw)
    if m is None:
        raise ValueError("not a binary PGM")
    w, h, maxval = (int(v) for v in m.groups())
    dt = ">u2" if maxval > 255 else "u1"
    data = np.frombuffer(raw[m.end(): m.end() + w * h * np.dtype(dt).itemsize], dtype=dt)
    return data.reshape(h, w).astype(np.float64) / maxval
