"""Image-quality and segmentation metrics, and compression accounting."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


def _pair(a, b) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    return a, b


def mse(a, b) -> float:
    a, b = _pair(a, b)
    return float(np.mean((a - b) ** 2))


def psnr(a, b, peak: float = 1.0) -> float:
    err = mse(a, b)
    return float("inf") if err == 0 else float(10 * np.log10(peak * peak / err))


def _gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2
    g = np.exp(-(x * x) / (2 * sigma * sigma))
    return g / g.sum()


def _filter_valid(img: np.ndarray, g: np.ndarray) -> np.ndarray:
    # separable correlation, 'valid' region only
    k = g.size
    cols = sliding_window_view(img, k, axis=-2) @ g
    return sliding_window_view(cols, k, axis=-1) @ g


def ssim(a, b, data_range: float = 1.0) -> float:
    """Mean SSIM over all valid 11x11 Gaussian (sigma 1.5) windows.

    Uses population moments and ``C1 = (0.01 L)^2``, ``C2 = (0.03 L)^2``.
    Extra leading axes are averaged over.
    """
    a, b = _pair(a, b)
    if a.ndim < 2 or min(a.shape[-2:]) < SSIM_WINDOW:
        raise ValueError(f"image {a.shape} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window")
    g = _gaussian_window()
    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2

    def filt(x):
        return _filter_valid(x, g)

    mu_a, mu_b = filt(a), filt(b)
    va = filt(a * a) - mu_a * mu_a
    vb = filt(b * b) - mu_b * mu_b
    cov = filt(a * b) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (va + vb + c2)
    return float(np.mean(num / den))


def iou(pred, gt) -> float:
    """Intersection over union of two binary masks (1.0 when both are empty)."""
    p, g = _pair(pred, gt)
    for name, m in (("prediction", p), ("ground truth", g)):
        if not np.all((m == 0) | (m == 1)):
            raise ValueError(f"{name} mask is not binary")
    p, g = p.astype(bool), g.astype(bool)
    union = np.count_nonzero(p | g)
    if union == 0:
        return 1.0
    return np.count_nonzero(p & g) / union


def compression(n: int, T: int) -> Fraction:
    """Specimen pixels per detected value: ``n**2 / T``."""
    if n < 1 or T < 1:
        raise ValueError("n and T must be >= 1")
    return Fraction(n * n, T)


@dataclass
class MetricReport:
    n: int
    T: int
    mse: list[float] = field(default_factory=list)
    ssim: list[float] = field(default_factory=list)
    psnr: list[float] = field(default_factory=list)
    iou: list[float] = field(default_factory=list)

    @property
    def compression(self) -> Fraction:
        return compression(self.n, self.T)

    def add(self, recon: np.ndarray, target: np.ndarray, seg_pred=None, seg_gt=None) -> None:
        self.mse.append(mse(recon, target))
        self.ssim.append(ssim(recon, target))
        self.psnr.append(psnr(recon, target))
        if seg_pred is not None:
            self.iou.append(iou(seg_pred, seg_gt))

    def aggregate(self) -> dict[str, float]:
        out = {"mse": float(np.mean(self.mse)), "ssim": float(np.mean(self.ssim)),
               "psnr": float(np.mean(self.psnr))}
        if self.iou:
            out["iou"] = float(np.mean(self.iou))
        return out

    def header_comment(self) -> str:
        return (f"# compression={self.compression} n={self.n} T={self.T} ssim_window={SSIM_WINDOW} "
                f"ssim_sigma={SSIM_SIGMA} C1=({SSIM_K1})^2 C2=({SSIM_K2})^2 psnr_peak=1.0")

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write(self.header_comment() + "\n")
        cols = ["image", "mse", "ssim", "psnr"] + (["iou"] if self.iou else [])
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(cols)
        for i in range(len(self.mse)):
            row = [i, repr(self.mse[i]), repr(self.ssim[i]), repr(self.psnr[i])]
            if self.iou:
                row.append(repr(self.iou[i]))
            w.writerow(row)
        agg = self.aggregate()
        w.writerow(["mean"] + [repr(agg[c]) for c in cols[1:]])
        return buf.getvalue()

    def table(self) -> str:
        agg = self.aggregate()
        lines = [f"compression x{self.compression} (n={self.n}, T={self.T}), {len(self.mse)} images"]
        for key, val in agg.items():
            lines.append(f"  {key:>5}: {val:.6f}")
        return "\n".join(lines)
