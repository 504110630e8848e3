"""PSNR and SSIM on the luma channel."""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass

import numpy as np

from .tensor import DimensionError

# sentinel returned by psnr for identical inputs
IDENTICAL = math.inf


@dataclass(frozen=True)
class MetricConfig:
    shave: int = 0
    window: int = 11
    sigma: float = 1.5
    k1: float = 0.01
    k2: float = 0.03
    data_range: float = 255.0


def rgb_to_y(img) -> np.ndarray:
    """BT.601 studio-range luma on the 0-255 scale, for RGB in [0, 1]."""
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 4:
        if img.shape[0] != 1:
            raise DimensionError("rgb_to_y takes a single image")
        img = img[0]
    if img.ndim != 3 or img.shape[0] != 3:
        raise DimensionError(f"expected 3 x h x w RGB, got shape {img.shape}")
    r, g, b = img
    return 16.0 + 65.481 * r + 128.553 * g + 24.966 * b


def shave(y: np.ndarray, s: int) -> np.ndarray:
    y = np.asarray(y, dtype=np.float64)
    if s < 0 or 2 * s >= min(y.shape[-2:]):
        raise DimensionError(f"shave {s} must be below half of the smaller dimension of {y.shape[-2:]}")
    return y[..., s : y.shape[-2] - s, s : y.shape[-1] - s] if s else y


def _pair(a, b, cfg: MetricConfig):
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionError(f"shape mismatch: {a.shape} vs {b.shape}")
    return shave(a, cfg.shave), shave(b, cfg.shave)


def psnr(a, b, cfg: MetricConfig = MetricConfig()) -> float:
    a, b = _pair(a, b, cfg)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return IDENTICAL
    return 10.0 * math.log10(cfg.data_range**2 / mse)


def gaussian_window(size: int, sigma: float) -> np.ndarray:
    r = np.arange(size, dtype=np.float64) - (size - 1) / 2
    g = np.exp(-(r**2) / (2 * sigma * sigma))
    g /= g.sum()
    return np.outer(g, g)


def _filter_valid(x: np.ndarray, win: np.ndarray) -> np.ndarray:
    k = win.shape[0]
    windows = np.lib.stride_tricks.sliding_window_view(x, (k, k))
    return np.einsum("ijkl,kl->ij", windows, win)


def ssim_map(a, b, cfg: MetricConfig = MetricConfig()) -> np.ndarray:
    a, b = _pair(a, b, cfg)
    if a.ndim != 2:
        raise DimensionError("ssim expects single-channel 2-D luma")
    if min(a.shape) < cfg.window:
        raise DimensionError(f"ssim needs at least {cfg.window}x{cfg.window} after shaving, got {a.shape}")
    win = gaussian_window(cfg.window, cfg.sigma)
    c1 = (cfg.k1 * cfg.data_range) ** 2
    c2 = (cfg.k2 * cfg.data_range) ** 2
    mu_a, mu_b = _filter_valid(a, win), _filter_valid(b, win)
    saa = _filter_valid(a * a, win) - mu_a**2
    sbb = _filter_valid(b * b, win) - mu_b**2
    sab = _filter_valid(a * b, win) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * sab + c2)
    den = (mu_a**2 + mu_b**2 + c1) * (saa + sbb + c2)
    return num / den


def ssim(a, b, cfg: MetricConfig = MetricConfig()) -> float:
    # identical inputs give a map of exact ones: numerator and denominator
    # are evaluated with the same rounding
    return float(np.mean(ssim_map(a, b, cfg)))


def evaluate_pair(hr_rgb, sr_rgb, shave_px: int) -> tuple[float, float]:
    cfg = MetricConfig(shave=shave_px)
    ya, yb = rgb_to_y(hr_rgb), rgb_to_y(sr_rgb)
    return psnr(ya, yb, cfg), ssim(ya, yb, cfg)


def results_csv(rows) -> str:
    """CSV text with columns file, psnr_db, ssim; rows sorted by file name."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["file", "psnr_db", "ssim"])
    for name, p, s in sorted(rows, key=lambda r: r[0]):
        w.writerow([name, "inf" if p == IDENTICAL else f"{p:.4f}", f"{s:.6f}"])
    return buf.getvalue()
