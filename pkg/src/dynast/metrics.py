"""Image comparison metrics on unit-range arrays: L1, PSNR, SSIM."""

from __future__ import annotations

import numpy as np

PSNR_CAP_DB = 99.0
_SSIM_C1 = 0.01**2
_SSIM_C2 = 0.03**2


def _as_chw(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 2:
        return img[None]
    if img.ndim == 3:
        return img
    raise ValueError(f"expected [H, W] or [C, H, W], got shape {img.shape}")


def l1(a: np.ndarray, b: np.ndarray) -> float:
    a, b = _as_chw(a), _as_chw(b)
    return float(np.mean(np.abs(a - b)))


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    a, b = _as_chw(a), _as_chw(b)
    mse = float(np.mean((a - b) ** 2))
    if mse <= 0.0:
        return PSNR_CAP_DB
    return float(min(10.0 * np.log10(1.0 / mse), PSNR_CAP_DB))


def _window_means(x: np.ndarray, win: int) -> np.ndarray:
    view = np.lib.stride_tricks.sliding_window_view(x, (win, win))
    return view.mean(axis=(-2, -1))


def ssim(a: np.ndarray, b: np.ndarray, window: int = 7) -> float:
    """Uniform-window SSIM over full interior windows, averaged over channels."""
    a, b = _as_chw(a), _as_chw(b)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    if a.shape[1] < window or a.shape[2] < window:
        raise ValueError(f"image {a.shape} smaller than {window}x{window} window")
    vals = []
    for ca, cb in zip(a, b):
        mu_a = _window_means(ca, window)
        mu_b = _window_means(cb, window)
        var_a = _window_means(ca * ca, window) - mu_a**2
        var_b = _window_means(cb * cb, window) - mu_b**2
        cov = _window_means(ca * cb, window) - mu_a * mu_b
        num = (2 * mu_a * mu_b + _SSIM_C1) * (2 * cov + _SSIM_C2)
        den = (mu_a**2 + mu_b**2 + _SSIM_C1) * (var_a + var_b + _SSIM_C2)
        vals.append(np.mean(num / den))
    return float(np.mean(vals))


def ssim_map(a: np.ndarray, b: np.ndarray, window: int = 7) -> np.ndarray:
    """Per-window SSIM of the channel-mean images (for inspection)."""
    a, b = _as_chw(a).mean(axis=0), _as_chw(b).mean(axis=0)
    mu_a = _window_means(a, window)
    mu_b = _window_means(b, window)
    var_a = _window_means(a * a, window) - mu_a**2
    var_b = _window_means(b * b, window) - mu_b**2
    cov = _window_means(a * b, window) - mu_a * mu_b
    num = (2 * mu_a * mu_b + _SSIM_C1) * (2 * cov + _SSIM_C2)
    den = (mu_a**2 + mu_b**2 + _SSIM_C1) * (var_a + var_b + _SSIM_C2)
    return num / den


def compare(a: np.ndarray, b: np.ndarray) -> tuple[float, float, float]:
    return l1(a, b), psnr(a, b), ssim(a, b)
