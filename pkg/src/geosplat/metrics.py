"""Image metrics and the L1 + D-SSIM photometric loss, with analytic gradients."""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

PSNR_IDENTICAL = 99.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
C1 = 0.01**2
C2 = 0.03**2


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-0.5 * (x / sigma) ** 2)
    return g / g.sum()


def _as_hwc(img) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    return img[..., None] if img.ndim == 2 else img


def _filter_valid(x: np.ndarray, g: np.ndarray) -> np.ndarray:
    # separable valid-mode correlation over the two spatial axes of (H, W, C)
    y = sliding_window_view(x, len(g), axis=0) @ g
    return sliding_window_view(y, len(g), axis=1) @ g


def _filter_adjoint(y: np.ndarray, g: np.ndarray) -> np.ndarray:
    k = len(g) - 1
    padded = np.pad(y, ((k, k), (k, k), (0, 0)))
    return _filter_valid(padded, g[::-1])


def psnr(a, b) -> float:
    """PSNR in dB for images in [0, 1]; identical images give the 99 dB sentinel."""
    mse = float(np.mean((np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)) ** 2))
    if mse == 0.0:
        return PSNR_IDENTICAL
    return float(10.0 * np.log10(1.0 / mse))


def _ssim_terms(x, y, g):
    mx, my = _filter_valid(x, g), _filter_valid(y, g)
    sxx = _filter_valid(x * x, g) - mx * mx
    syy = _filter_valid(y * y, g) - my * my
    sxy = _filter_valid(x * y, g) - mx * my
    A1, A2 = 2.0 * mx * my + C1, 2.0 * sxy + C2
    B1, B2 = mx * mx + my * my + C1, sxx + syy + C2
    return mx, my, A1, A2, B1, B2, (A1 * A2) / (B1 * B2)


def ssim_map(a, b) -> np.ndarray:
    x, y = _as_hwc(a), _as_hwc(b)
    if x.shape != y.shape:
        raise ValueError(f"image shapes differ: {x.shape} vs {y.shape}")
    if min(x.shape[:2]) < SSIM_WINDOW:
        raise ValueError(f"images must be at least {SSIM_WINDOW} pixels on each side")
    return _ssim_terms(x, y, gaussian_window())[-1]


def ssim(a, b) -> float:
    """Mean 11x11 Gaussian-window SSIM over valid positions and channels."""
    return float(np.mean(ssim_map(a, b)))


def ssim_and_grad(a, b):
    """SSIM and its gradient with respect to the first image."""
    x, y = _as_hwc(a), _as_hwc(b)
    g = gaussian_window()
    mx, my, A1, A2, B1, B2, S = _ssim_terms(x, y, g)
    c = S / S.size
    g_mu = c * (2.0 * my / A1 - 2.0 * mx / B1)
    g_sxx = -c / B2
    g_sxy = 2.0 * c / A2
    grad = (_filter_adjoint(g_mu - 2.0 * mx * g_sxx - my * g_sxy, g)
            + x * _filter_adjoint(2.0 * g_sxx, g) + y * _filter_adjoint(g_sxy, g))
    return float(np.mean(S)), grad.reshape(np.shape(a))


def photometric_loss(rendered, target, lambda_ssim: float = 0.2) -> float:
    """``(1 - lambda) * L1 + lambda * (1 - SSIM)``."""
    r, t = np.asarray(rendered, dtype=np.float64), np.asarray(target, dtype=np.float64)
    l1 = float(np.mean(np.abs(r - t)))
    if lambda_ssim == 0:
        return (1.0 - lambda_ssim) * l1
    return (1.0 - lambda_ssim) * l1 + lambda_ssim * (1.0 - ssim(r, t))


def photometric_loss_and_grad(rendered, target, lambda_ssim: float = 0.2):
    r, t = np.asarray(rendered, dtype=np.float64), np.asarray(target, dtype=np.float64)
    diff = r - t
    l1 = float(np.mean(np.abs(diff)))
    grad = (1.0 - lambda_ssim) * np.sign(diff) / diff.size
    loss = (1.0 - lambda_ssim) * l1
    if lambda_ssim:
        s, gs = ssim_and_grad(r, t)
        loss += lambda_ssim * (1.0 - s)
        grad = grad - lambda_ssim * gs
    return loss, grad


def photometric_loss_map(rendered, target, lambda_ssim: float = 0.2) -> np.ndarray:
    """Per-pixel split of :func:`photometric_loss`; sums to the scalar loss.

    The D-SSIM part of each valid window is credited to the window's
    center pixel.
    """
    r, t = np.asarray(rendered, dtype=np.float64), np.asarray(target, dtype=np.float64)
    H, W = r.shape[:2]
    out = (1.0 - lambda_ssim) * np.abs(r - t).reshape(H, W, -1).mean(axis=2) / (H * W)
    if lambda_ssim:
        S = ssim_map(r, t)
        h = SSIM_WINDOW // 2
        out[h:H - h, h:W - h] += lambda_ssim * (1.0 - S).mean(axis=2) / (S.shape[0] * S.shape[1])
    return out
