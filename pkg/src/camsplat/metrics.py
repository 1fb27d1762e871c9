"""Image quality metrics (pose metrics live in camera.py)."""
from __future__ import annotations

import numpy as np

from .errors import ContractError, ShapeError
from .numerics import Tensor

PSNR_CAP = 99.0


def _as_image(a) -> np.ndarray:
    arr = a.data if isinstance(a, Tensor) else np.asarray(a)
    return arr.astype(np.float64, copy=False)


def mse(a, b) -> float:
    aa, bb = _as_image(a), _as_image(b)
    if aa.shape != bb.shape:
        raise ShapeError(f"image shapes differ: {aa.shape} vs {bb.shape}")
    return float(np.mean((aa - bb) ** 2))


def psnr(a, b) -> float:
    """10*log10(1/MSE) for [0,1] images, capped at 99 dB for exact matches."""
    m = mse(a, b)
    if m < 1e-10:
        return PSNR_CAP
    return min(PSNR_CAP, float(10.0 * np.log10(1.0 / m)))


def _gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    r = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(r ** 2) / (2.0 * sigma ** 2))
    g /= g.sum()
    return np.outer(g, g)


_SSIM_WIN = _gaussian_window()


def _windows(x: np.ndarray, k: int) -> np.ndarray:
    return np.lib.stride_tricks.sliding_window_view(x, (k, k))


def ssim(a, b) -> float:
    """Mean local structural similarity, 11x11 Gaussian window sigma=1.5."""
    aa, bb = _as_image(a), _as_image(b)
    if aa.shape != bb.shape:
        raise ShapeError(f"image shapes differ: {aa.shape} vs {bb.shape}")
    if aa.ndim == 2:
        aa, bb = aa[..., None], bb[..., None]
    if aa.ndim != 3:
        raise ShapeError(f"ssim expects HxW or HxWxC, got {aa.shape}")
    k = _SSIM_WIN.shape[0]
    if aa.shape[0] < k or aa.shape[1] < k:
        raise ContractError(f"image {aa.shape[:2]} smaller than the "
                            f"{k}x{k} ssim window")
    c1, c2 = 0.01 ** 2, 0.03 ** 2
    w = _SSIM_WIN
    vals = []
    for ch in range(aa.shape[2]):
        x, y = aa[:, :, ch], bb[:, :, ch]
        wx = _windows(x, k)
        wy = _windows(y, k)
        mu_x = np.einsum("ijkl,kl->ij", wx, w)
        mu_y = np.einsum("ijkl,kl->ij", wy, w)
        xx = np.einsum("ijkl,kl->ij", wx * wx, w) - mu_x ** 2
        yy = np.einsum("ijkl,kl->ij", wy * wy, w) - mu_y ** 2
        xy = np.einsum("ijkl,kl->ij", wx * wy, w) - mu_x * mu_y
        num = (2 * mu_x * mu_y + c1) * (2 * xy + c2)
        den = (mu_x ** 2 + mu_y ** 2 + c1) * (xx + yy + c2)
        vals.append(num / den)
    return float(np.mean(vals))
