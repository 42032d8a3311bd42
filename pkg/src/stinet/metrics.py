"""PSNR and SSIM on the luma channel (or RGB on request)."""
from __future__ import annotations

import math

import numpy as np
import torch
import torch.nn.functional as F

PSNR_CAP = 100.0


def rgb_to_y(img: torch.Tensor) -> torch.Tensor:
    """ITU-R BT.601 luma of (..., 3, H, W) [0, 1] images, in [16/255, 235/255]."""
    r, g, b = img.unbind(-3)
    return (16.0 + 65.481 * r + 128.553 * g + 24.966 * b) / 255.0


def _prepare(img, channel: str) -> torch.Tensor:
    x = torch.as_tensor(np.asarray(img) if not isinstance(img, torch.Tensor) else img).double()
    if x.ndim == 2:
        return x[None]
    if x.shape[-3] != 3:
        raise ValueError(f"expected (3, H, W) or (H, W) image, got {tuple(x.shape)}")
    if channel == "y":
        return rgb_to_y(x)[None]
    if channel == "rgb":
        return x
    raise ValueError(f"unknown channel mode {channel!r}")


def psnr(pred, gt, channel: str = "y", cap: float = PSNR_CAP) -> float:
    """10 log10(1 / MSE); 2-D inputs are taken as luma already."""
    p, g = _prepare(pred, channel), _prepare(gt, channel)
    if p.shape != g.shape:
        raise ValueError(f"shape mismatch: {tuple(p.shape)} vs {tuple(g.shape)}")
    mse = (p - g).square().mean().item()
    if mse == 0:
        return cap
    return min(cap, 10 * math.log10(1.0 / mse))


def gaussian_window(size: int = 11, sigma: float = 1.5) -> torch.Tensor:
    x = torch.arange(size, dtype=torch.float64) - (size - 1) / 2
    g = torch.exp(-x ** 2 / (2 * sigma ** 2))
    g /= g.sum()
    return torch.outer(g, g)


def ssim(pred, gt, channel: str = "y", window: int = 11, sigma: float = 1.5,
         k1: float = 0.01, k2: float = 0.03, data_range: float = 1.0) -> float:
    """Mean SSIM over all fully-covered 11x11 Gaussian windows, averaged over channels."""
    p, g = _prepare(pred, channel), _prepare(gt, channel)
    if p.shape != g.shape:
        raise ValueError(f"shape mismatch: {tuple(p.shape)} vs {tuple(g.shape)}")
    c1, c2 = (k1 * data_range) ** 2, (k2 * data_range) ** 2
    w = gaussian_window(window, sigma)[None, None]
    x, y = p[:, None], g[:, None]  # channels as batch
    filt = lambda t: F.conv2d(t, w)
    mx, my = filt(x), filt(y)
    sxx = filt(x * x) - mx * mx
    syy = filt(y * y) - my * my
    sxy = filt(x * y) - mx * my
    num = (2 * mx * my + c1) * (2 * sxy + c2)
    den = (mx * mx + my * my + c1) * (sxx + syy + c2)
    return (num / den).mean().item()


def clip_metrics(pred_frames: torch.Tensor, gt_frames: torch.Tensor, channel: str = "y") -> tuple[float, float]:
    """Mean PSNR / SSIM over the frames of a (T, 3, H, W) clip."""
    pred_frames = pred_frames.clamp(0, 1)
    ps = [psnr(p, g, channel) for p, g in zip(pred_frames, gt_frames)]
    ss = [ssim(p, g, channel) for p, g in zip(pred_frames, gt_frames)]
    return float(np.mean(ps)), float(np.mean(ss))
