"""PSNR and multi-scale SSIM on ``[0, 1]`` RGB frames."""

from __future__ import annotations

import math

import torch
import torch.nn.functional as F
from torch import Tensor

PSNR_CAP = 100.0
MSSSIM_WEIGHTS = (0.0448, 0.2856, 0.3001, 0.2363, 0.1333)
WINDOW = 11
SIGMA = 1.5
K1, K2 = 0.01, 0.03


def _batched(x: Tensor) -> Tensor:
    return x.unsqueeze(0) if x.dim() == 3 else x


def mse(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")
    return torch.mean((a - b) ** 2)


def psnr(a: Tensor, b: Tensor) -> float:
    """Peak signal-to-noise ratio in dB for peak 1.0, capped at 100 dB."""
    err = float(mse(a.double(), b.double()))
    if err <= 10 ** (-PSNR_CAP / 10):
        return PSNR_CAP
    return 10.0 * math.log10(1.0 / err)


def max_scales(h: int, w: int, window: int = WINDOW, limit: int = len(MSSSIM_WEIGHTS)) -> int:
    """Largest scale count whose coarsest level still fits the Gaussian window."""
    n = 0
    while n < limit and min(h, w) // (2 ** n) >= window:
        n += 1
    return n


def _gaussian_window(dtype, device) -> Tensor:
    xs = torch.arange(WINDOW, dtype=dtype, device=device) - WINDOW // 2
    g = torch.exp(-(xs ** 2) / (2 * SIGMA ** 2))
    return g / g.sum()


def _filter(x: Tensor, g: Tensor) -> Tensor:
    c = x.shape[1]
    x = F.conv2d(x, g.view(1, 1, 1, -1).expand(c, 1, 1, -1), groups=c)
    return F.conv2d(x, g.view(1, 1, -1, 1).expand(c, 1, -1, 1), groups=c)


def _ssim_terms(a: Tensor, b: Tensor, g: Tensor):
    c1, c2 = K1 ** 2, K2 ** 2
    mu_a, mu_b = _filter(a, g), _filter(b, g)
    var_a = _filter(a * a, g) - mu_a ** 2
    var_b = _filter(b * b, g) - mu_b ** 2
    cov = _filter(a * b, g) - mu_a * mu_b
    cs = (2 * cov + c2) / (var_a + var_b + c2)
    lum = (2 * mu_a * mu_b + c1) / (mu_a ** 2 + mu_b ** 2 + c1)
    return (lum * cs).flatten(1).mean(1), cs.flatten(1).mean(1)


def msssim(a: Tensor, b: Tensor, scales: int = 5) -> Tensor:
    """Multi-scale SSIM with an 11x11 Gaussian window (sigma 1.5).

    Uses the standard five-scale weights; with ``scales < 5`` the leading
    weights are renormalized to sum to one. Returns the batch mean as a
    differentiable scalar tensor.

    Raises:
        ValueError: if a side is too small for ``scales`` levels.
    """
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")
    a, b = _batched(a), _batched(b)
    h, w = a.shape[-2:]
    if not 1 <= scales <= len(MSSSIM_WEIGHTS):
        raise ValueError(f"scales must be in 1..{len(MSSSIM_WEIGHTS)}")
    need = WINDOW * 2 ** (scales - 1)
    if min(h, w) < need:
        raise ValueError(
            f"{h}x{w} frames are too small for {scales}-scale MS-SSIM (need {need}px per side); "
            f"use scales={max_scales(h, w)} or fewer")
    weights = torch.tensor(MSSSIM_WEIGHTS[:scales], dtype=a.dtype, device=a.device)
    weights = weights / weights.sum()
    g = _gaussian_window(a.dtype, a.device)
    values = []
    for i in range(scales):
        ssim, cs = _ssim_terms(a, b, g)
        values.append(torch.relu(ssim if i == scales - 1 else cs))
        if i < scales - 1:
            a, b = F.avg_pool2d(a, 2), F.avg_pool2d(b, 2)
    stacked = torch.stack(values, dim=0)  # (scales, B)
    return torch.prod(stacked ** weights.view(-1, 1), dim=0).mean()
