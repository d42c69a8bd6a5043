"""Analysis/synthesis transforms with GDN and inverse GDN activations."""

from __future__ import annotations

import torch
import torch.nn.functional as F
from torch import Tensor, nn

LATENT_CHANNELS = 128
MOTION_KERNEL = 3
RESIDUAL_KERNEL = 5
BETA_MIN = 1e-6


def gdn(x: Tensor, beta: Tensor, gamma: Tensor, inverse: bool = False) -> Tensor:
    """Generalized divisive normalization.

    ``y_i = x_i / sqrt(beta_i + sum_j gamma_ij * x_j**2)`` at every spatial
    location, or the product form when ``inverse`` is set. ``x`` is
    ``(B, C, H, W)``; ``beta`` has shape ``(C,)`` and ``gamma`` ``(C, C)``.
    """
    c = x.shape[1]
    if beta.shape != (c,) or gamma.shape != (c, c):
        raise ValueError(
            f"GDN parameters for {beta.shape[0]} channels applied to {c}-channel input")
    norm = F.conv2d(x * x, gamma.view(c, c, 1, 1), beta)
    norm = torch.sqrt(norm)
    return x * norm if inverse else x / norm


def igdn(x: Tensor, beta: Tensor, gamma: Tensor) -> Tensor:
    return gdn(x, beta, gamma, inverse=True)


class GDN(nn.Module):
    """GDN layer with squared reparameterization.

    ``beta = beta_param**2 + beta_min`` and ``gamma = gamma_param**2`` keep
    both parameters in their valid ranges under unconstrained updates.
    """

    def __init__(self, channels: int, inverse: bool = False, beta_min: float = BETA_MIN,
                 gamma_init: float = 0.1):
        super().__init__()
        self.inverse = inverse
        self.beta_min = beta_min
        self.beta_param = nn.Parameter(torch.full((channels,), (1.0 - beta_min) ** 0.5))
        self.gamma_param = nn.Parameter((gamma_init * torch.eye(channels)).sqrt())

    @property
    def beta(self) -> Tensor:
        return self.beta_param ** 2 + self.beta_min

    @property
    def gamma(self) -> Tensor:
        return self.gamma_param ** 2

    def forward(self, x: Tensor) -> Tensor:
        return gdn(x, self.beta, self.gamma, inverse=self.inverse)


class AnalysisTransform(nn.Module):
    """Four stride-2 convolutions; GDN after the first three."""

    def __init__(self, in_channels: int, kernel_size: int, channels: int = LATENT_CHANNELS):
        super().__init__()
        self.kernel_size = kernel_size
        self.in_channels = in_channels
        pad = kernel_size // 2
        layers = []
        cin = in_channels
        for i in range(4):
            layers.append(nn.Conv2d(cin, channels, kernel_size, stride=2, padding=pad))
            if i < 3:
                layers.append(GDN(channels))
            cin = channels
        self.net = nn.Sequential(*layers)

    def forward(self, x: Tensor) -> Tensor:
        h, w = x.shape[-2:]
        if x.shape[1] != self.in_channels:
            raise ValueError(f"expected {self.in_channels} input channels, got {x.shape[1]}")
        if h % 16 or w % 16:
            raise ValueError(f"input {h}x{w} must have sides that are multiples of 16")
        return self.net(x)


class SynthesisTransform(nn.Module):
    """Four stride-2 transposed convolutions; inverse GDN after the first three.

    ``output_padding=1`` makes every layer exactly double the spatial size.
    """

    def __init__(self, out_channels: int, kernel_size: int, channels: int = LATENT_CHANNELS):
        super().__init__()
        self.kernel_size = kernel_size
        self.channels = channels
        pad = kernel_size // 2
        layers = []
        for i in range(4):
            cout = out_channels if i == 3 else channels
            layers.append(nn.ConvTranspose2d(channels, cout, kernel_size, stride=2,
                                             padding=pad, output_padding=1))
            if i < 3:
                layers.append(GDN(channels, inverse=True))
        self.net = nn.Sequential(*layers)

    def forward(self, y: Tensor) -> Tensor:
        if y.shape[1] != self.channels:
            raise ValueError(f"latent must have {self.channels} channels, got {y.shape[1]}")
        return self.net(y)


def zero_biases(module: nn.Module) -> None:
    with torch.no_grad():
        for m in module.modules():
            if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d)) and m.bias is not None:
                m.bias.zero_()


def motion_transforms():
    return AnalysisTransform(2, MOTION_KERNEL), SynthesisTransform(2, MOTION_KERNEL)


def residual_transforms():
    return AnalysisTransform(3, RESIDUAL_KERNEL), SynthesisTransform(3, RESIDUAL_KERNEL)


def mv_analysis(flow: Tensor, enc: AnalysisTransform) -> Tensor:
    return enc(flow)


def mv_synthesis(latent: Tensor, dec: SynthesisTransform) -> Tensor:
    return dec(latent)


def res_analysis(residual: Tensor, enc: AnalysisTransform) -> Tensor:
    return enc(residual)


def res_synthesis(latent: Tensor, dec: SynthesisTransform) -> Tensor:
    return dec(latent)
