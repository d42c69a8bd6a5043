"""Coarse-to-fine pyramid motion estimation and backward warping."""

from __future__ import annotations

from typing import List

import torch
import torch.nn.functional as F
from torch import Tensor, nn

PYRAMID_LEVELS = 5
LEVEL_CHANNELS = (32, 64, 32, 16, 2)
LEVEL_KERNEL = 7
LEVEL_IN_CHANNELS = 8


def build_pyramid(image: Tensor, levels: int = PYRAMID_LEVELS) -> List[Tensor]:
    """Return ``levels`` images, full resolution first, each half the size of the last.

    Downsampling is 2x2 mean pooling. Works on ``(C, H, W)`` or ``(B, C, H, W)``.
    """
    h, w = image.shape[-2:]
    factor = 2 ** (levels - 1)
    if h % factor or w % factor:
        raise ValueError(f"{h}x{w} is not divisible by {factor} for a {levels}-level pyramid")
    squeeze = image.dim() == 3
    x = image.unsqueeze(0) if squeeze else image
    out = [x]
    for _ in range(levels - 1):
        out.append(F.avg_pool2d(out[-1], 2))
    return [o[0] for o in out] if squeeze else out


def _base_grid(h: int, w: int, dtype, device) -> Tensor:
    ys = torch.arange(h, dtype=dtype, device=device)
    xs = torch.arange(w, dtype=dtype, device=device)
    gy, gx = torch.meshgrid(ys, xs, indexing="ij")
    return torch.stack((gx, gy))  # (2, H, W), x first


def warp(image: Tensor, flow: Tensor) -> Tensor:
    """Backward-warp ``image`` by ``flow``.

    ``out[p] = image[p + flow[p]]`` with bilinear interpolation; sample
    positions outside the image are clamped to the border. ``flow[:, 0]``
    is the horizontal and ``flow[:, 1]`` the vertical displacement in pixels.
    Accepts batched ``(B, C, H, W)`` / ``(B, 2, H, W)`` or unbatched inputs.

    Raises:
        FloatingPointError: if the flow has NaN or infinite entries (the
            sampler's backward pass is undefined for them).
    """
    squeeze = image.dim() == 3
    if squeeze:
        image, flow = image.unsqueeze(0), flow.unsqueeze(0)
    if flow.dim() != 4 or flow.shape[1] != 2:
        raise ValueError(f"flow must have 2 channels, got shape {tuple(flow.shape)}")
    if image.shape[-2:] != flow.shape[-2:] or image.shape[0] != flow.shape[0]:
        raise ValueError(f"image {tuple(image.shape)} and flow {tuple(flow.shape)} are not aligned")
    if not torch.isfinite(flow).all():
        raise FloatingPointError("flow contains NaN or infinite values")
    h, w = image.shape[-2:]
    pos = _base_grid(h, w, flow.dtype, flow.device) + flow
    # normalize to [-1, 1] with pixel centres at the extremes (align_corners=True)
    gx = pos[:, 0] * (2.0 / max(w - 1, 1)) - 1.0
    gy = pos[:, 1] * (2.0 / max(h - 1, 1)) - 1.0
    grid = torch.stack((gx, gy), dim=-1)
    out = F.grid_sample(image, grid, mode="bilinear", padding_mode="border", align_corners=True)
    return out[0] if squeeze else out


def upsample_flow(flow: Tensor) -> Tensor:
    """Bilinear x2 resize, doubling displacement values to match the finer grid."""
    return 2.0 * F.interpolate(flow, scale_factor=2, mode="bilinear", align_corners=False)


class PyramidLevel(nn.Module):
    """Five 7x7 convolutions predicting a residual flow at one pyramid level."""

    def __init__(self):
        super().__init__()
        layers = []
        cin = LEVEL_IN_CHANNELS
        for i, cout in enumerate(LEVEL_CHANNELS):
            layers.append(nn.Conv2d(cin, cout, LEVEL_KERNEL, padding=LEVEL_KERNEL // 2))
            if i < len(LEVEL_CHANNELS) - 1:
                layers.append(nn.ReLU(inplace=False))
            cin = cout
        self.net = nn.Sequential(*layers)

    @property
    def convs(self) -> List[nn.Conv2d]:
        return [m for m in self.net if isinstance(m, nn.Conv2d)]

    def forward(self, x: Tensor) -> Tensor:
        return self.net(x)


class PyramidFlow(nn.Module):
    """Coarse-to-fine flow estimator.

    At the coarsest level the flow starts at zero. Every level upsamples the
    incoming flow, warps the reference with it, and adds the residual flow
    predicted from ``(target, warped reference, flow)``.
    """

    def __init__(self, levels: int = PYRAMID_LEVELS):
        super().__init__()
        self.levels = levels
        # index 0 is the full-resolution level
        self.nets = nn.ModuleList(PyramidLevel() for _ in range(levels))

    def zero_output_layers(self) -> None:
        with torch.no_grad():
            for level in self.nets:
                last = level.convs[-1]
                last.weight.zero_()
                last.bias.zero_()

    def forward(self, ref: Tensor, target: Tensor) -> Tensor:
        if ref.shape != target.shape:
            raise ValueError(f"ref {tuple(ref.shape)} and target {tuple(target.shape)} differ")
        squeeze = ref.dim() == 3
        if squeeze:
            ref, target = ref.unsqueeze(0), target.unsqueeze(0)
        ref_pyr = build_pyramid(ref, self.levels)
        tgt_pyr = build_pyramid(target, self.levels)
        b, _, h, w = ref_pyr[-1].shape
        flow = ref.new_zeros(b, 2, h, w)
        for k in reversed(range(self.levels)):
            if k != self.levels - 1:
                flow = upsample_flow(flow)
            warped = warp(ref_pyr[k], flow)
            flow = flow + self.nets[k](torch.cat((tgt_pyr[k], warped, flow), dim=1))
        return flow[0] if squeeze else flow


def estimate_flow(ref: Tensor, target: Tensor, net: PyramidFlow) -> Tensor:
    return net(ref, target)
