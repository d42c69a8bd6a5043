"""U-shaped refinement network producing the motion-compensated frame."""

from __future__ import annotations

import torch
import torch.nn.functional as F
from torch import Tensor, nn

MC_CHANNELS = 64
BLOCKS_PER_SCALE = 3


class ResBlock(nn.Module):
    def __init__(self, channels: int = MC_CHANNELS):
        super().__init__()
        self.conv1 = nn.Conv2d(channels, channels, 3, padding=1)
        self.conv2 = nn.Conv2d(channels, channels, 3, padding=1)

    def forward(self, x: Tensor) -> Tensor:
        return x + self.conv2(F.relu(self.conv1(x)))


class Upsample(nn.Module):
    """Nearest-neighbour x2 resize followed by a 3x3 convolution."""

    def __init__(self, channels: int = MC_CHANNELS):
        super().__init__()
        self.conv = nn.Conv2d(channels, channels, 3, padding=1)

    def forward(self, x: Tensor) -> Tensor:
        return self.conv(F.interpolate(x, scale_factor=2, mode="nearest"))


def _blocks(n: int) -> nn.Sequential:
    return nn.Sequential(*(ResBlock() for _ in range(n)))


class MotionCompensation(nn.Module):
    """Refines a warped reference into the prediction of the current frame.

    Topology, three residual blocks per scale:

    * full scale: 1 block before downsampling, 2 after the upsampled skip sum
    * half scale: 1 block before downsampling, 2 after the upsampled skip sum
    * quarter scale: 3 blocks

    Downsampling is a stride-2 convolution. The network output is added to
    the warped frame, so a zeroed output layer makes it an identity on
    ``warped``.
    """

    def __init__(self, in_channels: int = 8, out_channels: int = 3):
        super().__init__()
        c = MC_CHANNELS
        self.head = nn.Conv2d(in_channels, c, 3, padding=1)
        self.enc1 = _blocks(1)
        self.down1 = nn.Conv2d(c, c, 3, stride=2, padding=1)
        self.enc2 = _blocks(1)
        self.down2 = nn.Conv2d(c, c, 3, stride=2, padding=1)
        self.mid = _blocks(BLOCKS_PER_SCALE)
        self.up2 = Upsample()
        self.dec2 = _blocks(BLOCKS_PER_SCALE - 1)
        self.up1 = Upsample()
        self.dec1 = _blocks(BLOCKS_PER_SCALE - 1)
        self.tail = nn.Conv2d(c, out_channels, 3, padding=1)

    def zero_output_layer(self) -> None:
        with torch.no_grad():
            self.tail.weight.zero_()
            self.tail.bias.zero_()

    def forward(self, ref: Tensor, warped: Tensor, flow: Tensor) -> Tensor:
        if not (ref.shape[-2:] == warped.shape[-2:] == flow.shape[-2:]):
            raise ValueError("reference, warped frame and flow must be spatially aligned")
        h, w = ref.shape[-2:]
        if h % 4 or w % 4:
            raise ValueError(f"{h}x{w} input: sides must be multiples of 4")
        x = self.head(torch.cat((ref, warped, flow), dim=1))
        s1 = self.enc1(x)
        s2 = self.enc2(self.down1(s1))
        s3 = self.mid(self.down2(s2))
        y = self.dec2(self.up2(s3) + s2)
        y = self.dec1(self.up1(y) + s1)
        return warped + self.tail(y)


def motion_compensate(ref: Tensor, warped: Tensor, flow_hat: Tensor, net: MotionCompensation) -> Tensor:
    return net(ref, warped, flow_hat)
