"""U-shaped encoder-decoder shared by the segmenter and the composition branch."""

from __future__ import annotations

import torch
import torch.nn.functional as F
from torch import nn


def _block(cin: int, cout: int) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(cin, cout, 3, padding=1, bias=False),
        nn.BatchNorm2d(cout),
        nn.ReLU(inplace=True),
        nn.Conv2d(cout, cout, 3, padding=1, bias=False),
        nn.BatchNorm2d(cout),
        nn.ReLU(inplace=True),
    )


class UNet(nn.Module):
    """4-level UNet.

    ``scale`` > 1 makes the network run at ``1/scale`` of the input
    resolution: inputs are average-pooled on entry and logits bilinearly
    upsampled on exit. With ``scale=1`` it is a plain UNet.
    """

    def __init__(self, in_channels: int, out_channels: int, width: int = 32, levels: int = 4, scale: int = 1):
        super().__init__()
        self.scale = scale
        widths = [width * 2**i for i in range(levels)]
        self.down = nn.ModuleList()
        cin = in_channels
        for w in widths:
            self.down.append(_block(cin, w))
            cin = w
        self.bottleneck = _block(widths[-1], widths[-1] * 2)
        self.up = nn.ModuleList()
        self.dec = nn.ModuleList()
        cin = widths[-1] * 2
        for w in reversed(widths):
            self.up.append(nn.ConvTranspose2d(cin, w, 2, stride=2))
            self.dec.append(_block(2 * w, w))
            cin = w
        self.head = nn.Conv2d(widths[0], out_channels, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        size = x.shape[-2:]
        if self.scale > 1:
            x = F.avg_pool2d(x, self.scale)
        skips = []
        for block in self.down:
            x = block(x)
            skips.append(x)
            x = F.max_pool2d(x, 2)
        x = self.bottleneck(x)
        for up, dec, skip in zip(self.up, self.dec, reversed(skips)):
            x = up(x)
            x = dec(torch.cat([x, skip], dim=1))
        x = self.head(x)
        if self.scale > 1:
            x = F.interpolate(x, size=size, mode="bilinear", align_corners=False)
        return x


def seed_everything(seed: int, deterministic: bool = True) -> torch.Generator:
    torch.manual_seed(seed)
    if deterministic:
        torch.use_deterministic_algorithms(True)
    return torch.Generator().manual_seed(seed)


def step_lr(optimizer: torch.optim.Optimizer, iterations: int, decay_fraction: float = 0.9, gamma: float = 0.1):
    """Multiply the learning rate by ``gamma`` once, at ``floor(decay_fraction * iterations)``."""
    milestone = int(decay_fraction * iterations)
    return torch.optim.lr_scheduler.MultiStepLR(optimizer, milestones=[milestone], gamma=gamma), milestone
