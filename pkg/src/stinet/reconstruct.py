"""Frame reconstruction from the refined LR and HR feature sequences."""
from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F


def pixel_shuffle(f: torch.Tensor, r: int) -> torch.Tensor:
    """Sub-pixel rearrangement: out[ch, r*y+dy, r*x+dx] = in[ch*r*r + dy*r + dx, y, x]."""
    if f.shape[-3] % (r * r):
        raise ValueError(f"{f.shape[-3]} channels not divisible by r^2 = {r * r}")
    return F.pixel_shuffle(f, r)


class Reconstructor(nn.Module):
    """V = V^L + V^H.

    The LR path is two sub-pixel convolution layers (a 3x3 conv to 4c
    channels followed by a 2x pixel shuffle, twice) and a 1x1 projection;
    the HR path is a 1x1 projection. The whole head is linear.
    """

    def __init__(self, c: int = 64, branches: tuple[str, ...] = ("lr", "hr"), bias: bool = True):
        super().__init__()
        self.branches = branches
        if "lr" in branches:
            self.up1 = nn.Conv2d(c, 4 * c, 3, 1, 1, bias=bias)
            self.up2 = nn.Conv2d(c, 4 * c, 3, 1, 1, bias=bias)
            self.proj_lr = nn.Conv2d(c, 3, 1, bias=bias)
        if "hr" in branches:
            self.proj_hr = nn.Conv2d(c, 3, 1, bias=bias)

    def project_lr(self, l):
        return self.proj_lr(pixel_shuffle(self.up2(pixel_shuffle(self.up1(l), 2)), 2))

    def forward(self, L: torch.Tensor | None, H: torch.Tensor | None) -> torch.Tensor:
        """Map (B, S, c, h, w) / (B, S, c, 4h, 4w) sequences to (B, S, 3, 4h, 4w) frames."""
        out = 0
        if L is not None:
            B, S = L.shape[:2]
            out = out + self.project_lr(L.flatten(0, 1)).view(B, S, 3, *[4 * d for d in L.shape[-2:]])
        if H is not None:
            B, S = H.shape[:2]
            out = out + self.proj_hr(H.flatten(0, 1)).view(B, S, 3, *H.shape[-2:])
        return out
