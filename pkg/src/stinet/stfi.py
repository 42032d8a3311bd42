"""Feature initialisation and joint LR/HR intermediate-feature interpolation."""
from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F


class ResidualBlock(nn.Module):
    """conv-ReLU-conv with identity skip, no normalisation."""

    def __init__(self, c: int):
        super().__init__()
        self.conv1 = nn.Conv2d(c, c, 3, 1, 1)
        self.conv2 = nn.Conv2d(c, c, 3, 1, 1)

    def forward(self, x):
        return x + self.conv2(F.relu(self.conv1(x)))


class SpatialSR(nn.Module):
    """Maps an LR frame to an LR feature and a 4x HR feature.

    Two stride-2 transposed convolutions, each followed by a residual block.
    """

    def __init__(self, c: int = 64):
        super().__init__()
        self.head = nn.Sequential(nn.Conv2d(3, c, 3, 1, 1), nn.LeakyReLU(0.1), ResidualBlock(c))
        self.up1 = nn.Sequential(nn.ConvTranspose2d(c, c, 4, 2, 1), nn.LeakyReLU(0.1), ResidualBlock(c))
        self.up2 = nn.Sequential(nn.ConvTranspose2d(c, c, 4, 2, 1), nn.LeakyReLU(0.1), ResidualBlock(c))

    def forward(self, frame: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        if frame.ndim != 4 or frame.shape[1] != 3:
            raise ValueError(f"expected (B, 3, h, w) frames, got {tuple(frame.shape)}")
        lr = self.head(frame)
        return lr, self.up2(self.up1(lr))


def init_features(ssr: SpatialSR, frame: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    single = frame.ndim == 3
    lr, hr = ssr(frame[None] if single else frame)
    return (lr[0], hr[0]) if single else (lr, hr)


class MotionNet(nn.Module):
    """Two convolutions around two residual blocks; input is the pair of flows
    from the intermediate time to its neighbours."""

    def __init__(self, c: int = 64):
        super().__init__()
        self.body = nn.Sequential(
            nn.Conv2d(4, c, 3, 1, 1), nn.LeakyReLU(0.1),
            ResidualBlock(c), ResidualBlock(c),
            nn.Conv2d(c, c, 3, 1, 1),
        )

    def forward(self, o_to_prev: torch.Tensor, o_to_next: torch.Tensor) -> torch.Tensor:
        if o_to_prev.shape != o_to_next.shape:
            raise ValueError(f"flow shapes differ: {tuple(o_to_prev.shape)} vs {tuple(o_to_next.shape)}")
        return self.body(torch.cat([o_to_prev, o_to_next], dim=1))


class InterpolationNet(nn.Module):
    """LR and HR interpolation branches joined by a stack of residual blocks.

    With ``shared=True`` both branches run through the same block stack.
    Each branch input ``[m, f_prev, f_next]`` is concatenated with the stack
    output before a per-branch fusion convolution.
    """

    def __init__(self, c: int = 64, num_blocks: int = 5, shared: bool = True,
                 branches: tuple[str, ...] = ("lr", "hr")):
        super().__init__()
        self.c = c
        self.shared = shared
        self.branches = branches
        self.entry = nn.ModuleDict({b: nn.Conv2d(3 * c, c, 3, 1, 1) for b in branches})
        self.fuse = nn.ModuleDict({b: nn.Conv2d(4 * c, c, 3, 1, 1) for b in branches})
        if shared:
            self.blocks = nn.Sequential(*[ResidualBlock(c) for _ in range(num_blocks)])
        else:
            self.blocks = nn.ModuleDict({
                b: nn.Sequential(*[ResidualBlock(c) for _ in range(num_blocks)]) for b in branches})

    def _stack(self, branch):
        return self.blocks if self.shared else self.blocks[branch]

    def _branch(self, branch, m, f_prev, f_next):
        x = torch.cat([m, f_prev, f_next], dim=1)
        y = self._stack(branch)(F.leaky_relu(self.entry[branch](x), 0.1))
        return self.fuse[branch](torch.cat([x, y], dim=1))

    def forward(self, m, l_prev=None, l_next=None, h_prev=None, h_next=None):
        for name, f in (("l_prev", l_prev), ("l_next", l_next), ("h_prev", h_prev), ("h_next", h_next)):
            if f is not None and f.shape[1] != m.shape[1]:
                raise ValueError(f"{name} has {f.shape[1]} channels, motion has {m.shape[1]}")
        l = h = None
        if "lr" in self.branches:
            l = self._branch("lr", m, l_prev, l_next)
        if "hr" in self.branches:
            m_up = F.interpolate(m, scale_factor=4, mode="bilinear", align_corners=False)
            h = self._branch("hr", m_up, h_prev, h_next)
        return l, h


class Phase1Heads(nn.Module):
    """Separate 1x1 projections of LR and HR features to RGB."""

    def __init__(self, c: int = 64, branches: tuple[str, ...] = ("lr", "hr")):
        super().__init__()
        self.heads = nn.ModuleDict({b: nn.Conv2d(c, 3, 1) for b in branches})

    def forward(self, l=None, h=None):
        return (self.heads["lr"](l) if l is not None else None,
                self.heads["hr"](h) if h is not None else None)
