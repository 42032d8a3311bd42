"""Local refinement with deformable alignment and LR/HR offset interaction.

Offset fields are ``(B, 2K, h, w)`` with K kernel taps; for tap ``k``,
channel ``2k`` is the y offset and ``2k + 1`` the x offset (the layout used
by torchvision's ``deform_conv2d``).
"""
from __future__ import annotations

import math

import torch
import torch.nn as nn
import torch.nn.functional as F

LEVELS = ("lr", "hr")
DIRECTIONS = ("prev", "next")


def deform_align(x: torch.Tensor, offset: torch.Tensor, weight: torch.Tensor,
                 bias: torch.Tensor | None = None) -> torch.Tensor:
    """Deformable convolution (v1, one group, stride 1, 'same' padding).

    Each tap samples ``x`` bilinearly at base position + tap position +
    learned offset; samples falling outside the map read zero.
    """
    B, C, H, W = x.shape
    cout, cin, kh, kw = weight.shape
    K = kh * kw
    if cin != C:
        raise ValueError(f"weight expects {cin} channels, features have {C}")
    if offset.shape != (B, 2 * K, H, W):
        raise ValueError(f"offset shape {tuple(offset.shape)} != {(B, 2 * K, H, W)}")
    ys, xs = torch.meshgrid(torch.arange(H, dtype=x.dtype, device=x.device),
                            torch.arange(W, dtype=x.dtype, device=x.device), indexing="ij")
    ky, kx = torch.meshgrid(torch.arange(kh, dtype=x.dtype, device=x.device) - kh // 2,
                            torch.arange(kw, dtype=x.dtype, device=x.device) - kw // 2, indexing="ij")
    off = offset.view(B, K, 2, H, W)
    py = ys + ky.reshape(K, 1, 1) + off[:, :, 0]  # (B, K, H, W)
    px = xs + kx.reshape(K, 1, 1) + off[:, :, 1]
    grid = torch.stack([2 * px / max(W - 1, 1) - 1, 2 * py / max(H - 1, 1) - 1], dim=-1)
    sampled = F.grid_sample(x, grid.view(B, K * H, W, 2), mode="bilinear",
                            padding_mode="zeros", align_corners=True)
    out = torch.einsum("bckhw,ock->bohw", sampled.view(B, C, K, H, W), weight.reshape(cout, C, K))
    if bias is not None:
        out = out + bias.view(1, -1, 1, 1)
    return out


class DeformConv(nn.Module):
    def __init__(self, c: int, kernel_size: int = 3):
        super().__init__()
        self.weight = nn.Parameter(torch.empty(c, c, kernel_size, kernel_size))
        self.bias = nn.Parameter(torch.zeros(c))
        nn.init.kaiming_uniform_(self.weight, a=math.sqrt(5))

    def forward(self, x, offset):
        return deform_align(x, offset, self.weight, self.bias)


class OffsetPredictor(nn.Module):
    """Two convolutions on ``[neighbour, centre]``; the last one starts at zero."""

    def __init__(self, c: int, K: int = 9):
        super().__init__()
        self.conv1 = nn.Conv2d(2 * c, c, 3, 1, 1)
        self.conv2 = nn.Conv2d(c, 2 * K, 3, 1, 1)
        nn.init.zeros_(self.conv2.weight)
        nn.init.zeros_(self.conv2.bias)

    def forward(self, f_neighbor, f_center):
        if f_neighbor.shape != f_center.shape:
            raise ValueError(f"feature shapes differ: {tuple(f_neighbor.shape)} vs {tuple(f_center.shape)}")
        return self.conv2(F.leaky_relu(self.conv1(torch.cat([f_neighbor, f_center], 1)), 0.1))


class InteractionNet(nn.Module):
    """Exchanges information between the LR and HR offsets of one direction.

    The LR offsets are upsampled 4x and mixed with the HR offsets into an
    interaction map; each level is then corrected by a zero-initialised head
    that sees the map (resampled to that level) and its own offsets.
    """

    def __init__(self, K: int = 9):
        super().__init__()
        n = 2 * K
        self.mix = nn.Conv2d(2 * n, n, 3, 1, 1)
        self.head_lr = nn.Conv2d(2 * n, n, 3, 1, 1)
        self.head_hr = nn.Conv2d(2 * n, n, 3, 1, 1)
        for head in (self.head_lr, self.head_hr):
            nn.init.zeros_(head.weight)
            nn.init.zeros_(head.bias)

    def forward(self, s_lr, s_hr):
        if s_hr.shape[-2:] != tuple(4 * d for d in s_lr.shape[-2:]) or s_lr.shape[:2] != s_hr.shape[:2]:
            raise ValueError(f"offset pair mismatch: {tuple(s_lr.shape)} / {tuple(s_hr.shape)}")
        up = F.interpolate(s_lr, scale_factor=4, mode="bilinear", align_corners=False)
        inter = F.leaky_relu(self.mix(torch.cat([up, s_hr], 1)), 0.1)
        hr = s_hr + self.head_hr(torch.cat([inter, s_hr], 1))
        inter_lr = F.interpolate(inter, size=s_lr.shape[-2:], mode="bilinear", align_corners=False)
        lr = s_lr + self.head_lr(torch.cat([inter_lr, s_lr], 1))
        return lr, hr


def inet_interact(inet: InteractionNet | None, s_lr, s_hr, direction_lr: str = "prev",
                  direction_hr: str = "prev"):
    """Refine an LR/HR offset pair; ``inet=None`` passes them through."""
    if direction_lr != direction_hr:
        raise ValueError(f"cannot interact offsets of directions {direction_lr!r} and {direction_hr!r}")
    if inet is None:
        return s_lr, s_hr
    return inet(s_lr, s_hr)


def _fusion(c):
    return nn.Sequential(
        nn.Conv2d(3 * c, c, 3, 1, 1), nn.LeakyReLU(0.1),
        nn.Conv2d(c, c, 3, 1, 1), nn.LeakyReLU(0.1),
        nn.Conv2d(c, c, 3, 1, 1), nn.LeakyReLU(0.1),
        nn.Conv2d(c, c, 3, 1, 1),
    )


def upsample_offsets(s: torch.Tensor, factor: int = 4) -> torch.Tensor:
    """Carry LR offsets to the HR grid; offsets are in pixels so values scale too."""
    return factor * F.interpolate(s, scale_factor=factor, mode="bilinear", align_corners=False)


def downsample_offsets(s: torch.Tensor, factor: int = 4) -> torch.Tensor:
    return F.interpolate(s, scale_factor=1 / factor, mode="bilinear", align_corners=False) / factor


class LocalRefine(nn.Module):
    """Refines each frame's features from its two temporal neighbours.

    Args:
        c: feature channels.
        branches: feature levels present ("lr", "hr" or both).
        inet: exchange offsets between levels before alignment.
        offsets: "both", or "lr_only"/"hr_only" to predict one offset set and
            resample it for the other level.
    """

    def __init__(self, c: int = 64, branches: tuple[str, ...] = LEVELS, inet: bool = True,
                 offsets: str = "both", K: int = 9):
        super().__init__()
        if offsets not in ("both", "lr_only", "hr_only"):
            raise ValueError(f"unknown offsets mode {offsets!r}")
        if len(branches) == 1:
            offsets = f"{branches[0]}_only"
        self.branches = branches
        self.offsets = offsets
        sources = LEVELS if offsets == "both" else (offsets.split("_")[0],)
        self.predict = nn.ModuleDict({
            f"{lvl}_{d}": OffsetPredictor(c, K) for lvl in sources for d in DIRECTIONS})
        self.inet = InteractionNet(K) if inet and offsets == "both" else None
        self.dcn = nn.ModuleDict({lvl: DeformConv(c) for lvl in branches})
        self.fuse = nn.ModuleDict({lvl: _fusion(c) for lvl in branches})

    def predict_offsets(self, level, direction, f_neighbor, f_center):
        return self.predict[f"{level}_{direction}"](f_neighbor, f_center)

    def window_offsets(self, feats):
        """Offsets per (level, direction) for a window ``{level: (prev, center, next)}``."""
        out = {}
        for d, idx in zip(DIRECTIONS, (0, 2)):
            if self.offsets == "both":
                s_lr = self.predict_offsets("lr", d, feats["lr"][idx], feats["lr"][1])
                s_hr = self.predict_offsets("hr", d, feats["hr"][idx], feats["hr"][1])
                s_lr, s_hr = inet_interact(self.inet, s_lr, s_hr, d, d)
                out["lr", d], out["hr", d] = s_lr, s_hr
            elif self.offsets == "lr_only":
                s = self.predict_offsets("lr", d, feats["lr"][idx], feats["lr"][1])
                out["lr", d] = s
                if "hr" in self.branches:
                    out["hr", d] = upsample_offsets(s)
            else:
                s = self.predict_offsets("hr", d, feats["hr"][idx], feats["hr"][1])
                out["hr", d] = s
                if "lr" in self.branches:
                    out["lr", d] = downsample_offsets(s)
        return out

    def forward_window(self, l_prev=None, l=None, l_next=None, h_prev=None, h=None, h_next=None):
        feats = {}
        if "lr" in self.branches:
            feats["lr"] = (l_prev, l, l_next)
        if "hr" in self.branches:
            feats["hr"] = (h_prev, h, h_next)
        offsets = self.window_offsets(feats)
        refined = {}
        for lvl, (f_prev, f_center, f_next) in feats.items():
            a_prev = self.dcn[lvl](f_prev, offsets[lvl, "prev"])
            a_next = self.dcn[lvl](f_next, offsets[lvl, "next"])
            refined[lvl] = f_center + self.fuse[lvl](torch.cat([f_center, a_prev, a_next], 1))
        return refined.get("lr"), refined.get("hr")

    def forward(self, L: torch.Tensor | None, H: torch.Tensor | None):
        """Refine ``(B, S, c, h, w)`` sequences with a size-3 sliding window.

        The first and last frames use themselves as the missing neighbour.
        """
        ref = L if L is not None else H
        B, S = ref.shape[:2]
        if S < 1:
            raise ValueError("empty sequence")
        prev_idx, next_idx = window_indices(S)

        def gather(seq):
            if seq is None:
                return None, None, None
            flat = lambda t: t.reshape(B * S, *t.shape[2:])
            return flat(seq[:, prev_idx]), flat(seq), flat(seq[:, next_idx])

        l_r, h_r = self.forward_window(*gather(L), *gather(H))
        unflat = lambda t: None if t is None else t.view(B, S, *t.shape[1:])
        return unflat(l_r), unflat(h_r)


def window_indices(S: int) -> tuple[list[int], list[int]]:
    """Neighbour indices per position, substituting self at the ends."""
    return [max(i - 1, 0) for i in range(S)], [min(i + 1, S - 1) for i in range(S)]
