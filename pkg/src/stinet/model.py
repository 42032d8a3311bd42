"""The full space-time super-resolution network."""
from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn

from .config import ModelConfig
from .data import resize_bicubic
from .flow import FlowEstimator, adapt_flow, freeze, interpolation_times
from .reconstruct import Reconstructor
from .stfi import InterpolationNet, MotionNet, Phase1Heads, ResidualBlock, SpatialSR
from .stgr import GlobalRefine
from .stlr import LocalRefine

BRANCHES = {"both": ("lr", "hr"), "lr": ("lr",), "hr": ("hr",)}


@dataclass
class STINetOutput:
    frames: torch.Tensor  # (B, S, 3, 4h, 4w), unclamped
    phase1_lr: torch.Tensor | None  # (B, S, 3, h, w)
    phase1_hr: torch.Tensor | None  # (B, S, 3, 4h, 4w)
    times: torch.Tensor  # (S,)


def output_length(T: int, n_interp: int) -> int:
    return T + (T - 1) * n_interp


def kaiming_init(module: nn.Module, residual_scale: float = 0.1) -> None:
    """He-normal weights and zero biases for every conv/linear layer.

    Layers inside residual branches are further scaled by ``residual_scale``
    so the feature scale stays put through long stacks of blocks.
    """
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d, nn.Linear)):
            nn.init.kaiming_normal_(m.weight, a=0.1, nonlinearity="leaky_relu")
            if m.bias is not None:
                nn.init.zeros_(m.bias)
    branches = [m for m in module.modules() if isinstance(m, ResidualBlock)]
    if isinstance(getattr(module, "stlr", None), LocalRefine):
        branches += list(module.stlr.fuse.values())
    with torch.no_grad():
        for branch in branches:
            for m in branch.modules():
                if isinstance(m, nn.Conv2d):
                    m.weight.mul_(residual_scale)


class STINet(nn.Module):
    """Joint frame interpolation and 4x spatial upscaling.

    The input flow estimator is frozen; pass one in or attach it later with
    ``set_flow_estimator``. Phases run in this order: input flows, feature
    initialisation, motion representation, feature interpolation, phase-1
    projection, local refinement, global refinement, reconstruction.
    """

    def __init__(self, cfg: ModelConfig | None = None, flow_estimator: nn.Module | None = None):
        super().__init__()
        cfg = cfg or ModelConfig()
        self.cfg = cfg
        c = cfg.channels
        if cfg.branches not in BRANCHES:
            raise ValueError(f"unknown branches {cfg.branches!r}")
        if cfg.stfi.flow not in ("adapted", "unadapted", "none"):
            raise ValueError(f"unknown stfi.flow {cfg.stfi.flow!r}")
        if cfg.base not in ("none", "bicubic"):
            raise ValueError(f"unknown base {cfg.base!r}")
        self.branches = BRANCHES[cfg.branches]
        self.ssr = SpatialSR(c)
        self.mnet = MotionNet(c)
        self.pnet = InterpolationNet(c, cfg.stfi.num_shared_blocks, cfg.stfi.shared, self.branches)
        self.phase1 = Phase1Heads(c, self.branches)
        self.stlr = LocalRefine(c, self.branches, cfg.stlr.inet, cfg.stlr.offsets) if cfg.stlr.enabled else None
        self.stgr = (GlobalRefine(c, cfg.stgr.layers, vars(cfg.stgr.edge))
                     if cfg.stgr.enabled else None)
        self.reconstruct = Reconstructor(c, self.branches)
        kaiming_init(self)
        self._zero_heads()
        self.flow_estimator = freeze(flow_estimator or FlowEstimator())

    def _zero_heads(self):
        # offset heads, Inet heads and the last graph layer start at zero;
        # with a bicubic base the image heads do too, so training starts from it
        if self.cfg.base == "bicubic":
            heads = [getattr(self.reconstruct, n, None) for n in ("proj_lr", "proj_hr")]
            for head in heads + list(self.phase1.heads.values()):
                if head is not None:
                    nn.init.zeros_(head.weight)
                    nn.init.zeros_(head.bias)
        if self.stlr is not None:
            for pred in self.stlr.predict.values():
                nn.init.zeros_(pred.conv2.weight)
                nn.init.zeros_(pred.conv2.bias)
            if self.stlr.inet is not None:
                for head in (self.stlr.inet.head_lr, self.stlr.inet.head_hr):
                    nn.init.zeros_(head.weight)
                    nn.init.zeros_(head.bias)
        if self.stgr is not None:
            nn.init.ones_(self.stgr.edge_weight.linear.weight)
            nn.init.zeros_(self.stgr.edge_weight.linear.bias)
            last = self.stgr.layers[-1].linear
            nn.init.zeros_(last.weight)
            nn.init.zeros_(last.bias)

    def set_flow_estimator(self, estimator: nn.Module) -> None:
        self.flow_estimator = freeze(estimator)

    def train(self, mode: bool = True):
        super().train(mode)
        self.flow_estimator.eval()
        return self

    def input_flows(self, frames: torch.Tensor):
        """Forward and backward flows between consecutive input frames."""
        B, T = frames.shape[:2]
        a = frames[:, :-1].flatten(0, 1)
        b = frames[:, 1:].flatten(0, 1)
        both = self.flow_estimator(torch.cat([a, b]), torch.cat([b, a]))
        fwd, bwd = both.chunk(2)
        shape = (B, T - 1, 2, *frames.shape[-2:])
        return fwd.reshape(shape), bwd.reshape(shape)

    def motion_inputs(self, fwd, bwd, n_interp):
        """Flows from every intermediate time stamp to its two neighbours,
        ordered pair-major: (B, T-1, n, 2, h, w) each."""
        to_prev, to_next = [], []
        for t_prime in interpolation_times(-1.0, n_interp):
            if self.cfg.stfi.flow == "adapted":
                p, n = adapt_flow(fwd, bwd, t_prime, t=0.0)
            elif self.cfg.stfi.flow == "unadapted":
                p, n = bwd, fwd
            else:
                p, n = torch.zeros_like(bwd), torch.zeros_like(fwd)
            to_prev.append(p)
            to_next.append(n)
        return torch.stack(to_prev, 2), torch.stack(to_next, 2)

    def forward(self, lr_frames: torch.Tensor, n_interp: int = 1) -> STINetOutput:
        """``lr_frames``: (B, T, 3, h, w) with T >= 2."""
        if lr_frames.ndim != 5 or lr_frames.shape[2] != 3:
            raise ValueError(f"expected (B, T, 3, h, w) input, got {tuple(lr_frames.shape)}")
        B, T, _, h, w = lr_frames.shape
        if T < 2:
            raise ValueError("need at least two input frames")
        if n_interp < 1:
            raise ValueError("n_interp must be >= 1")
        n = n_interp
        fwd, bwd = self.input_flows(lr_frames)

        l0, h0 = self.ssr(lr_frames.flatten(0, 1))
        c = l0.shape[1]
        L_in = l0.view(B, T, c, h, w)
        H_in = h0.view(B, T, c, 4 * h, 4 * w)

        o_prev, o_next = self.motion_inputs(fwd, bwd, n)
        m = self.mnet(o_prev.flatten(0, 2), o_next.flatten(0, 2))

        def neighbours(seq):
            if seq is None:
                return None, None
            rep = lambda s: s.unsqueeze(2).expand(-1, -1, n, *s.shape[2:]).flatten(0, 2)
            return rep(seq[:, :-1]), rep(seq[:, 1:])

        use_lr, use_hr = "lr" in self.branches, "hr" in self.branches
        l_mid, h_mid = self.pnet(m, *neighbours(L_in if use_lr else None),
                                 *neighbours(H_in if use_hr else None))

        L = _interleave(L_in, l_mid, n) if use_lr else None
        H = _interleave(H_in, h_mid, n) if use_hr else None
        S = output_length(T, n)
        times = torch.tensor([2.0 * i + 2.0 * k / (n + 1) for i in range(T) for k in range(n + 1)][:S],
                             dtype=lr_frames.dtype, device=lr_frames.device)

        p1_l, p1_h = self.phase1(L.flatten(0, 1) if use_lr else None, H.flatten(0, 1) if use_hr else None)
        p1_l = p1_l.view(B, S, 3, h, w) if p1_l is not None else None
        p1_h = p1_h.view(B, S, 3, 4 * h, 4 * w) if p1_h is not None else None
        base = base_frames(lr_frames, n) if self.cfg.base == "bicubic" else None
        if base is not None:
            p1_l = p1_l + base_frames(lr_frames, n, upscale=False) if p1_l is not None else None
            p1_h = p1_h + base if p1_h is not None else None

        if self.stlr is not None:
            L, H = self.stlr(L, H)
        if self.stgr is not None:
            L, H = self.stgr(L, H, times)
        frames = self.reconstruct(L, H)
        if base is not None:
            frames = frames + base
        return STINetOutput(frames, p1_l, p1_h, times)


def base_frames(lr_frames: torch.Tensor, n_interp: int, upscale: bool = True) -> torch.Tensor:
    """Bicubic 4x inputs, with in-between frames blended linearly in time."""
    h, w = lr_frames.shape[-2:]
    up = resize_bicubic(lr_frames, 4 * h, 4 * w, clamp=False) if upscale else lr_frames
    k = torch.arange(1, n_interp + 1, dtype=up.dtype, device=up.device).view(1, 1, -1, 1, 1, 1) / (n_interp + 1)
    mid = (1 - k) * up[:, :-1, None] + k * up[:, 1:, None]
    return _interleave(up, mid.flatten(1, 2).flatten(0, 1), n_interp)


def _interleave(given: torch.Tensor, mid: torch.Tensor, n: int) -> torch.Tensor:
    """Merge T given and (T-1)*n interpolated features into time order."""
    B, T = given.shape[:2]
    mid = mid.view(B, T - 1, n, *mid.shape[1:])
    body = torch.cat([given[:, :-1, None], mid], dim=2).flatten(1, 2)
    return torch.cat([body, given[:, -1:]], dim=1)
