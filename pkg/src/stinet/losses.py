"""Training objective: reconstruction, phase-1 reconstruction, perceptual and
motion-consistency terms.

Every term is a mean over its elements rather than a raw sum, so weights
keep their meaning at any resolution.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, fields

import torch
import torch.nn as nn


class NonFiniteLossError(FloatingPointError):
    pass


def _check_same(a, b):
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")


def loss_rec(pred: torch.Tensor, gt: torch.Tensor) -> torch.Tensor:
    _check_same(pred, gt)
    return (pred - gt).square().mean()


# ---------------------------------------------------------------------------
# perceptual features


class RandomConvExtractor(nn.Module):
    """Fixed, seeded stack of four 3x3 convolutions with ReLU (one 2x pool)."""

    def __init__(self, seed: int = 0, widths=(16, 16, 32, 32)):
        super().__init__()
        g = torch.Generator().manual_seed(seed)
        layers, cin = [], 3
        for k, w in enumerate(widths):
            conv = nn.Conv2d(cin, w, 3, 1, 1)
            with torch.no_grad():
                conv.weight.normal_(0, math.sqrt(2 / (cin * 9)), generator=g)
                conv.bias.zero_()
            layers += [conv, nn.ReLU()]
            if k == 1:
                layers.append(nn.MaxPool2d(2))
            cin = w
        self.features = nn.Sequential(*layers)
        self.requires_grad_(False)
        self.eval()

    def forward(self, x):
        return self.features(x - 0.5)

    def train(self, mode: bool = True):
        return super().train(False)


class IdentityExtractor(nn.Module):
    def forward(self, x):
        return x


def load_extractor(path: str, arch: str = "random") -> nn.Module:
    """Load externally supplied weights into a frozen extractor.

    ``arch="vgg19"`` builds torchvision's VGG-19 feature stack up to relu5_4
    and expects a state dict for ``torchvision.models.vgg19``.
    """
    state = torch.load(path, map_location="cpu", weights_only=True)
    if arch == "vgg19":
        from torchvision.models import vgg19

        net = vgg19()
        net.load_state_dict(state)
        mean = torch.tensor([0.485, 0.456, 0.406]).view(1, 3, 1, 1)
        std = torch.tensor([0.229, 0.224, 0.225]).view(1, 3, 1, 1)
        body = net.features[:36]

        class _VGG(nn.Module):
            def __init__(self):
                super().__init__()
                self.body = body
                self.register_buffer("mean", mean)
                self.register_buffer("std", std)

            def forward(self, x):
                return self.body((x - self.mean) / self.std)

        extractor = _VGG()
    else:
        extractor = RandomConvExtractor()
        extractor.load_state_dict(state)
    extractor.requires_grad_(False)
    return extractor.eval()


def loss_perceptual(pred: torch.Tensor, gt: torch.Tensor, extractor: nn.Module) -> torch.Tensor:
    _check_same(pred, gt)
    p = pred.reshape(-1, *pred.shape[-3:])
    with torch.no_grad():
        g = extractor(gt.reshape(-1, *gt.shape[-3:]))
    return (extractor(p) - g).square().mean()


# ---------------------------------------------------------------------------
# motion consistency


def flow_pairs(N: int, mode: str = "all") -> list[tuple[int, int]]:
    """Ordered frame pairs supervised by the absolute flow term."""
    if mode == "all":
        return [(t, p) for t in range(N) for p in range(N) if t != p]
    if mode == "adjacent":
        return [(t, t + 1) for t in range(N - 1)] + [(t + 1, t) for t in range(N - 1)]
    raise ValueError(f"unknown pair mode {mode!r}")


def relative_pairs(N: int) -> tuple[list[tuple[int, int]], list[tuple[int, int]]]:
    """(t-1 -> t) and (t-1 -> t+1) pairs for every interior frame t."""
    return [(t - 1, t) for t in range(1, N - 1)], [(t - 1, t + 1) for t in range(1, N - 1)]


def compute_flows(estimator: nn.Module, frames: torch.Tensor, pairs) -> dict:
    """Flows for ``pairs`` of a (B, N, 3, H, W) stack, evaluated in one batch.

    Estimators exposing ``features``/``decode`` encode each frame only once.
    """
    if not pairs:
        return {}
    B, N = frames.shape[:2]
    if hasattr(estimator, "features") and hasattr(estimator, "decode"):
        feats = estimator.features(frames.flatten(0, 1))
        pick = lambda idx: tuple(
            f.view(B, N, *f.shape[1:])[:, idx].transpose(0, 1).flatten(0, 1) if torch.is_tensor(f) else f
            for f in feats)
        flows = estimator.decode(pick([a for a, _ in pairs]), pick([b for _, b in pairs]))
    else:
        src = torch.stack([frames[:, a] for a, _ in pairs], 0).flatten(0, 1)
        dst = torch.stack([frames[:, b] for _, b in pairs], 0).flatten(0, 1)
        flows = estimator(src, dst)
    flows = flows.view(len(pairs), B, 2, *frames.shape[-2:])
    return {pair: flows[k] for k, pair in enumerate(pairs)}


def loss_abs(pred_flows: dict, gt_flows: dict, norm: str = "l2") -> torch.Tensor:
    if pred_flows.keys() != gt_flows.keys():
        raise ValueError("predicted and ground-truth flows cover different pairs")
    pred = torch.stack([pred_flows[k] for k in pred_flows])
    gt = torch.stack([gt_flows[k] for k in pred_flows])
    diff = pred - gt
    if norm == "l2":
        return diff.square().mean()
    if norm == "l1":
        return diff.abs().mean()
    raise ValueError(f"unknown norm {norm!r}")


def loss_rel(short: torch.Tensor, long: torch.Tensor) -> torch.Tensor:
    """Hinge on motion accumulation: mean of max(sgn(s) * (s - l), 0).

    ``short`` holds flows t-1 -> t and ``long`` flows t-1 -> t+1 (any
    matching shapes). sgn(0) = 0, so static elements contribute nothing.
    """
    _check_same(short, long)
    return torch.clamp(torch.sign(short) * (short - long), min=0).mean()


def loss_rel_strong(short, long, gt_short, gt_long) -> torch.Tensor:
    """Squared error between predicted and ground-truth flow differences."""
    _check_same(short, gt_short)
    return ((short - long) - (gt_short - gt_long)).square().mean()


# ---------------------------------------------------------------------------
# total


def _scalar(v) -> float:
    return float(v.detach()) if torch.is_tensor(v) else float(v)


@dataclass
class LossReport:
    l_rec: torch.Tensor | float
    l_rec_phase1: torch.Tensor | float
    l_per: torch.Tensor | float
    l_abs: torch.Tensor | float
    l_rel: torch.Tensor | float
    total: torch.Tensor | float

    def as_dict(self) -> dict[str, float]:
        return {f.name: _scalar(getattr(self, f.name)) for f in fields(self)}


def total_loss(l_rec, l_rec_phase1, l_per, l_abs, l_rel, lambda1: float = 0.1,
               lambda2: float = 0.1) -> LossReport:
    parts = dict(l_rec=l_rec, l_rec_phase1=l_rec_phase1, l_per=l_per, l_abs=l_abs, l_rel=l_rel)
    bad = [k for k, v in parts.items() if not math.isfinite(_scalar(v))]
    if bad:
        raise NonFiniteLossError(f"non-finite loss components: {', '.join(bad)}")
    total = l_rec + l_rec_phase1 + lambda1 * l_per + lambda2 * (l_abs + l_rel)
    return LossReport(**parts, total=total)


class Objective(nn.Module):
    """Full training loss for one model output.

    Args:
        flow_estimator: frozen, differentiable estimator shared by predicted
            and ground-truth flows.
        extractor: perceptual feature extractor.
        lambda1, lambda2: weights of the perceptual and motion terms.
        abs_mode: "on" (all pairs), "adjacent" or "off".
        abs_norm: "l2" or "l1".
        rel_mode: "on", "strong" or "off".
    """

    def __init__(self, flow_estimator: nn.Module | None, extractor: nn.Module | None = None,
                 lambda1: float = 0.1, lambda2: float = 0.1, abs_mode: str = "on",
                 abs_norm: str = "l2", rel_mode: str = "on"):
        super().__init__()
        self.flow_estimator = flow_estimator
        self.extractor = extractor if extractor is not None else RandomConvExtractor()
        self.lambda1, self.lambda2 = lambda1, lambda2
        self.abs_mode, self.abs_norm, self.rel_mode = abs_mode, abs_norm, rel_mode

    def motion_terms(self, pred: torch.Tensor, gt: torch.Tensor):
        N = pred.shape[1]
        zero = pred.new_zeros(())
        abs_pairs = [] if self.abs_mode == "off" else flow_pairs(N, "all" if self.abs_mode == "on" else "adjacent")
        short, long = relative_pairs(N) if self.rel_mode != "off" else ([], [])
        needed = list(dict.fromkeys(abs_pairs + short + long))
        if not needed or self.lambda2 == 0:
            return zero, zero
        pred_f = compute_flows(self.flow_estimator, pred, needed)
        gt_needed = abs_pairs + (short + long if self.rel_mode == "strong" else [])
        with torch.no_grad():
            gt_f = compute_flows(self.flow_estimator, gt, list(dict.fromkeys(gt_needed)))
        l_abs = loss_abs({k: pred_f[k] for k in abs_pairs}, {k: gt_f[k] for k in abs_pairs},
                         self.abs_norm) if abs_pairs else zero
        l_rel = zero
        if short:
            s = torch.stack([pred_f[k] for k in short])
            lg = torch.stack([pred_f[k] for k in long])
            if self.rel_mode == "strong":
                l_rel = loss_rel_strong(s, lg, torch.stack([gt_f[k] for k in short]),
                                        torch.stack([gt_f[k] for k in long]))
            else:
                l_rel = loss_rel(s, lg)
        return l_abs, l_rel

    def forward(self, output, hr_targets: torch.Tensor, lr_targets: torch.Tensor) -> LossReport:
        pred = output.frames
        l_rec = loss_rec(pred, hr_targets)
        l_p1 = pred.new_zeros(())
        if output.phase1_lr is not None:
            l_p1 = l_p1 + loss_rec(output.phase1_lr, lr_targets)
        if output.phase1_hr is not None:
            l_p1 = l_p1 + loss_rec(output.phase1_hr, hr_targets)
        l_per = loss_perceptual(pred, hr_targets, self.extractor) if self.lambda1 else pred.new_zeros(())
        l_abs, l_rel = self.motion_terms(pred, hr_targets)
        return total_loss(l_rec, l_p1, l_per, l_abs, l_rel, self.lambda1, self.lambda2)
