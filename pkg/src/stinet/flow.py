"""Optical flow: a small encoder-decoder estimator, linear flow adaptation to
intermediate time stamps, and differentiable backward warping.

Flows are ``(B, 2, H, W)`` tensors in pixels, channel 0 the x displacement
and channel 1 the y displacement. A flow from ``a`` to ``b`` satisfies
``warp_backward(b, flow) ~= a``.
"""
from __future__ import annotations

import hashlib
import math
import json
import logging
import os
import struct
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .data import SyntheticScene, random_motion, resize_bicubic

log = logging.getLogger(__name__)


def _conv(cin, cout, stride=1):
    return nn.Sequential(nn.Conv2d(cin, cout, 3, stride, 1), nn.LeakyReLU(0.1))


def correlation(f1: torch.Tensor, f2: torch.Tensor, radius: int) -> torch.Tensor:
    """Cost volume of channel-mean dot products over a (2r+1)^2 displacement window.

    One row-by-row matrix product per vertical displacement; the horizontal
    band is then picked out of the (W, W + 2r) product.
    """
    B, C, H, W = f1.shape
    D = 2 * radius + 1
    f2p = F.pad(f2, (radius,) * 4)
    a = f1.permute(0, 2, 3, 1)  # (B, H, W, C)
    band = (torch.arange(W, device=f1.device)[:, None] + torch.arange(D, device=f1.device)).expand(B, H, W, D)
    costs = []
    for dy in range(D):
        full = a @ f2p[:, :, dy:dy + H].transpose(1, 2)  # (B, H, W, W + 2r)
        costs.append(full.gather(3, band))
    return torch.stack(costs, dim=3).flatten(3).permute(0, 3, 1, 2) / C


class FlowEstimator(nn.Module):
    """Encoder-decoder flow regressor with three stride-2 stages.

    Both frames go through a shared encoder. At 1/4 scale a cost volume of
    normalised features (radius 4, i.e. +-16 px at full resolution) gives a
    soft-argmax coarse flow; the decoder upsamples it and adds a learned
    residual. Inputs are replicate-padded to a multiple of 8.
    """

    differentiable = True
    ARCH = "corr-softargmax-v2"  # part of the weight cache key

    def __init__(self, widths=(16, 32, 48, 64), radius: int = 4):
        super().__init__()
        w0, w1, w2, w3 = widths
        self.radius = radius
        ncorr = (2 * radius + 1) ** 2
        d = torch.arange(-radius, radius + 1, dtype=torch.float32)
        dy, dx = torch.meshgrid(d, d, indexing="ij")
        self.register_buffer("disp", torch.stack([dx.flatten(), dy.flatten()]), persistent=False)
        self.log_beta = nn.Parameter(torch.tensor(math.log(10.0)))
        self.enc0 = nn.Sequential(_conv(3, w0), _conv(w0, w0))
        self.enc1 = nn.Sequential(_conv(w0, w1, 2), _conv(w1, w1))
        self.enc2 = nn.Sequential(_conv(w1, w2, 2), _conv(w2, w2))
        self.ctx = nn.Sequential(_conv(ncorr + w2 + 2, w2), _conv(w2, w2))
        self.enc3 = nn.Sequential(_conv(w2, w3, 2), _conv(w3, w3))
        self.dec2 = nn.Sequential(_conv(w3 + w2, w2), _conv(w2, w2))
        self.dec1 = nn.Sequential(_conv(w2 + 2 * w1 + 2, w1), _conv(w1, w1))
        self.dec0 = nn.Sequential(_conv(w1 + 2 * w0 + 2, w0), _conv(w0, w0))
        self.out = nn.Conv2d(w0, 2, 3, 1, 1)
        nn.init.zeros_(self.out.weight)
        nn.init.zeros_(self.out.bias)

    def features(self, x: torch.Tensor):
        """Per-frame encoder pyramid; reusable across every pair a frame is in."""
        h, w = x.shape[-2:]
        x = x - 0.5
        if -h % 8 or -w % 8:
            x = F.pad(x, (0, -w % 8, 0, -h % 8), mode="replicate")
        e0 = self.enc0(x)
        e1 = self.enc1(e0)
        e2 = self.enc2(e1)
        return e0, e1, e2, F.normalize(e2, dim=1), (h, w)

    def decode(self, fa, fb) -> torch.Tensor:
        """Flow from the frame encoded as ``fa`` to the one encoded as ``fb``."""
        e0a, e1a, e2a, na, (h, w) = fa
        e0b, e1b, _, nb, _ = fb
        # channel mean * C = cosine similarity
        corr = correlation(na, nb, self.radius) * na.shape[1]
        prob = torch.softmax(corr * self.log_beta.exp(), dim=1)
        coarse = 4 * torch.einsum("bkhw,ck->bchw", prob, self.disp.to(prob.dtype))
        c2 = self.ctx(torch.cat([corr, e2a, coarse / 4], 1))
        c3 = self.enc3(c2)
        up = lambda t, ref: F.interpolate(t, size=ref.shape[-2:], mode="bilinear", align_corners=False)
        d2 = self.dec2(torch.cat([up(c3, c2), c2], 1))
        d1 = self.dec1(torch.cat([up(d2, e1a), e1a, e1b, up(coarse, e1a) / 4], 1))
        coarse0 = up(coarse, e0a)
        d0 = self.dec0(torch.cat([up(d1, e0a), e0a, e0b, coarse0 / 4], 1))
        return (coarse0 + self.out(d0))[..., :h, :w]

    def forward(self, a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
        B = a.shape[0]
        feats = self.features(torch.cat([a, b], 0))
        split = lambda i: tuple(f[i * B:(i + 1) * B] if torch.is_tensor(f) else f for f in feats)
        return self.decode(split(0), split(1))


def estimate_flow(estimator: nn.Module, frame_a: torch.Tensor, frame_b: torch.Tensor) -> torch.Tensor:
    """Flow from ``frame_a`` to ``frame_b``; accepts (3, H, W) or (B, 3, H, W)."""
    if frame_a.shape != frame_b.shape:
        raise ValueError(f"frame shapes differ: {tuple(frame_a.shape)} vs {tuple(frame_b.shape)}")
    single = frame_a.ndim == 3
    if single:
        frame_a, frame_b = frame_a[None], frame_b[None]
    flow = estimator(frame_a, frame_b)
    return flow[0] if single else flow


def adapt_flow(o_fwd: torch.Tensor, o_bwd: torch.Tensor, t_prime: float, t: float = 0.0):
    """Scale the flows between frames ``t-1`` and ``t+1`` to flows anchored at
    ``t_prime``, assuming linear motion over the interval.

    Returns ``(flow t'->t-1, flow t'->t+1)``.
    """
    if not (t - 1 < t_prime < t + 1):
        raise ValueError(f"t' = {t_prime} outside the open interval ({t - 1}, {t + 1})")
    to_prev = (t_prime - (t - 1)) / 2 * o_bwd
    to_next = ((t + 1) - t_prime) / 2 * o_fwd
    return to_prev, to_next


def interpolation_times(t_prev: float, n: int) -> list[float]:
    """Uniformly spaced time stamps of ``n`` frames between ``t_prev`` and ``t_prev + 2``."""
    if n < 1:
        raise ValueError("n must be >= 1")
    return [t_prev + 2 * k / (n + 1) for k in range(1, n + 1)]


def warp_backward(x: torch.Tensor, flow: torch.Tensor) -> torch.Tensor:
    """Bilinearly sample ``x`` at ``p + flow(p)`` with border clamping."""
    if x.shape[-2:] != flow.shape[-2:] or flow.shape[-3] != 2:
        raise ValueError(f"flow {tuple(flow.shape)} does not match map {tuple(x.shape)}")
    B, _, H, W = x.shape
    ys, xs = torch.meshgrid(torch.arange(H, dtype=x.dtype, device=x.device),
                            torch.arange(W, dtype=x.dtype, device=x.device), indexing="ij")
    gx = 2 * (xs + flow[:, 0]) / max(W - 1, 1) - 1
    gy = 2 * (ys + flow[:, 1]) / max(H - 1, 1) - 1
    grid = torch.stack([gx, gy], dim=-1)
    return F.grid_sample(x, grid, mode="bilinear", padding_mode="border", align_corners=True)


# ---------------------------------------------------------------------------
# training on synthetic scenes with analytic flow


def _flow_pool(num_clips, H, W, T, seed, max_speed):
    clips, flows = [], []
    for i in range(num_clips):
        rng = np.random.default_rng([seed, 7919, i])
        scene = SyntheticScene.sample(int(rng.integers(2**31)), H, W, random_motion(rng, max_speed), T=T)
        clips.append(torch.from_numpy(np.stack([scene.render(float(t)) for t in range(T)])).float())
        flows.append({(a, b): torch.from_numpy(scene.flow(a, b)).float()
                      for a in range(T) for b in range(T)})
    return clips, flows


def train_flow_estimator(iters: int = 3000, batch_size: int = 8, size: int = 64, T: int = 7,
                         num_clips: int = 96, max_speed: float = 2.5, lr: float = 5e-4,
                         seed: int = 0, degrade: float = 0.0, crop: int | None = None,
                         noise: float = 0.0, progress: bool = False) -> FlowEstimator:
    """Supervised training on synthetic clips at full and quarter resolution.

    Quarter-resolution pairs use bicubic-degraded frames with the ground-truth
    flow area-averaged and divided by four. With ``degrade > 0`` each
    full-resolution frame is, with that probability, replaced by a bicubic
    down-and-up copy (2x or 4x), so the estimate depends on motion rather than
    on sharpness. ``crop`` trains every other full-resolution step on random
    crops of that size; ``noise`` adds Gaussian noise of random strength up to
    that value.
    """
    torch.manual_seed(seed)
    rng = np.random.default_rng(seed)
    clips, flows = _flow_pool(num_clips, size, size, T, seed, max_speed)
    lr_clips = [resize_bicubic(c, size // 4, size // 4) for c in clips]
    soft = [[resize_bicubic(resize_bicubic(c, size // f, size // f), size, size) for c in clips] for f in (2, 4)]
    net = FlowEstimator()
    opt = torch.optim.Adam(net.parameters(), lr=lr)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, iters)
    for it in range(iters):
        low = it % 3 == 2
        idx = rng.integers(0, num_clips, batch_size)
        pairs = rng.integers(0, T, size=(batch_size, 2))

        def frame(i, t):
            if low:
                return lr_clips[i][t]
            if degrade and rng.random() < degrade:
                return soft[int(rng.integers(2))][i][t]
            return clips[i][t]

        a = torch.stack([frame(i, p) for i, (p, _) in zip(idx, pairs)])
        b = torch.stack([frame(i, q) for i, (_, q) in zip(idx, pairs)])
        gt = torch.stack([flows[i][(int(p), int(q))] for i, (p, q) in zip(idx, pairs)])
        if low:
            gt = F.avg_pool2d(gt, 4) / 4
        elif crop and it % 3 == 1:
            y, x = (int(v) for v in rng.integers(0, size - crop + 1, 2))
            a, b, gt = (v[..., y:y + crop, x:x + crop] for v in (a, b, gt))
        if noise:
            sigma = torch.from_numpy(rng.uniform(0, noise, (batch_size, 1, 1, 1))).float()
            a = a + sigma * torch.randn_like(a)
            b = b + sigma * torch.randn_like(b)
        loss = (net(a, b) - gt).square().sum(1).add(1e-6).sqrt().mean()
        opt.zero_grad()
        loss.backward()
        opt.step()
        sched.step()
        if progress and it % 200 == 0:
            log.info("flow iter %d loss %.4f", it, loss.item())
    net.eval()
    return net


_DEFAULT_RECIPE = dict(iters=6000, batch_size=8, size=64, T=7, num_clips=96, max_speed=2.5, lr=5e-4, seed=0,
                       degrade=0.5, crop=32, noise=0.02)


def cache_dir() -> Path:
    return Path(os.environ.get("STINET_CACHE", Path.home() / ".cache" / "stinet"))


def default_flow_estimator(**overrides) -> FlowEstimator:
    """The desk-scale estimator, trained once per recipe and cached on disk."""
    recipe = {**_DEFAULT_RECIPE, **overrides}
    keyed = {**recipe, "arch": FlowEstimator.ARCH}
    key = hashlib.sha256(json.dumps(keyed, sort_keys=True).encode()).hexdigest()[:12]
    path = cache_dir() / f"flow_{key}.pt"
    net = FlowEstimator()
    if path.exists():
        net.load_state_dict(torch.load(path, map_location="cpu", weights_only=True))
    else:
        log.info("training desk flow estimator -> %s", path)
        net = train_flow_estimator(**recipe)
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_suffix(f".tmp{os.getpid()}")
        torch.save(net.state_dict(), tmp)
        tmp.replace(path)
    net.eval()
    return freeze(net)


def freeze(net: nn.Module) -> nn.Module:
    for p in net.parameters():
        p.requires_grad_(False)
    return net


# ---------------------------------------------------------------------------
# debugging output


def dump_flow(flow: torch.Tensor, path: str | Path) -> None:
    """Write int32 H, W followed by row-major float32 (dx, dy) pairs."""
    f = flow.detach().cpu().float()
    if f.ndim == 4:
        f = f[0]
    _, H, W = f.shape
    with open(path, "wb") as fh:
        fh.write(struct.pack("<ii", H, W))
        fh.write(f.permute(1, 2, 0).contiguous().numpy().astype("<f4").tobytes())


def load_flow(path: str | Path) -> torch.Tensor:
    raw = Path(path).read_bytes()
    H, W = struct.unpack("<ii", raw[:8])
    if len(raw) != 8 + H * W * 8:
        raise ValueError(f"{path}: expected {H}x{W} flow, file has {len(raw)} bytes")
    values = np.frombuffer(raw, dtype="<f4", offset=8).reshape(H, W, 2)
    return torch.from_numpy(values.copy()).permute(2, 0, 1)


def flow_to_color(flow: torch.Tensor, max_mag: float | None = None) -> np.ndarray:
    """Colour-wheel rendering: hue is direction, saturation is magnitude."""
    from matplotlib.colors import hsv_to_rgb

    f = flow.detach().cpu().double().numpy()
    if f.ndim == 4:
        f = f[0]
    mag = np.hypot(f[0], f[1])
    max_mag = max_mag or max(mag.max(), 1e-8)
    hsv = np.stack([
        (np.arctan2(-f[1], -f[0]) / np.pi + 1) / 2,
        np.clip(mag / max_mag, 0, 1),
        np.ones_like(mag),
    ], axis=-1)
    return np.rint(hsv_to_rgb(hsv) * 255).astype(np.uint8)


def save_flow_png(flow: torch.Tensor, path: str | Path, max_mag: float | None = None) -> None:
    from PIL import Image

    Image.fromarray(flow_to_color(flow, max_mag)).save(path)
