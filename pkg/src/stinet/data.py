"""Video clips, synthetic scenes, bicubic degradation and augmentation.

Frames are stored channel-first, ``(T, 3, H, W)`` float32 in ``[0, 1]``,
which is what the network modules consume.
"""
from __future__ import annotations

import functools
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from PIL import Image

SCALE = 4


@dataclass
class VideoClip:
    frames: torch.Tensor  # (T, 3, H, W)
    frame_rate_tag: str | None = None

    def __post_init__(self):
        f = self.frames
        if f.ndim != 4 or f.shape[1] != 3:
            raise ValueError(f"expected (T, 3, H, W) frames, got {tuple(f.shape)}")
        if f.shape[0] < 2:
            raise ValueError("a clip needs at least 2 frames")
        if f.numel() and (f.min() < 0 or f.max() > 1):
            raise ValueError("frame values must lie in [0, 1]")

    @property
    def T(self) -> int:
        return self.frames.shape[0]

    @property
    def H(self) -> int:
        return self.frames.shape[2]

    @property
    def W(self) -> int:
        return self.frames.shape[3]

    def __len__(self):
        return self.T


@dataclass
class TrainingSample:
    lr_inputs: VideoClip   # degraded even-position frames (1st, 3rd, ...)
    hr_targets: VideoClip
    lr_targets: VideoClip  # degraded version of every target frame


# ---------------------------------------------------------------------------
# synthetic scenes


@dataclass
class MotionSpec:
    """Motion and content parameters of a synthetic scene.

    ``velocity`` is in pixels per frame ``(vx, vy)`` and is shared by every
    shape unless ``velocity_jitter`` perturbs it per shape.
    """

    velocity: tuple[float, float] = (2.0, 0.0)
    num_shapes: int = 3
    background: str = "texture"  # or "flat"
    textured_shapes: bool = True
    velocity_jitter: float = 0.0
    bg_velocity: tuple[float, float] = (0.0, 0.0)


@dataclass
class _Shape:
    kind: str  # "disc" | "rect"
    center: np.ndarray  # position at t=0, (x, y)
    size: np.ndarray  # radius or half extents (hx, hy)
    velocity: np.ndarray
    colors: np.ndarray  # (2, 3)
    freq: np.ndarray  # stripe wave vector, cycles / px
    phase: float
    textured: bool


@dataclass
class SyntheticScene:
    """Analytic scene of textured shapes moving linearly over a background.

    Every frame is rendered from continuous functions of position, so
    sub-pixel motion is exact and ground-truth flow is known everywhere.
    """

    H: int
    W: int
    shapes: list[_Shape]
    bg_colors: np.ndarray
    bg_waves: np.ndarray  # (k, 4): fx, fy, phase, weight
    bg_velocity: np.ndarray
    flat_background: bool = False
    _grid: tuple = field(init=False, repr=False)

    def __post_init__(self):
        ys, xs = np.mgrid[0:self.H, 0:self.W].astype(np.float64)
        self._grid = (xs, ys)

    @classmethod
    def sample(cls, seed: int, H: int, W: int, motion: MotionSpec | None = None, T: int = 7):
        motion = motion or MotionSpec()
        rng = np.random.default_rng(seed)
        v = np.asarray(motion.velocity, dtype=np.float64)
        shapes = []
        for _ in range(motion.num_shapes):
            kind = "disc" if rng.random() < 0.5 else "rect"
            scale = min(H, W)
            if kind == "disc":
                size = np.array([rng.uniform(0.1, 0.2) * scale] * 2)
            else:
                size = rng.uniform(0.08, 0.2, size=2) * scale
            sv = v + motion.velocity_jitter * rng.standard_normal(2)
            # keep the whole trajectory inside the frame when possible
            travel = np.abs(sv) * (T - 1) / 2
            mid = np.empty(2)
            for ax, extent in enumerate((W, H)):
                lo = size[ax] + travel[ax]
                hi = extent - 1 - size[ax] - travel[ax]
                mid[ax] = rng.uniform(lo, hi) if hi > lo else (extent - 1) / 2
            center = mid - sv * (T - 1) / 2
            angle = rng.uniform(0, 2 * np.pi)
            period = rng.uniform(6.0, 14.0)
            shapes.append(_Shape(
                kind=kind,
                center=center,
                size=size,
                velocity=sv,
                colors=rng.uniform(0.05, 0.95, size=(2, 3)),
                freq=np.array([np.cos(angle), np.sin(angle)]) / period,
                phase=rng.uniform(0, 2 * np.pi),
                textured=motion.textured_shapes,
            ))
        bg_waves = np.column_stack([
            rng.uniform(-1 / 12, 1 / 12, size=(4, 2)),
            rng.uniform(0, 2 * np.pi, 4),
            rng.uniform(0.5, 1.0, 4),
        ])
        return cls(
            H=H, W=W, shapes=shapes,
            bg_colors=rng.uniform(0.15, 0.85, size=(2, 3)),
            bg_waves=bg_waves,
            bg_velocity=np.asarray(motion.bg_velocity, dtype=np.float64),
            flat_background=motion.background == "flat",
        )

    def _background(self, t: float) -> np.ndarray:
        xs, ys = self._grid
        if self.flat_background:
            return np.broadcast_to(self.bg_colors[0][:, None, None], (3, self.H, self.W)).copy()
        x = xs - self.bg_velocity[0] * t
        y = ys - self.bg_velocity[1] * t
        acc = np.zeros_like(xs)
        for fx, fy, ph, w in self.bg_waves:
            acc += w * np.sin(2 * np.pi * (fx * x + fy * y) + ph)
        mix = 0.5 + 0.5 * acc / self.bg_waves[:, 3].sum()
        c0, c1 = self.bg_colors
        return c0[:, None, None] * (1 - mix) + c1[:, None, None] * mix

    def _alpha(self, shape: _Shape, t: float) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        xs, ys = self._grid
        c = shape.center + shape.velocity * t
        dx, dy = xs - c[0], ys - c[1]
        if shape.kind == "disc":
            sd = np.hypot(dx, dy) - shape.size[0]
        else:
            sd = np.maximum(np.abs(dx) - shape.size[0], np.abs(dy) - shape.size[1])
        # one-pixel anti-aliased edge
        return np.clip(0.5 - sd, 0.0, 1.0), dx, dy

    def render(self, t: float) -> np.ndarray:
        img = self._background(t)
        for shape in self.shapes:
            alpha, dx, dy = self._alpha(shape, t)
            if shape.textured:
                s = 0.5 + 0.5 * np.sin(2 * np.pi * (shape.freq[0] * dx + shape.freq[1] * dy) + shape.phase)
            else:
                s = np.zeros_like(dx)
            c0, c1 = shape.colors
            color = c0[:, None, None] * (1 - s) + c1[:, None, None] * s
            img = img * (1 - alpha) + color * alpha
        return np.clip(img, 0.0, 1.0)

    def object_mask(self, t: float) -> np.ndarray:
        """Boolean (H, W) mask of pixels covered by any shape at time ``t``."""
        mask = np.zeros((self.H, self.W), dtype=bool)
        for shape in self.shapes:
            mask |= self._alpha(shape, t)[0] >= 0.5
        return mask

    def flow(self, t_a: float, t_b: float) -> np.ndarray:
        """Ground-truth flow (2, H, W) from the frame at ``t_a`` to ``t_b``.

        A pixel takes the displacement of the front-most surface visible at
        ``t_a``.
        """
        dt = t_b - t_a
        out = np.empty((2, self.H, self.W))
        out[0] = self.bg_velocity[0] * dt
        out[1] = self.bg_velocity[1] * dt
        for shape in self.shapes:
            inside = self._alpha(shape, t_a)[0] >= 0.5
            out[0][inside] = shape.velocity[0] * dt
            out[1][inside] = shape.velocity[1] * dt
        return out

    def clip(self, T: int) -> VideoClip:
        frames = np.stack([self.render(float(t)) for t in range(T)])
        return VideoClip(torch.from_numpy(frames).float())


def generate_synthetic_clip(seed: int, T: int = 7, H: int = 64, W: int = 64,
                            motion: MotionSpec | None = None) -> VideoClip:
    if T < 3:
        raise ValueError("synthetic clips need T >= 3")
    if H % SCALE or W % SCALE:
        raise ValueError(f"H and W must be divisible by {SCALE}, got {H}x{W}")
    return SyntheticScene.sample(seed, H, W, motion, T=T).clip(T)


def random_motion(rng: np.random.Generator, max_speed: float = 2.0, num_shapes: int = 3) -> MotionSpec:
    speed = rng.uniform(0.25, max_speed)
    angle = rng.uniform(0, 2 * np.pi)
    return MotionSpec(
        velocity=(speed * math.cos(angle), speed * math.sin(angle)),
        num_shapes=num_shapes,
        velocity_jitter=0.25 * speed,
    )


def synthetic_dataset(num_clips: int, T: int = 7, H: int = 64, W: int = 64,
                      seed: int = 0, max_speed: float = 2.0) -> list[VideoClip]:
    """``num_clips`` clips with a random velocity each; deterministic in ``seed``."""
    clips = []
    for i in range(num_clips):
        rng = np.random.default_rng([seed, i])
        motion = random_motion(rng, max_speed)
        clips.append(generate_synthetic_clip(int(rng.integers(2**31)), T, H, W, motion))
    return clips


# ---------------------------------------------------------------------------
# bicubic resampling


def _cubic(x: np.ndarray, a: float) -> np.ndarray:
    ax = np.abs(x)
    ax2, ax3 = ax ** 2, ax ** 3
    return np.where(
        ax <= 1, (a + 2) * ax3 - (a + 3) * ax2 + 1,
        np.where(ax < 2, a * ax3 - 5 * a * ax2 + 8 * a * ax - 4 * a, 0.0),
    )


@functools.lru_cache(maxsize=64)
def _resize_matrix(in_len: int, out_len: int, a: float = -0.5, antialias: bool = True) -> np.ndarray:
    """Dense (out_len, in_len) bicubic resampling matrix.

    Half-pixel-centred sampling, kernel widened by the scale when shrinking
    (anti-aliasing) and symmetric reflection at the borders.
    """
    scale = out_len / in_len
    width = 4.0
    if scale < 1 and antialias:
        width /= scale
        kernel = lambda x: scale * _cubic(scale * x, a)
    else:
        kernel = lambda x: _cubic(x, a)
    u = (np.arange(out_len) + 0.5) / scale - 0.5
    left = np.floor(u - width / 2).astype(int) + 1
    taps = int(math.ceil(width)) + 2
    idx = left[:, None] + np.arange(-1, taps - 1)
    w = kernel(u[:, None] - idx)
    w /= w.sum(axis=1, keepdims=True)
    mirror = np.concatenate([np.arange(in_len), np.arange(in_len)[::-1]])
    idx = mirror[np.mod(idx, 2 * in_len)]
    m = np.zeros((out_len, in_len))
    np.add.at(m, (np.repeat(np.arange(out_len), idx.shape[1]), idx.ravel()), w.ravel())
    return m


def resize_bicubic(frames: torch.Tensor, out_h: int, out_w: int, a: float = -0.5,
                   clamp: bool = True) -> torch.Tensor:
    """Resize ``(..., H, W)`` frames with the bicubic kernel of coefficient ``a``.

    Frames are processed one at a time in float64 so a frame's result never
    depends on what it is batched with.
    """
    H, W = frames.shape[-2:]
    mh = torch.from_numpy(_resize_matrix(H, out_h, a))
    mw = torch.from_numpy(_resize_matrix(W, out_w, a))
    flat = frames.reshape(-1, *frames.shape[-3:]) if frames.ndim >= 3 else frames[None, None]
    out = torch.stack([mh @ f.double() @ mw.T for f in flat])
    if clamp:
        out = out.clamp(0.0, 1.0)
    return out.to(frames.dtype).reshape(*frames.shape[:-2], out_h, out_w)


def degrade_bicubic(clip: VideoClip, scale: int = SCALE) -> VideoClip:
    if clip.H % scale or clip.W % scale:
        raise ValueError(f"clip size {clip.H}x{clip.W} not divisible by {scale}")
    return VideoClip(resize_bicubic(clip.frames, clip.H // scale, clip.W // scale), clip.frame_rate_tag)


def make_training_sample(clip: VideoClip, scale: int = SCALE) -> TrainingSample:
    if clip.T % 2 == 0:
        raise ValueError(f"training clips need an odd frame count, got {clip.T}")
    lr_all = degrade_bicubic(clip, scale)
    return TrainingSample(
        lr_inputs=VideoClip(lr_all.frames[0::2].clone()),
        hr_targets=clip,
        lr_targets=lr_all,
    )


# ---------------------------------------------------------------------------
# augmentation


def _map_sample(sample: TrainingSample, fn) -> TrainingSample:
    return TrainingSample(*(VideoClip(fn(c.frames, s)) for c, s in (
        (sample.lr_inputs, 1), (sample.hr_targets, SCALE), (sample.lr_targets, 1))))


def crop_sample(sample: TrainingSample, origin: tuple[int, int], crop_lr: int = 32) -> TrainingSample:
    """Crop ``crop_lr``-sized LR patches at ``origin`` (y, x) and the aligned HR patch."""
    y, x = origin
    h, w = sample.lr_inputs.H, sample.lr_inputs.W
    if y < 0 or x < 0 or y + crop_lr > h or x + crop_lr > w:
        raise ValueError(f"crop {crop_lr} at {origin} out of bounds for {h}x{w} LR frames")
    return _map_sample(sample, lambda f, s: f[..., y * s:(y + crop_lr) * s, x * s:(x + crop_lr) * s])


def augment(sample: TrainingSample, flip_h: bool = False, flip_v: bool = False,
            rot180: bool = False, mirror_time: bool = False,
            crop_origin: tuple[int, int] | None = None, crop_lr: int = 32) -> TrainingSample:
    """Crop (when ``crop_origin`` is given), then apply the same flips to all three clips."""
    out = crop_sample(sample, crop_origin, crop_lr) if crop_origin is not None else sample
    dims = []
    if flip_h:
        dims.append(-1)
    if flip_v:
        dims.append(-2)
    if rot180:
        dims += [-1, -2]
    # rot180 composed with a flip cancels along that axis
    dims = [d for d in set(dims) if dims.count(d) % 2]
    if mirror_time:
        dims.append(0)
    if dims:
        out = _map_sample(out, lambda f, s: f.flip(dims))
    return out


def random_augment(sample: TrainingSample, rng: np.random.Generator, crop_lr: int = 32) -> TrainingSample:
    h, w = sample.lr_inputs.H, sample.lr_inputs.W
    crop_lr = min(crop_lr, h, w)
    flags = rng.random(4) < 0.5
    origin = (int(rng.integers(0, h - crop_lr + 1)), int(rng.integers(0, w - crop_lr + 1)))
    return augment(sample, *map(bool, flags), crop_origin=origin, crop_lr=crop_lr)


def stack_samples(samples: Sequence[TrainingSample]) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    return (torch.stack([s.lr_inputs.frames for s in samples]),
            torch.stack([s.hr_targets.frames for s in samples]),
            torch.stack([s.lr_targets.frames for s in samples]))


# ---------------------------------------------------------------------------
# clip directories: %06d.png frames, plus a manifest listing clip folders


def to_uint8(frames: torch.Tensor) -> np.ndarray:
    """Quantize [0, 1] frames to 8 bit with round-half-even."""
    return np.rint(frames.detach().clamp(0, 1).double().cpu().numpy() * 255).astype(np.uint8)


def save_clip(clip: VideoClip | torch.Tensor, directory: str | Path) -> Path:
    frames = clip.frames if isinstance(clip, VideoClip) else clip
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for i, frame in enumerate(to_uint8(frames)):
        Image.fromarray(frame.transpose(1, 2, 0)).save(directory / f"{i:06d}.png")
    return directory


def load_clip(directory: str | Path) -> VideoClip:
    paths = sorted(Path(directory).glob("*.png"))
    if len(paths) < 2:
        raise ValueError(f"{directory}: need at least 2 numbered PNG frames")
    frames = np.stack([np.asarray(Image.open(p).convert("RGB")) for p in paths])
    return VideoClip(torch.from_numpy(frames).permute(0, 3, 1, 2).float() / 255.0)


def write_manifest(clip_dirs: Sequence[str | Path], path: str | Path) -> None:
    path = Path(path)
    lines = [str(Path(d).resolve().relative_to(path.parent.resolve()))
             if Path(d).resolve().is_relative_to(path.parent.resolve()) else str(d)
             for d in clip_dirs]
    path.write_text("\n".join(lines) + "\n")


def read_manifest(path: str | Path) -> list[VideoClip]:
    path = Path(path)
    if path.is_dir():
        manifest = path / "manifest.txt"
        if not manifest.exists():
            return [load_clip(path)]
        path = manifest
    root = path.parent
    names = [ln.strip() for ln in path.read_text().splitlines() if ln.strip() and not ln.startswith("#")]
    return [load_clip(root / n) for n in names]
