"""Training loop, checkpoints, inference and evaluation."""
from __future__ import annotations

import json
import logging
import os
import random
import time
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from .config import Config
from .data import (TrainingSample, VideoClip, make_training_sample, random_augment, read_manifest,
                   resize_bicubic, stack_samples, synthetic_dataset)
from .flow import FlowEstimator, default_flow_estimator
from .losses import NonFiniteLossError, Objective
from .metrics import clip_metrics
from .model import STINet

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "stinet-checkpoint"
CHECKPOINT_VERSION = 1


class CheckpointError(RuntimeError):
    """Unreadable or malformed checkpoint file."""


class FingerprintMismatch(RuntimeError):
    """Checkpoint was trained under a different model/loss configuration."""


class TrainingDiverged(RuntimeError):
    def __init__(self, message: str, checkpoint: Path | None):
        super().__init__(message)
        self.checkpoint = checkpoint


def lr_at(iteration: int, lr0: float, decay_factor: float, decay_every: int) -> float:
    """Step schedule: lr0 / decay_factor ** floor(iteration / decay_every)."""
    return lr0 / decay_factor ** (iteration // decay_every)


def deterministic_requested() -> bool:
    return os.environ.get("STINET_DETERMINISTIC", "") == "1"


def seed_everything(seed: int) -> None:
    random.seed(seed)
    np.random.seed(seed % 2**32)
    torch.manual_seed(seed)
    if deterministic_requested():
        torch.use_deterministic_algorithms(True, warn_only=True)


# ---------------------------------------------------------------------------
# data


def load_clips(cfg: Config, heldout: bool = False) -> list[VideoClip]:
    """Training (or held-out) HR clips: from ``data.path`` or synthesised."""
    d = cfg.data
    if d.path and not heldout:
        return read_manifest(d.path)
    s = d.synthetic
    if heldout:
        return synthetic_dataset(d.heldout_clips, s.T, s.H, s.W, seed=d.heldout_seed, max_speed=s.max_speed)
    return synthetic_dataset(s.num_clips, s.T, s.H, s.W, seed=s.seed, max_speed=s.max_speed)


def build_dataset(cfg: Config, clips: Sequence[VideoClip] | None = None) -> list[TrainingSample]:
    clips = load_clips(cfg) if clips is None else clips
    samples = [make_training_sample(c, cfg.data.scale) for c in clips]
    if not samples:
        raise ValueError("training dataset is empty")
    return samples


def _batches(samples: list[TrainingSample], batch_size: int, crop_lr: int, seed: int, start: int = 0):
    rng = np.random.default_rng([seed, 7])
    it = 0
    while True:
        idx = rng.integers(0, len(samples), batch_size)
        batch = [random_augment(samples[i], rng, crop_lr) for i in idx]
        if it >= start:
            yield stack_samples(batch)
        it += 1


# ---------------------------------------------------------------------------
# model construction and checkpoints


def build_model(cfg: Config, flow_estimator: torch.nn.Module | None = None) -> STINet:
    if flow_estimator is None:
        if cfg.flow.checkpoint:
            flow_estimator = FlowEstimator()
            flow_estimator.load_state_dict(torch.load(cfg.flow.checkpoint, map_location="cpu", weights_only=True))
        else:
            flow_estimator = default_flow_estimator()
    torch.manual_seed(cfg.train.seed)
    return STINet(cfg.model, flow_estimator)


def build_objective(cfg: Config, model: STINet) -> Objective:
    return Objective(model.flow_estimator, lambda1=cfg.loss.lambda1, lambda2=cfg.loss.lambda2,
                     abs_mode=cfg.mcl.abs, abs_norm=cfg.mcl.abs_norm, rel_mode=cfg.mcl.rel)


@dataclass
class Checkpoint:
    config: Config
    fingerprint: str
    iteration: int
    model_state: dict
    optimizer_state: dict | None = None
    scheduler_state: dict | None = None
    curves: list = field(default_factory=list)
    mismatch: bool = False

    def build_model(self) -> STINet:
        model = STINet(self.config.model, FlowEstimator())
        model.load_state_dict(self.model_state)
        return model.eval()


def save_checkpoint(path: str | Path, cfg: Config, model: STINet, iteration: int,
                    optimizer: torch.optim.Optimizer | None = None, scheduler=None,
                    curves: list | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "config": cfg.to_dict(),
        "fingerprint": cfg.fingerprint(),
        "iteration": iteration,
        "model": model.state_dict(),
        "optimizer": optimizer.state_dict() if optimizer is not None else None,
        "scheduler": scheduler.state_dict() if scheduler is not None else None,
        "curves": list(curves or []),
    }
    tmp = path.with_name(path.name + ".tmp")
    torch.save(payload, tmp)
    os.replace(tmp, path)
    return path


def load_checkpoint(path: str | Path, expected: Config | None = None, force: bool = False) -> Checkpoint:
    """Read a checkpoint; with ``expected`` set, compare configuration fingerprints.

    A mismatch warns and raises ``FingerprintMismatch`` unless ``force`` is
    true, in which case the result carries ``mismatch=True``.
    """
    from .config import from_dict

    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"checkpoint not found: {path}")
    try:
        payload = torch.load(path, map_location="cpu", weights_only=True)
    except Exception as exc:  # torch raises several types for damaged zips
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if not isinstance(payload, dict) or payload.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path} is not a stinet checkpoint")
    if payload["version"] > CHECKPOINT_VERSION:
        raise CheckpointError(f"checkpoint version {payload['version']} is newer than supported "
                              f"({CHECKPOINT_VERSION})")
    cfg = from_dict(payload["config"])
    mismatch = False
    if expected is not None and expected.fingerprint() != payload["fingerprint"]:
        mismatch = True
        msg = (f"checkpoint fingerprint {payload['fingerprint']} differs from configuration "
               f"{expected.fingerprint()}")
        warnings.warn(msg, stacklevel=2)
        if not force:
            raise FingerprintMismatch(msg + " (pass force=True to load anyway)")
    return Checkpoint(cfg, payload["fingerprint"], payload["iteration"], payload["model"],
                      payload["optimizer"], payload["scheduler"], payload["curves"], mismatch)


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainResult:
    model: STINet
    curves: list[dict]
    checkpoint: Path | None
    iterations: int


def make_optimizer(cfg: Config, model: STINet):
    t = cfg.train
    params = [p for p in model.parameters() if p.requires_grad]
    opt = torch.optim.Adam(params, lr=t.lr0, betas=(t.beta1, t.beta2))
    sched = torch.optim.lr_scheduler.StepLR(opt, step_size=t.decay_every, gamma=1.0 / t.decay_factor)
    return opt, sched


def train(cfg: Config, dataset: list[TrainingSample] | None = None, out_dir: str | Path | None = None,
          flow_estimator: torch.nn.Module | None = None, resume: str | Path | None = None,
          checkpoint_every: int = 500, progress: Callable[[dict], None] | None = None) -> TrainResult:
    """Train STINet under ``cfg``; writes ``last.ckpt`` and ``curves.json`` to ``out_dir``.

    A non-finite loss stops training with ``TrainingDiverged`` pointing at the
    last checkpoint written before the failure.
    """
    t = cfg.train
    seed_everything(t.seed)
    dataset = build_dataset(cfg) if dataset is None else dataset
    if not dataset:
        raise ValueError("training dataset is empty")
    model = build_model(cfg, flow_estimator)
    objective = build_objective(cfg, model)
    opt, sched = make_optimizer(cfg, model)
    curves: list[dict] = []
    start = 0
    if resume is not None:
        ck = load_checkpoint(resume, expected=cfg)
        model.load_state_dict(ck.model_state)
        opt.load_state_dict(ck.optimizer_state)
        sched.load_state_dict(ck.scheduler_state)
        curves, start = list(ck.curves), ck.iteration

    out = Path(out_dir) if out_dir is not None else None
    ckpt_path = out / "last.ckpt" if out is not None else None
    last_good: Path | None = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        last_good = save_checkpoint(ckpt_path, cfg, model, start, opt, sched, curves)

    # seed the batch stream and dropout-free forward once, independent of resume
    torch.manual_seed(t.seed + 1)
    batches = _batches(dataset, t.batch_size, cfg.data.crop_lr, t.seed, start)
    model.train()
    for it in range(start, t.total_iters):
        lr_in, hr, lr_t = next(batches)
        lr_now = opt.param_groups[0]["lr"]
        try:
            report = objective(model(lr_in), hr, lr_t)
        except NonFiniteLossError as exc:
            raise TrainingDiverged(f"iteration {it}: {exc}", last_good) from exc
        opt.zero_grad(set_to_none=True)
        report.total.backward()
        opt.step()
        sched.step()
        row = {"iter": it, "lr": lr_now} | report.as_dict()
        curves.append(row)
        if progress is not None:
            progress(row)
        if t.log_every and it % t.log_every == 0:
            log.info("iter %d lr %.2e loss %.5f", it, lr_now, row["total"])
        if out is not None and (it + 1) % checkpoint_every == 0:
            last_good = save_checkpoint(ckpt_path, cfg, model, it + 1, opt, sched, curves)

    if out is not None:
        last_good = save_checkpoint(ckpt_path, cfg, model, t.total_iters, opt, sched, curves)
        (out / "curves.json").write_text(json.dumps(curves))
    model.eval()
    return TrainResult(model, curves, last_good, t.total_iters)


# ---------------------------------------------------------------------------
# inference and evaluation


def _as_model(model_or_ckpt) -> STINet:
    if isinstance(model_or_ckpt, STINet):
        return model_or_ckpt
    if isinstance(model_or_ckpt, Checkpoint):
        return model_or_ckpt.build_model()
    return load_checkpoint(model_or_ckpt).build_model()


@torch.no_grad()
def infer(model_or_ckpt, lr_clip: VideoClip | torch.Tensor, n_interp: int = 1) -> VideoClip:
    """Upscale 4x and insert ``n_interp`` frames between each input pair."""
    model = _as_model(model_or_ckpt)
    frames = lr_clip.frames if isinstance(lr_clip, VideoClip) else lr_clip
    if frames.ndim != 4 or frames.shape[0] < 2:
        raise ValueError(f"need a clip of at least 2 frames, got shape {tuple(frames.shape)}")
    if n_interp < 1:
        raise ValueError("n_interp must be >= 1")
    was_training = model.training
    model.eval()
    out = model(frames[None].float(), n_interp=n_interp).frames[0].clamp(0, 1)
    model.train(was_training)
    return VideoClip(out)


def bicubic_repeat(lr_inputs: torch.Tensor, n_interp: int = 1, scale: int = 4) -> torch.Tensor:
    """Baseline: bicubic-upscaled inputs, each missing frame copied from its predecessor."""
    T, _, h, w = lr_inputs.shape
    up = resize_bicubic(lr_inputs, h * scale, w * scale)
    frames = [up[i // (n_interp + 1)] for i in range(T + (T - 1) * n_interp)]
    return torch.stack(frames)


@dataclass
class EvalReport:
    clips: list[dict]
    mean_psnr: float
    mean_ssim: float
    runtime_s: float
    fingerprint: str | None
    channel: str = "y"
    baseline: dict | None = None
    curves: list | None = None

    def to_dict(self) -> dict:
        return asdict(self)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))

    @classmethod
    def load(cls, path: str | Path) -> "EvalReport":
        return cls(**json.loads(Path(path).read_text()))


def evaluate(model_or_ckpt, hr_clips: Sequence[VideoClip], channel: str = "y",
             fingerprint: str | None = None, with_baseline: bool = True) -> EvalReport:
    """Degrade each odd-length HR clip, rebuild it from its even frames and score it."""
    model = _as_model(model_or_ckpt)
    if fingerprint is None and isinstance(model_or_ckpt, Checkpoint):
        fingerprint = model_or_ckpt.fingerprint
    rows, base_rows = [], []
    t0 = time.perf_counter()
    for k, clip in enumerate(hr_clips):
        sample = make_training_sample(clip)
        pred = infer(model, sample.lr_inputs, n_interp=1).frames
        p, s = clip_metrics(pred, clip.frames, channel)
        rows.append({"clip": k, "psnr": p, "ssim": s})
    runtime = time.perf_counter() - t0
    for k, clip in enumerate(hr_clips if with_baseline else []):
        sample = make_training_sample(clip)
        p, s = clip_metrics(bicubic_repeat(sample.lr_inputs.frames), clip.frames, channel)
        base_rows.append({"clip": k, "psnr": p, "ssim": s})
    baseline = None
    if base_rows:
        baseline = {"clips": base_rows, "mean_psnr": float(np.mean([r["psnr"] for r in base_rows])),
                    "mean_ssim": float(np.mean([r["ssim"] for r in base_rows]))}
    return EvalReport(rows, float(np.mean([r["psnr"] for r in rows])), float(np.mean([r["ssim"] for r in rows])),
                      runtime, fingerprint, channel, baseline)
