"""Space-time video super-resolution: joint 4x upscaling and frame interpolation."""
from .config import Config, from_dict, load_config
from .data import VideoClip, generate_synthetic_clip
from .flow import FlowEstimator, adapt_flow, warp_backward
from .metrics import psnr, ssim
from .model import STINet
from .train import evaluate, infer, load_checkpoint, lr_at, save_checkpoint, train

__all__ = [
    "Config", "from_dict", "load_config", "VideoClip", "generate_synthetic_clip", "FlowEstimator", "adapt_flow",
    "warp_backward", "psnr", "ssim", "STINet", "evaluate", "infer", "load_checkpoint", "lr_at",
    "save_checkpoint", "train",
]

__version__ = "0.1.0"
