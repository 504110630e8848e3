"""Lightweight super-resolution with reparameterized dynamic units, on numpy."""
from .checkpoint import load_checkpoint, save_checkpoint
from .network import DistillSRNet, ModelConfig, build_model, fuse_model, super_resolve
from .profile import count_madds, count_params, cost_report

__all__ = [
    "DistillSRNet",
    "ModelConfig",
    "build_model",
    "count_madds",
    "count_params",
    "cost_report",
    "fuse_model",
    "load_checkpoint",
    "save_checkpoint",
    "super_resolve",
]
__version__ = "0.1.0"
