"""
MAM-FSD - Motor Attention + Frame-level Self-Distillation
Desk-scale continuous gloss recognition from video, built on a small autograd core

This package provides the lab modules (tensor core, motor attention backbone,
self-distillation, temporal head, CTC, WER, synthetic data) and the
``mamfsd`` command line that wires them together.
"""

from .lab.cli import main
from .lab.config import RunConfig, load_config
from .lab.model import MamFsdModel, load_model
from .lab.trainer import evaluate, train

# Package metadata
__version__ = "1.0.0"
__description__ = "Motor attention and frame-level self-distillation for continuous gloss recognition"

# Exported symbols
__all__ = [
    "MamFsdModel",
    "RunConfig",
    "evaluate",
    "load_config",
    "load_model",
    "main",
    "train",
]
