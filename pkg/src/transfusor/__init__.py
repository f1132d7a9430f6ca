"""
Conditional lane-change trajectory generation with a transformer-based
diffusion model, a CVAE baseline, and the extraction and coverage tooling
around them. Everything runs on numpy with a small reverse-mode autodiff.
"""

from .diffusion import ModelConfig, NoiseSchedule, Transfusor, build_schedule, sample_trajectories
from .cvae import Cvae, CvaeConfig, cvae_sample
from .labels import ConditionLabel, all_labels
from .tensor import SeededRng, Tensor

__version__ = "0.1.0"

__all__ = [
    "ConditionLabel", "Cvae", "CvaeConfig", "ModelConfig", "NoiseSchedule", "SeededRng", "Tensor",
    "Transfusor", "all_labels", "build_schedule", "cvae_sample", "sample_trajectories",
]
