"""Latent diffusion: schedule, UNet, sampling and bridging."""
from .ddpm import (
    DdpmConfig,
    DdpmModel,
    TrajectoryEntry,
    bridge_conditional,
    p_sample_step,
    sample_streams,
    sample_unconditional,
    synthesize_signal_channel,
    train_ddpm,
    traverse_trajectory,
)
from .schedule import NoiseSchedule, StepRangeError, build_schedule, q_sample
from .unet import DualUNet, timestep_embedding

__all__ = [
    "DdpmConfig",
    "DdpmModel",
    "TrajectoryEntry",
    "bridge_conditional",
    "p_sample_step",
    "sample_streams",
    "sample_unconditional",
    "synthesize_signal_channel",
    "train_ddpm",
    "traverse_trajectory",
    "NoiseSchedule",
    "StepRangeError",
    "build_schedule",
    "q_sample",
    "DualUNet",
    "timestep_embedding",
]
