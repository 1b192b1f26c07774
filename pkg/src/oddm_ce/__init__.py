"""Delay-Doppler-angle channel estimation for multi-antenna ODDM."""

from .channel import ChannelSpec, DDGrid, PathSet, sample_paths, to_grid
from .modem import (EffectiveModel, apply_channel, build_effective_operator, build_h_tilde,
                    nmse, pilot_frames)

__all__ = [
    "ChannelSpec", "DDGrid", "PathSet", "sample_paths", "to_grid",
    "EffectiveModel", "apply_channel", "build_effective_operator", "build_h_tilde",
    "nmse", "pilot_frames",
]
__version__ = "0.1.0"
