"""Synthetic ground truth and the encoder simulator."""

from .encoder import CorruptionConfig, LocalSubmapOutput, simulate_encoder
from .features import patch_features
from .render import Frame, render_ground_truth, render_sequence
from .scene import SyntheticScene, generate_scene, raycast
from .trajectory import generate_trajectory, look_at
from .tum import export_tum_sequence, load_tum_sequence

__all__ = [
    "CorruptionConfig",
    "Frame",
    "LocalSubmapOutput",
    "SyntheticScene",
    "export_tum_sequence",
    "generate_scene",
    "generate_trajectory",
    "load_tum_sequence",
    "look_at",
    "patch_features",
    "raycast",
    "render_ground_truth",
    "render_sequence",
    "simulate_encoder",
]
