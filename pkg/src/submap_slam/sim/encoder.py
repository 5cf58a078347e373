"""Stand-in for a sequential 3D encoder.

Given a window of frames with known geometry, produce what a feed-forward
reconstruction network would: per-frame point maps in each camera's own
coordinates and camera poses relative to the first frame of the window.
Errors are injected by a :class:`CorruptionConfig`:

* one log-normal scale factor per window applied to every point map,
* a random walk on the frame-to-frame relative poses,
* multiplicative log-normal depth noise,
* random pixel dropout.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from ..geometry import Intrinsics, Pose, unproject
from .render import Frame


@dataclass(frozen=True)
class CorruptionConfig:
    scale_sigma: float = 0.0
    rot_drift_sigma: float = 0.0  # rad per frame
    trans_drift_sigma: float = 0.0  # m per frame
    depth_noise_rel: float = 0.0
    dropout: float = 0.0
    seed: int = 0

    def __post_init__(self):
        for name in ("scale_sigma", "rot_drift_sigma", "trans_drift_sigma", "depth_noise_rel"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if not 0.0 <= self.dropout <= 1.0:
            raise ValueError("dropout must lie in [0, 1]")


@dataclass
class LocalSubmapOutput:
    frame_indices: list[int]
    poses: list[Pose]  # camera-to-local, poses[0] is identity
    points: list[np.ndarray]  # (H, W, 3) in each camera's own frame
    valid: list[np.ndarray]
    injected_scale: float = 1.0  # simulator bookkeeping only
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.frame_indices)

    def depth(self, j: int) -> np.ndarray:
        return np.where(self.valid[j], self.points[j][..., 2], np.nan)


def simulate_encoder(frames: Sequence[Frame], cfg: CorruptionConfig, intr: Intrinsics,
                     window: int | None = None, salt: int = 0) -> LocalSubmapOutput:
    """Encode a window of frames.

    ``window`` is the required window length (K+1); ``salt`` separates noise
    draws for windows that contain the same frame indices (e.g. loop windows).
    """
    if window is not None and len(frames) != window:
        raise ValueError(f"encoder window must have {window} frames, got {len(frames)}")
    if len(frames) == 0:
        raise ValueError("empty window")
    rng = np.random.default_rng([cfg.seed, salt, *[f.index for f in frames]])
    scale = float(np.exp(cfg.scale_sigma * rng.standard_normal())) if cfg.scale_sigma > 0 else 1.0

    poses = [Pose.identity()]
    for prev, cur in zip(frames[:-1], frames[1:]):
        step = prev.gt_pose.inverse() @ cur.gt_pose
        if cfg.rot_drift_sigma > 0 or cfg.trans_drift_sigma > 0:
            xi = np.concatenate(
                [cfg.rot_drift_sigma * rng.standard_normal(3),
                 cfg.trans_drift_sigma * rng.standard_normal(3)]
            )
            step = step @ Pose.exp(xi)
        poses.append(poses[-1] @ step)

    points, valid = [], []
    for f in frames:
        depth = f.gt_depth
        if cfg.depth_noise_rel > 0:
            depth = depth * np.exp(cfg.depth_noise_rel * rng.standard_normal(depth.shape))
        pts, ok = unproject(depth, intr)
        if cfg.dropout > 0:
            ok = ok & (rng.uniform(size=ok.shape) >= cfg.dropout)
        pts = np.where(ok[..., None], scale * pts, np.nan)
        points.append(pts)
        valid.append(ok)
    return LocalSubmapOutput([f.index for f in frames], poses, points, valid, scale)
