from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..geometry import Intrinsics, Pose
from .features import patch_features
from .scene import SyntheticScene, raycast, shade


@dataclass(frozen=True)
class Frame:
    index: int
    color: np.ndarray  # (H, W, 3) in [0, 1]
    gt_depth: np.ndarray  # (H, W), NaN where nothing is hit
    gt_pose: Pose
    features: np.ndarray
    timestamp: float = 0.0

    def with_color(self, color: np.ndarray) -> "Frame":
        return Frame(self.index, color, self.gt_depth, self.gt_pose, self.features, self.timestamp)


def render_ground_truth(scene: SyntheticScene, pose: Pose, intr: Intrinsics, index: int = 0,
                        timestamp: float | None = None, lambert: bool = True,
                        textured: bool = True) -> Frame:
    """Ray-cast one frame: shaded colour, z-depth, and patch features."""
    rays = intr.pixel_rays().reshape(-1, 3)
    dirs = rays @ pose.R.T  # unit camera-z, so ray parameter == depth
    t, normals, prim = raycast(scene, pose.t, dirs)
    hit = np.isfinite(t)
    pts = pose.t + np.where(hit, t, 0.0)[:, None] * dirs
    color = shade(scene, pts, normals, prim, lambert=lambert, textured=textured)
    color[~hit] = 0.0
    depth = np.where(hit, t, np.nan).reshape(intr.shape)
    color = color.reshape(*intr.shape, 3)
    feats = patch_features(color, depth, intr)
    ts = float(index) / 30.0 if timestamp is None else timestamp
    return Frame(index, color, depth, pose, feats, ts)


def render_sequence(scene: SyntheticScene, poses, intr: Intrinsics, **kw) -> list[Frame]:
    return [render_ground_truth(scene, p, intr, index=i, **kw) for i, p in enumerate(poses)]
