"""Camera trajectories for the synthetic scenes."""

from __future__ import annotations

import numpy as np

from ..geometry import Pose

WORLD_UP = np.array([0.0, 0.0, 1.0])


def look_at(eye, target, up=WORLD_UP) -> Pose:
    """Camera-to-world pose of an OpenCV camera at ``eye`` looking at ``target``."""
    eye = np.asarray(eye, dtype=np.float64)
    z = np.asarray(target, dtype=np.float64) - eye
    z /= np.linalg.norm(z)
    x = np.cross(z, up)
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    return Pose.from_rt(np.stack([x, y, z], axis=1), eye)


def heading_pose(position, yaw: float, pitch: float = -0.15) -> Pose:
    """Pose looking along ``yaw`` (rad, about +z) tilted down by ``-pitch``."""
    fwd = np.array([np.cos(yaw) * np.cos(pitch), np.sin(yaw) * np.cos(pitch), np.sin(pitch)])
    return look_at(position, np.asarray(position) + fwd)


def _orbit(n: int, radius: float, height: float, target_height: float) -> list[Pose]:
    poses = []
    for i in range(n):
        a = 2 * np.pi * i / n
        eye = np.array([radius * np.cos(a), radius * np.sin(a), height])
        poses.append(look_at(eye, [0.0, 0.0, target_height]))
    return poses


def _square_loop(n: int, half_side: float, height: float, move_fraction: float = 0.7) -> list[Pose]:
    corners = np.array(
        [[-half_side, -half_side], [half_side, -half_side], [half_side, half_side],
         [-half_side, half_side]]
    )
    poses = []
    for i in range(n):
        s = 4.0 * i / (n - 1)
        k = min(int(s), 3)
        u = s - k
        yaw0 = k * np.pi / 2
        p0, p1 = corners[k], corners[(k + 1) % 4]
        if u < move_fraction:
            xy = p0 + (u / move_fraction) * (p1 - p0)
            yaw = yaw0
        else:
            xy = p1
            yaw = yaw0 + (np.pi / 2) * (u - move_fraction) / (1 - move_fraction)
        poses.append(heading_pose([xy[0], xy[1], height], yaw))
    return poses


def _corridor_out_back(n: int, length: float, height: float) -> list[Pose]:
    turn = n // 2
    poses = []
    for i in range(n):
        x = 1.0 + length * (1.0 - abs(i - turn) / turn)
        poses.append(heading_pose([x, 0.0, height], 0.0, pitch=-0.1))
    return poses


def generate_trajectory(kind: str, n_frames: int, *, radius: float = 2.0, height: float = 1.2,
                        half_side: float = 1.0, length: float = 6.0) -> list[Pose]:
    """``orbit`` | ``square_loop`` | ``corridor_out_back``.

    ``square_loop`` ends exactly on its start pose; ``corridor_out_back`` walks
    out and back facing +x, so every return pose repeats an outbound one.
    """
    if n_frames < 2:
        raise ValueError("need at least 2 frames")
    if kind == "orbit":
        return _orbit(n_frames, radius, height, target_height=0.6)
    if kind == "square_loop":
        return _square_loop(n_frames, half_side, height)
    if kind == "corridor_out_back":
        return _corridor_out_back(n_frames, length, height)
    raise ValueError(f"unknown trajectory kind {kind!r}")
