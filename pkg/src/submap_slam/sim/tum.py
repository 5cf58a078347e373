"""TUM RGB-D directory reader and writer.

Layout: ``rgb/``, ``depth/``, ``rgb.txt``, ``depth.txt``, ``groundtruth.txt``;
16-bit depth PNGs store depth * 5000. Our exporter also writes ``camera.txt``
(``fx fy cx cy width height``) so a directory round-trips without guessing
intrinsics.
"""

from __future__ import annotations

import logging
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image

from ..geometry import Intrinsics, Pose
from ..io import read_tum_trajectory, write_tum_trajectory
from .features import patch_features
from .render import Frame

logger = logging.getLogger(__name__)

DEPTH_FACTOR = 5000.0
MAX_DT = 0.02
# Freiburg 1 calibration, used when no camera.txt is present
DEFAULT_INTRINSICS = Intrinsics(517.3, 516.5, 318.6, 255.3, 640, 480)


def _read_list(path: Path) -> list[tuple[float, str]]:
    out = []
    for line in path.read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        ts, name = line.split()[:2]
        out.append((float(ts), name))
    return out


def _nearest(stamps: np.ndarray, t: float) -> int:
    i = int(np.searchsorted(stamps, t))
    cands = [j for j in (i - 1, i) if 0 <= j < len(stamps)]
    return min(cands, key=lambda j: abs(stamps[j] - t))


def read_camera(directory: Path) -> Intrinsics:
    cam = directory / "camera.txt"
    if not cam.exists():
        return DEFAULT_INTRINSICS
    fx, fy, cx, cy, w, h = cam.read_text().split()
    return Intrinsics(float(fx), float(fy), float(cx), float(cy), int(w), int(h))


def load_tum_sequence(directory: str | Path, max_dt: float = MAX_DT, downsample: int = 1,
                      max_frames: int | None = None):
    """Load an RGB-D sequence.

    Returns ``(frames, gt_poses, intrinsics)``. Frames whose depth or pose has
    no partner within ``max_dt`` seconds are skipped with a warning.
    """
    directory = Path(directory)
    for name in ("rgb.txt", "depth.txt", "groundtruth.txt"):
        if not (directory / name).exists():
            raise FileNotFoundError(f"missing {name} in {directory}")
    rgb = _read_list(directory / "rgb.txt")
    depth = _read_list(directory / "depth.txt")
    gt_ts, gt_poses = read_tum_trajectory(directory / "groundtruth.txt")
    d_ts = np.array([t for t, _ in depth])
    intr = read_camera(directory)
    if downsample > 1:
        intr = Intrinsics(intr.fx / downsample, intr.fy / downsample,
                          (intr.cx + 0.5) / downsample - 0.5, (intr.cy + 0.5) / downsample - 0.5,
                          intr.width // downsample, intr.height // downsample)

    frames, poses, skipped = [], [], 0
    for ts, rgb_name in rgb:
        if len(d_ts) == 0 or len(gt_ts) == 0:
            skipped += 1
            continue
        jd, jg = _nearest(d_ts, ts), _nearest(gt_ts, ts)
        if abs(d_ts[jd] - ts) > max_dt or abs(gt_ts[jg] - ts) > max_dt:
            skipped += 1
            continue
        color = np.asarray(Image.open(directory / rgb_name).convert("RGB"), dtype=np.float64) / 255.0
        raw = np.asarray(Image.open(directory / depth[jd][1]), dtype=np.float64)
        d = np.where(raw > 0, raw / DEPTH_FACTOR, np.nan)
        if downsample > 1:
            color = color[::downsample, ::downsample][: intr.height, : intr.width]
            d = d[::downsample, ::downsample][: intr.height, : intr.width]
        idx = len(frames)
        frames.append(Frame(idx, color, d, gt_poses[jg], patch_features(color, d, intr), ts))
        poses.append(gt_poses[jg])
        if max_frames is not None and len(frames) >= max_frames:
            break
    if skipped:
        logger.warning("skipped %d frames without association within %.3f s", skipped, max_dt)
    return frames, poses, intr


def export_tum_sequence(directory: str | Path, frames: Sequence[Frame], intr: Intrinsics) -> None:
    directory = Path(directory)
    (directory / "rgb").mkdir(parents=True, exist_ok=True)
    (directory / "depth").mkdir(parents=True, exist_ok=True)
    rgb_lines, depth_lines = ["# timestamp filename"], ["# timestamp filename"]
    for f in frames:
        name = f"{f.timestamp:.6f}.png"
        rgb8 = np.clip(np.round(f.color * 255), 0, 255).astype(np.uint8)
        Image.fromarray(rgb8, "RGB").save(directory / "rgb" / name)
        d = np.nan_to_num(f.gt_depth, nan=0.0)
        d16 = np.clip(np.round(d * DEPTH_FACTOR), 0, 65535).astype(np.uint16)
        Image.fromarray(d16).save(directory / "depth" / name)
        rgb_lines.append(f"{f.timestamp:.6f} rgb/{name}")
        depth_lines.append(f"{f.timestamp:.6f} depth/{name}")
    (directory / "rgb.txt").write_text("\n".join(rgb_lines) + "\n")
    (directory / "depth.txt").write_text("\n".join(depth_lines) + "\n")
    write_tum_trajectory(directory / "groundtruth.txt", [f.timestamp for f in frames],
                         [f.gt_pose for f in frames])
    (directory / "camera.txt").write_text(
        f"{float(intr.fx)!r} {float(intr.fy)!r} {float(intr.cx)!r} {float(intr.cy)!r} {intr.width} {intr.height}\n"
    )
