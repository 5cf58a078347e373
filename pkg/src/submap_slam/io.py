"""Trajectory and point-cloud file formats.

Trajectories use the TUM convention ``timestamp tx ty tz qx qy qz qw``;
point clouds and splat maps are ASCII PLY.
"""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import numpy as np

from .geometry import Pose


def write_tum_trajectory(path: str | Path, timestamps: Sequence[float], poses: Sequence[Pose]) -> None:
    if len(timestamps) != len(poses):
        raise ValueError("timestamps and poses differ in length")
    lines = ["# timestamp tx ty tz qx qy qz qw"]
    for ts, p in zip(timestamps, poses):
        w, x, y, z = p.q
        vals = [ts, *p.t, x, y, z, w]
        lines.append(" ".join(f"{v:.17g}" for v in vals))
    Path(path).write_text("\n".join(lines) + "\n")


def read_tum_trajectory(path: str | Path) -> tuple[np.ndarray, list[Pose]]:
    stamps, poses = [], []
    for line in Path(path).read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        vals = [float(v) for v in line.replace(",", " ").split()]
        if len(vals) != 8:
            raise ValueError(f"malformed trajectory line: {line!r}")
        ts, tx, ty, tz, qx, qy, qz, qw = vals
        stamps.append(ts)
        poses.append(Pose(np.array([qw, qx, qy, qz]), np.array([tx, ty, tz])))
    return np.array(stamps), poses


def _fmt(v) -> str:
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return f"{float(v):.9g}"


def write_ply(path: str | Path, columns: dict[str, np.ndarray]) -> None:
    """Write an ASCII PLY vertex list; ``columns`` maps property name to 1-D array.

    Integer arrays become ``int`` properties (``uchar`` for red/green/blue),
    everything else ``float``.
    """
    names = list(columns)
    arrays = [np.asarray(columns[k]).reshape(-1) for k in names]
    n = len(arrays[0]) if arrays else 0
    if any(len(a) != n for a in arrays):
        raise ValueError("PLY columns differ in length")
    header = ["ply", "format ascii 1.0", f"element vertex {n}"]
    for k, a in zip(names, arrays):
        if k in ("red", "green", "blue"):
            kind = "uchar"
        elif np.issubdtype(a.dtype, np.integer):
            kind = "int"
        else:
            kind = "float"
        header.append(f"property {kind} {k}")
    header.append("end_header")
    body = (" ".join(_fmt(a[i]) for a in arrays) for i in range(n))
    with open(path, "w") as f:
        f.write("\n".join(header) + "\n")
        for row in body:
            f.write(row + "\n")


def read_ply(path: str | Path) -> dict[str, np.ndarray]:
    with open(path) as f:
        if f.readline().strip() != "ply":
            raise ValueError("not a PLY file")
        names, kinds, n = [], [], 0
        for line in f:
            parts = line.split()
            if parts[0] == "format" and parts[1] != "ascii":
                raise ValueError("only ASCII PLY is supported")
            if parts[0] == "element" and parts[1] == "vertex":
                n = int(parts[2])
            elif parts[0] == "property":
                kinds.append(parts[1])
                names.append(parts[2])
            elif parts[0] == "end_header":
                break
        data = np.loadtxt(f, ndmin=2, max_rows=n) if n else np.zeros((0, len(names)))
    out = {}
    for i, (k, kind) in enumerate(zip(names, kinds)):
        col = data[:, i]
        out[k] = col.astype(np.int64) if kind in ("int", "uchar", "uint", "short") else col
    return out


def write_point_cloud(path: str | Path, points: np.ndarray, colors: np.ndarray | None = None) -> None:
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    cols = {"x": pts[:, 0], "y": pts[:, 1], "z": pts[:, 2]}
    if colors is not None:
        rgb = np.clip(np.round(np.asarray(colors).reshape(-1, 3) * 255), 0, 255).astype(np.int64)
        cols.update(red=rgb[:, 0], green=rgb[:, 1], blue=rgb[:, 2])
    write_ply(path, cols)


def read_point_cloud(path: str | Path) -> np.ndarray:
    d = read_ply(path)
    return np.stack([d["x"], d["y"], d["z"]], axis=1)
