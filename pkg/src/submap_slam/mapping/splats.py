"""Global splat map storage and PLY persistence."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..geometry import Pose, quat_mul
from ..io import read_ply, write_ply

MAX_RADIUS = 0.5  # m
MIN_RADIUS = 1e-4
MIN_OPACITY = 1e-4


@dataclass
class SplatMap:
    """Growable set of splats with stable integer ids.

    Arrays are row-aligned: ``positions (N,3)``, ``quats (N,4)`` as (w,x,y,z),
    ``scales (N,3)`` radii in metres, ``opacities (N,)``, ``colors (N,3)``,
    ``submaps (N,)`` origin submap id, ``ids (N,)``.
    """

    positions: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    quats: np.ndarray = field(default_factory=lambda: np.zeros((0, 4)))
    scales: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    opacities: np.ndarray = field(default_factory=lambda: np.zeros(0))
    colors: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    submaps: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    ids: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    next_id: int = 0

    def __len__(self) -> int:
        return len(self.ids)

    def copy(self) -> "SplatMap":
        return SplatMap(
            self.positions.copy(), self.quats.copy(), self.scales.copy(), self.opacities.copy(),
            self.colors.copy(), self.submaps.copy(), self.ids.copy(), self.next_id,
        )

    def add(self, positions, quats, scales, opacities, colors, submap: int | np.ndarray) -> np.ndarray:
        n = len(positions)
        new_ids = np.arange(self.next_id, self.next_id + n, dtype=np.int64)
        sub = np.broadcast_to(np.asarray(submap, dtype=np.int64), (n,))
        self.positions = np.concatenate([self.positions, np.asarray(positions, float).reshape(n, 3)])
        q = np.asarray(quats, float).reshape(n, 4)
        self.quats = np.concatenate([self.quats, q / np.linalg.norm(q, axis=1, keepdims=True)])
        self.scales = np.concatenate([self.scales, np.asarray(scales, float).reshape(n, 3)])
        self.opacities = np.concatenate([self.opacities, np.asarray(opacities, float).reshape(n)])
        self.colors = np.concatenate([self.colors, np.asarray(colors, float).reshape(n, 3)])
        self.submaps = np.concatenate([self.submaps, sub])
        self.ids = np.concatenate([self.ids, new_ids])
        self.next_id += n
        self.clamp()
        return new_ids

    def keep(self, mask: np.ndarray) -> None:
        for name in ("positions", "quats", "scales", "opacities", "colors", "submaps", "ids"):
            setattr(self, name, getattr(self, name)[mask])

    def prune(self, min_opacity: float = 0.01) -> int:
        drop = self.opacities < min_opacity
        self.keep(~drop)
        return int(drop.sum())

    def clamp(self) -> None:
        self.scales = np.clip(self.scales, MIN_RADIUS, MAX_RADIUS)
        self.opacities = np.clip(self.opacities, MIN_OPACITY, 1.0)
        self.colors = np.clip(self.colors, 0.0, 1.0)
        self.quats = self.quats / np.linalg.norm(self.quats, axis=1, keepdims=True)

    def transformed(self, transforms: dict[int, Pose]) -> "SplatMap":
        """Rigidly move every splat by the transform of its origin submap."""
        out = self.copy()
        for sid in np.unique(self.submaps):
            if int(sid) not in transforms:
                raise KeyError(f"no transform for submap {int(sid)}")
            T = transforms[int(sid)]
            sel = self.submaps == sid
            out.positions[sel] = T.apply(self.positions[sel])
            out.quats[sel] = np.array([quat_mul(T.q, q) for q in self.quats[sel]]).reshape(-1, 4)
        return out

    # -- persistence ---------------------------------------------------------

    def save_ply(self, path: str | Path) -> None:
        order = np.argsort(self.ids, kind="stable")
        cols = {
            "x": self.positions[order, 0],
            "y": self.positions[order, 1],
            "z": self.positions[order, 2],
            "red": np.round(self.colors[order, 0] * 255).astype(np.int64),
            "green": np.round(self.colors[order, 1] * 255).astype(np.int64),
            "blue": np.round(self.colors[order, 2] * 255).astype(np.int64),
            "scale_x": self.scales[order, 0],
            "scale_y": self.scales[order, 1],
            "scale_z": self.scales[order, 2],
            "opacity": self.opacities[order],
            "rot_w": self.quats[order, 0],
            "rot_x": self.quats[order, 1],
            "rot_y": self.quats[order, 2],
            "rot_z": self.quats[order, 3],
            "submap": self.submaps[order].astype(np.int64),
            "splat_id": self.ids[order].astype(np.int64),
        }
        write_ply(path, cols)

    @classmethod
    def load_ply(cls, path: str | Path) -> "SplatMap":
        d = read_ply(path)
        m = cls()
        if len(d["x"]) == 0:
            return m
        m.positions = np.stack([d["x"], d["y"], d["z"]], 1)
        m.colors = np.stack([d["red"], d["green"], d["blue"]], 1) / 255.0
        m.scales = np.stack([d["scale_x"], d["scale_y"], d["scale_z"]], 1)
        m.opacities = d["opacity"].astype(float)
        m.quats = np.stack([d["rot_w"], d["rot_x"], d["rot_y"], d["rot_z"]], 1)
        m.submaps = d["submap"]
        m.ids = d["splat_id"]
        m.next_id = int(m.ids.max()) + 1
        return m
