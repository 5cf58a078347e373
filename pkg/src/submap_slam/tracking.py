"""Submap tracker: keyframe selection, submap assembly, and optimisation-free
inter-submap registration with log-depth scale correction."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from .geometry import Pose, depth_valid
from .sim.encoder import LocalSubmapOutput
from .sim.features import max_similarity
from .sim.render import Frame

logger = logging.getLogger(__name__)

MIN_SCALE_PIXELS = 100
SCALE_TRIM = 0.02


@dataclass(frozen=True)
class KeyframeDecision:
    ratio: float
    is_keyframe: bool


def keyframe_overlap(current: np.ndarray, last_kf: np.ndarray, beta: float = 0.7,
                     th: float = 0.7) -> KeyframeDecision:
    """Fraction of current patches whose best match in ``last_kf`` exceeds ``beta``."""
    if current.shape != last_kf.shape:
        raise ValueError(f"feature grids differ: {current.shape} vs {last_kf.shape}")
    r = float(np.mean(max_similarity(current, last_kf) > beta))
    return KeyframeDecision(r, r < th)


@dataclass(frozen=True)
class Submap:
    """A registered submap in world coordinates.

    ``depths[j]`` is the scale-corrected depth consistent with ``points[j]``;
    frame 0 duplicates the previous submap's last frame.
    """

    id: int
    frame_indices: tuple[int, ...]
    poses: tuple[Pose, ...]
    points: tuple[np.ndarray, ...]
    depths: tuple[np.ndarray, ...]
    scale: float = 1.0
    scale_ok: bool = True

    def __len__(self) -> int:
        return len(self.frame_indices)

    @property
    def anchor_pose(self) -> Pose:
        return self.poses[-1]

    def valid(self, j: int) -> np.ndarray:
        return depth_valid(self.depths[j])


def _log_ratios(prev_depth: np.ndarray, cur_depth: np.ndarray) -> np.ndarray:
    if prev_depth.shape != cur_depth.shape:
        raise ValueError("overlap depth maps differ in shape")
    ok = depth_valid(prev_depth) & depth_valid(cur_depth)
    return np.log(prev_depth[ok]) - np.log(cur_depth[ok])


def trimmed_mean(x: np.ndarray, trim: float = SCALE_TRIM) -> float:
    x = np.sort(np.asarray(x, dtype=np.float64))
    k = int(np.floor(trim * len(x)))
    if k > 0 and len(x) - 2 * k > 0:
        x = x[k:-k]
    return float(x.mean())


def compute_scale_factor(prev_tail_depth: np.ndarray, cur_head_depth: np.ndarray,
                         min_pixels: int = MIN_SCALE_PIXELS) -> tuple[float, bool]:
    """Scale mapping ``cur_head_depth`` onto ``prev_tail_depth``.

    Exp of the 2%-trimmed mean log ratio over jointly valid pixels. Returns
    ``(scale, ok)``; with fewer than ``min_pixels`` valid pixels the scale
    falls back to 1 and ``ok`` is False.
    """
    e = _log_ratios(prev_tail_depth, cur_head_depth)
    if len(e) < min_pixels:
        logger.warning("only %d jointly valid overlap pixels; scale factor set to 1", len(e))
        return 1.0, False
    return float(np.exp(trimmed_mean(e))), True


def _normalized_local_poses(local: LocalSubmapOutput) -> list[Pose]:
    inv0 = local.poses[0].inverse()
    return [inv0 @ p for p in local.poses]


def _lift(local: LocalSubmapOutput, world_poses: Sequence[Pose], scale: float):
    points, depths = [], []
    for j, T in enumerate(world_poses):
        pts = T.apply(scale * local.points[j])
        points.append(np.where(local.valid[j][..., None], pts, np.nan))
        depths.append(np.where(local.valid[j], scale * local.points[j][..., 2], np.nan))
    return tuple(points), tuple(depths)


def bootstrap_first_submap(local: LocalSubmapOutput, submap_id: int = 0) -> Submap:
    """The first frame of the first submap defines the world frame; scale 1."""
    poses = tuple(_normalized_local_poses(local))
    points, depths = _lift(local, poses, 1.0)
    return Submap(submap_id, tuple(local.frame_indices), poses, points, depths, 1.0, True)


def register_anchored(anchor_pose: Pose, anchor_depth: np.ndarray, local: LocalSubmapOutput,
                      anchor_index: int = 0, submap_id: int = -1) -> Submap:
    """Lift ``local`` to world coordinates through the shared frame ``anchor_index``.

    ``T_world_j = T_anchor (T_local_anchor)^-1 T_local_j`` and point maps are
    scaled by the overlap-depth scale factor.
    """
    local_poses = _normalized_local_poses(local)
    base = anchor_pose @ local_poses[anchor_index].inverse()
    world = [base @ p for p in local_poses]
    s, ok = compute_scale_factor(anchor_depth, local.depth(anchor_index))
    points, depths = _lift(local, world, s)
    return Submap(submap_id, tuple(local.frame_indices), tuple(world), points, depths, s, ok)


def register_submap(prev: Submap, local: LocalSubmapOutput, submap_id: int | None = None) -> Submap:
    """Register a new submap whose frame 0 is ``prev``'s last frame."""
    if local.frame_indices[0] != prev.frame_indices[-1]:
        raise ValueError("the new submap must start with the previous submap's last frame")
    sid = prev.id + 1 if submap_id is None else submap_id
    return register_anchored(prev.anchor_pose, prev.depths[-1], local, 0, sid)


@dataclass(frozen=True)
class FeedbackRecord:
    """Map-refined pose, depth and world point map of one frame."""

    frame_index: int
    pose: Pose
    depth: np.ndarray
    points: np.ndarray


def apply_feedback(submap: Submap, updated: Sequence[FeedbackRecord] | dict[int, FeedbackRecord]) -> Submap:
    """Replace poses, depths and point maps with map-refined values.

    ``updated`` must cover every frame of the submap.
    """
    if not isinstance(updated, dict):
        updated = {r.frame_index: r for r in updated}
    missing = [i for i in submap.frame_indices if i not in updated]
    if missing:
        raise ValueError(f"feedback misses frames {missing}")
    recs = [updated[i] for i in submap.frame_indices]
    return replace(
        submap,
        poses=tuple(r.pose for r in recs),
        depths=tuple(r.depth for r in recs),
        points=tuple(r.points for r in recs),
    )


@dataclass
class SubTracker:
    """Sequential state machine turning frames into registered submaps.

    ``encoder`` maps a window of K+1 frames to a :class:`LocalSubmapOutput`.
    Non-keyframes are dropped.
    """

    encoder: Callable[[Sequence[Frame]], LocalSubmapOutput]
    K: int = 6
    beta: float = 0.7
    th: float = 0.7
    select_keyframes: bool = True
    submaps: list[Submap] = field(default_factory=list)
    keyframes: list[Frame] = field(default_factory=list)
    _pending: list[Frame] = field(default_factory=list)
    _last_kf: Frame | None = None

    def is_keyframe(self, frame: Frame) -> KeyframeDecision:
        if self._last_kf is None or not self.select_keyframes:
            return KeyframeDecision(0.0, True)
        return keyframe_overlap(frame.features, self._last_kf.features, self.beta, self.th)

    def process(self, frame: Frame) -> Submap | None:
        """Feed one frame; returns a newly registered submap when one completes."""
        if not self.is_keyframe(frame).is_keyframe:
            return None
        self._last_kf = frame
        self.keyframes.append(frame)
        self._pending.append(frame)
        need = self.K + 1 if not self.submaps else self.K
        if len(self._pending) < need:
            return None
        return self._close(self._pending)

    def flush(self) -> Submap | None:
        """Close a trailing partial submap (shorter than K) at sequence end."""
        if not self._pending:
            return None
        if not self.submaps and len(self._pending) < 2:
            return None
        return self._close(self._pending)

    def _close(self, pending: list[Frame]) -> Submap:
        if not self.submaps:
            window = list(pending)
            sub = bootstrap_first_submap(self.encoder(window), 0)
        else:
            prev = self.submaps[-1]
            overlap = self.keyframe_by_index(prev.frame_indices[-1])
            window = [overlap, *pending]
            sub = register_submap(prev, self.encoder(window))
        self.submaps.append(sub)
        self._pending = []
        return sub

    def keyframe_by_index(self, index: int) -> Frame:
        for f in reversed(self.keyframes):
            if f.index == index:
                return f
        raise KeyError(index)

    def replace_submap(self, sub: Submap) -> None:
        self.submaps[sub.id] = sub
