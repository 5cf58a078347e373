"""Loop closure back end: covisibility, loop detection, joint rigid submap
alignment, map transformation and global refinement."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from .geometry import Intrinsics, Pose, depth_valid, project
from .mapping.mapper import (
    GBA_WEIGHTS,
    BundleAdjustResult,
    LossWeights,
    RegisteredView,
    bundle_adjust,
    feedback_views,
    fit_exposure,
    refine_pose_intra,
)
from .mapping.renderer import render_map
from .mapping.splats import SplatMap
from .sim.encoder import LocalSubmapOutput
from .sim.features import max_similarity
from .sim.render import Frame
from .tracking import Submap, register_anchored

logger = logging.getLogger(__name__)

COVIS_THRESHOLD = 0.3
DEPTH_TOLERANCE = 0.1
LOOP_THRESHOLD = 0.5
LOOP_WEIGHTS = (0.7, 0.3)
MIN_TEMPORAL_DISTANCE = 10
MAX_RESIDUAL_POINTS = 2000


# -- covisibility ----------------------------------------------------------------


def directed_overlap(points: np.ndarray, pose: Pose, depth: np.ndarray, intr: Intrinsics,
                     tol: float = DEPTH_TOLERANCE) -> float:
    """Fraction of valid world ``points`` that land inside the camera ``(pose, depth)``
    with camera depth within ``tol`` (relative) of the depth stored at that pixel."""
    pts = points.reshape(-1, 3)
    pts = pts[np.all(np.isfinite(pts), axis=1)]
    if len(pts) == 0:
        return 0.0
    uv, z, ok = project(pts, intr, pose)
    ui = np.rint(np.nan_to_num(uv[:, 0], nan=-1)).astype(np.int64)
    vi = np.rint(np.nan_to_num(uv[:, 1], nan=-1)).astype(np.int64)
    ok &= (ui >= 0) & (ui < intr.width) & (vi >= 0) & (vi < intr.height)
    d = np.full(len(pts), np.nan)
    d[ok] = depth[vi[ok], ui[ok]]
    ok &= depth_valid(d)
    ok[ok] &= np.abs(z[ok] - d[ok]) <= tol * d[ok]
    return float(ok.sum() / len(pts))


@dataclass
class CovisibilityGraph:
    """Undirected keyframe graph; edges carry the overlap ratio that created them."""

    threshold: float = COVIS_THRESHOLD
    nodes: list[int] = field(default_factory=list)
    edges: dict[tuple[int, int], float] = field(default_factory=dict)

    def add_edge(self, a: int, b: int, w: float) -> None:
        if w > self.threshold and a != b:
            self.edges[(min(a, b), max(a, b))] = float(w)

    def weight(self, a: int, b: int) -> float:
        return self.edges.get((min(a, b), max(a, b)), 0.0)

    def neighbors(self, a: int) -> list[int]:
        out = [j if i == a else i for (i, j) in self.edges if a in (i, j)]
        return sorted(out)


def covisibility_update(graph: CovisibilityGraph, new_view: RegisteredView,
                        views: Sequence[RegisteredView], intr: Intrinsics,
                        tol: float = DEPTH_TOLERANCE) -> dict[int, float]:
    """Add the new view and its edges to every previous view with overlap above threshold.

    Returns the overlap of ``new_view`` onto each previous view.
    """
    overlaps = {}
    for v in views:
        if v.index == new_view.index:
            continue
        r = directed_overlap(new_view.points, v.pose, v.depth, intr, tol)
        overlaps[v.index] = r
        graph.add_edge(new_view.index, v.index, r)
    if new_view.index not in graph.nodes:
        graph.nodes.append(new_view.index)
    return overlaps


# -- loop detection ------------------------------------------------------------------


@dataclass(frozen=True)
class LoopCandidate:
    current: int
    matched: int
    r_pts: float
    r_feat: float
    score: float
    accepted: bool

    def log_line(self) -> str:
        return (f"{self.current} {self.matched} {self.r_pts:.6f} {self.r_feat:.6f} "
                f"{self.score:.6f} {int(self.accepted)}")


def loop_score(r_pts: float, r_feat: float, weights: tuple[float, float] = LOOP_WEIGHTS) -> float:
    return weights[0] * r_pts + weights[1] * r_feat


def feature_overlap(cur: np.ndarray, ref: np.ndarray, beta: float = 0.7) -> float:
    return float(np.mean(max_similarity(cur, ref) > beta))


def detect_loop(graph: CovisibilityGraph, new_view: RegisteredView, views: Sequence[RegisteredView],
                features: dict[int, np.ndarray], intr: Intrinsics, ordinal: dict[int, int],
                min_distance: int = MIN_TEMPORAL_DISTANCE, threshold: float = LOOP_THRESHOLD,
                weights: tuple[float, float] = LOOP_WEIGHTS, beta: float = 0.7,
                tol: float = DEPTH_TOLERANCE) -> tuple[LoopCandidate | None, list[LoopCandidate]]:
    """Score covisible keyframes far enough back in time and pick the best.

    ``ordinal`` maps frame index to keyframe position, in which the temporal
    distance is measured. Returns ``(best accepted candidate or None, all scored)``.
    """
    by_index = {v.index: v for v in views}
    cur = ordinal[new_view.index]
    scored = []
    for j in graph.neighbors(new_view.index):
        if j not in by_index or abs(cur - ordinal[j]) <= min_distance:
            continue
        old = by_index[j]
        r_pts = min(
            directed_overlap(new_view.points, old.pose, old.depth, intr, tol),
            directed_overlap(old.points, new_view.pose, new_view.depth, intr, tol),
        )
        r_feat = feature_overlap(features[new_view.index], features[j], beta)
        s = loop_score(r_pts, r_feat, weights)
        scored.append(LoopCandidate(new_view.index, j, r_pts, r_feat, s, s > threshold))
    accepted = [c for c in scored if c.accepted]
    best = max(accepted, key=lambda c: (c.score, -c.matched)) if accepted else None
    return best, scored


# -- loop submap -------------------------------------------------------------------------


def loop_window(submap: Submap, matched: int, K: int) -> list[int]:
    """K consecutive frame indices of ``submap`` containing ``matched``.

    For a full submap of K+1 frames this is frames 0..K-1, or 1..K when the
    match is the last frame.
    """
    idx = list(submap.frame_indices)
    if len(idx) <= K:
        return idx
    pos = idx.index(matched)
    start = min(max(pos - K + 1, 0), len(idx) - K)
    return idx[start : start + K]


def build_loop_submap(encoder: Callable[[Sequence[Frame]], LocalSubmapOutput], frames: Sequence[Frame],
                      current: Frame, matched_submap: Submap, matched: int, submap_id: int = -1) -> Submap:
    """Encode ``frames`` (old window) plus ``current`` and lift it through the matched frame."""
    if current.index in [f.index for f in frames]:
        raise ValueError("current frame must not be part of the old window")
    local = encoder([*frames, current])
    if local.frame_indices[-1] != current.index:
        raise ValueError("encoder output must end with the current frame")
    j = list(matched_submap.frame_indices).index(matched)
    anchor = [f.index for f in frames].index(matched)
    return register_anchored(matched_submap.poses[j], matched_submap.depths[j], local, anchor, submap_id)


# -- joint rigid alignment ----------------------------------------------------------------


@dataclass(frozen=True)
class LoopConstraint:
    """``T_i(X_{i,j}) == T_m(X_loop)`` for the current frame ``j`` of submap ``i``."""

    submap: int
    points: np.ndarray  # X_{i,j}
    matched_submap: int
    loop_points: np.ndarray  # X_{loop,K}


@dataclass
class LoopSolution:
    transforms: list[Pose]
    initial_cost: float
    final_cost: float
    iterations: int
    costs: list[float]
    converged: bool


def _subsample(a: np.ndarray, b: np.ndarray, n: int = MAX_RESIDUAL_POINTS) -> tuple[np.ndarray, np.ndarray]:
    a = a.reshape(-1, 3)
    b = b.reshape(-1, 3)
    ok = np.all(np.isfinite(a), 1) & np.all(np.isfinite(b), 1)
    idx = np.nonzero(ok)[0]
    if len(idx) > n:
        idx = idx[np.linspace(0, len(idx) - 1, n).round().astype(np.int64)]
    return a[idx], b[idx]


def residual_blocks(submaps: Sequence[Submap], loops: Sequence[LoopConstraint],
                    max_points: int = MAX_RESIDUAL_POINTS) -> list[tuple[int, np.ndarray, int, np.ndarray]]:
    """``(a, X, b, Y)`` blocks meaning ``T_a(X) - T_b(Y)``."""
    blocks = []
    for t in range(1, len(submaps)):
        x, y = _subsample(submaps[t - 1].points[-1], submaps[t].points[0], max_points)
        if len(x):
            blocks.append((t - 1, x, t, y))
    for lc in loops:
        x, y = _subsample(lc.points, lc.loop_points, max_points)
        if len(x):
            blocks.append((lc.submap, x, lc.matched_submap, y))
    return blocks


def _cost(blocks, T: list[Pose]) -> float:
    return float(sum(np.sum((T[a].apply(x) - T[b].apply(y)) ** 2) for a, x, b, y in blocks))


def _skew_rows(p: np.ndarray) -> np.ndarray:
    S = np.zeros((len(p), 3, 3))
    S[:, 0, 1], S[:, 0, 2] = -p[:, 2], p[:, 1]
    S[:, 1, 0], S[:, 1, 2] = p[:, 2], -p[:, 0]
    S[:, 2, 0], S[:, 2, 1] = -p[:, 1], p[:, 0]
    return S


def _normal_equations(blocks, T: list[Pose], n: int):
    dim = 6 * (n - 1)
    H = np.zeros((dim, dim))
    g = np.zeros(dim)
    for a, x, b, y in blocks:
        pa, pb = T[a].apply(x), T[b].apply(y)
        r = (pa - pb).reshape(-1)
        Js = {}
        for s, idx, p in ((1.0, a, pa), (-1.0, b, pb)):
            if idx == 0:
                continue
            J = np.zeros((len(p), 3, 6))
            J[:, :, :3] = -_skew_rows(p)
            J[:, :, 3:] = np.eye(3)
            J = s * J.reshape(-1, 6)
            Js[idx] = J if idx not in Js else Js[idx] + J
        for i, Ji in Js.items():
            si = slice(6 * (i - 1), 6 * i)
            g[si] += Ji.T @ r
            for j, Jj in Js.items():
                sj = slice(6 * (j - 1), 6 * j)
                H[si, sj] += Ji.T @ Jj
    return H, g


def _update(T: list[Pose], delta: np.ndarray) -> list[Pose]:
    out = [T[0]]
    for t in range(1, len(T)):
        out.append(Pose.exp(delta[6 * (t - 1) : 6 * t]) @ T[t])
    return out


def optimize_loop(submaps: Sequence[Submap], loops: Sequence[LoopConstraint] = (),
                  max_iters: int = 1000, lr: float = 0.005, init: Sequence[Pose] | None = None,
                  tol: float = 1e-9, max_points: int = MAX_RESIDUAL_POINTS) -> LoopSolution:
    """Per-submap rigid transforms minimising adjacency and loop point residuals.

    Levenberg-Marquardt on left-multiplied twists with the first transform
    pinned to identity; a gradient step at ``lr`` is tried when damping
    saturates. The cost never increases across accepted steps.
    """
    n = len(submaps)
    if n < 2:
        raise ValueError("loop optimisation needs at least two submaps")
    blocks = residual_blocks(submaps, loops, max_points)
    npts = sum(len(x) for _, x, _, _ in blocks)
    T = [Pose.identity()] + ([Pose.identity()] * (n - 1) if init is None else list(init)[1:])
    cost = _cost(blocks, T)
    if not math.isfinite(cost):
        raise FloatingPointError(f"loop cost is not finite: {cost}")
    costs = [cost]
    lam = 1e-3
    converged = False
    it = 0
    for it in range(1, max_iters + 1):
        H, g = _normal_equations(blocks, T, n)
        accepted = False
        while lam < 1e12:
            A = H + lam * np.diag(np.maximum(np.diag(H), 1e-9))
            try:
                delta = -np.linalg.solve(A, g)
            except np.linalg.LinAlgError:
                lam *= 10
                continue
            cand = _update(T, delta)
            c = _cost(blocks, cand)
            if math.isfinite(c) and c <= cost:
                accepted = True
                lam = max(lam / 10, 1e-12)
                break
            lam *= 10
        if not accepted:
            # plain gradient step on the per-point mean cost
            cand = _update(T, -lr * g / max(npts, 1))
            c = _cost(blocks, cand)
            if not (math.isfinite(c) and c < cost):
                converged = True
                break
            lam = 1e-3
        if not math.isfinite(c):
            raise FloatingPointError("loop cost became non-finite")
        rel = (cost - c) / max(cost, 1e-300)
        T, cost = cand, c
        costs.append(cost)
        if rel < tol:
            converged = True
            break
    return LoopSolution(T, costs[0], cost, it, costs, converged)


# -- applying the alignment ------------------------------------------------------------------


def apply_transforms_to_map(m: SplatMap, transforms: dict[int, Pose] | Sequence[Pose]) -> SplatMap:
    if not isinstance(transforms, dict):
        transforms = dict(enumerate(transforms))
    if all(T.close_to(Pose.identity(), 0.0) for T in transforms.values()):
        missing = set(np.unique(m.submaps).tolist()) - set(transforms)
        if missing:
            raise KeyError(f"no transform for submaps {sorted(missing)}")
        return m.copy()
    return m.transformed(transforms)


def transform_submap(sub: Submap, T: Pose) -> Submap:
    pts = tuple(np.where(np.isfinite(p), T.apply(np.nan_to_num(p)), np.nan) for p in sub.points)
    return replace(sub, poses=tuple(T @ p for p in sub.poses), points=pts)


def transform_view(v: RegisteredView, T: Pose) -> RegisteredView:
    pts = np.where(np.isfinite(v.points), T.apply(np.nan_to_num(v.points)), np.nan)
    return replace(v, pose=T @ v.pose, points=pts)


# -- global refinement --------------------------------------------------------------------


@dataclass
class GlobalPoseAdjustResult:
    views: list[RegisteredView]
    skipped: list[int]


def global_pose_adjust(m: SplatMap, views: Sequence[RegisteredView], intr: Intrinsics,
                       weights: LossWeights = LossWeights(), iters: int = 50,
                       fixed: frozenset[int] = frozenset()) -> GlobalPoseAdjustResult:
    """Re-track every view against the map, then rescale depths from the map."""
    from .mapping.renderer import SplatTensors

    st = SplatTensors.from_map(m)
    out, skipped = [], []
    for v in views:
        if v.index in fixed:
            out.append(v)
            continue
        r = refine_pose_intra(m, v, intr, weights, iters, splats=st)
        if r.skipped:
            skipped.append(v.index)
        out.append(replace(v, pose=r.pose))
    recs = feedback_views(m, out, intr)
    final = [replace(v, pose=r.pose, depth=r.depth, points=r.points) for v, r in zip(out, recs)]
    return GlobalPoseAdjustResult(final, skipped)


def fit_view_exposures(m: SplatMap, views: Sequence[RegisteredView], intr: Intrinsics) -> list[RegisteredView]:
    out = []
    for v in views:
        r = render_map(m, v.pose, intr)
        fit = fit_exposure(r["color"], v.color, r["silhouette"] > 0.5)
        out.append(replace(v, exposure=(fit.A, fit.b)) if fit.ok else v)
    return out


def global_bundle_adjust(m: SplatMap, views: Sequence[RegisteredView], intr: Intrinsics,
                         iters: int, weights: LossWeights = GBA_WEIGHTS, densify_every: int = 200,
                         exposure: bool = True, fixed: frozenset[int] = frozenset(),
                         rng: np.random.Generator | None = None) -> tuple[BundleAdjustResult, list[RegisteredView]]:
    """Bundle adjustment over all views with the normal term and optional exposure."""
    vs = fit_view_exposures(m, views, intr) if exposure else list(views)
    res = bundle_adjust(m, vs, intr, weights, iters, fixed=fixed, use_normal=True, exposure=exposure,
                        densify_every=densify_every, rng=rng)
    out = [v.with_pose_depth(res.poses[v.index], v.depth, intr) for v in vs]
    return res, out
