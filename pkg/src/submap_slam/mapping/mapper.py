"""Map-side registration and optimisation of keyframe views.

Intra-submap pose refinement against the rendered map, depth rescaling,
densification of uncovered pixels, windowed bundle adjustment, feedback of
refined poses/depths to the tracker, and closed-form exposure fitting.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np
import torch

from ..geometry import Intrinsics, Pose, depth_to_normal, depth_valid, matrix_to_quat, unproject
from ..tracking import FeedbackRecord
from .losses import (
    EmptyMaskError,
    anisotropy_loss,
    depth_to_normal_t,
    inverse_depth_loss,
    masked_l1,
    normal_consistency_loss,
    photometric_loss,
    scale_invariant_depth_loss,
)
from .renderer import DTYPE, SILHOUETTE_TAU, SplatTensors, perturbed_pose, pose_to_torch, render
from .splats import SplatMap

logger = logging.getLogger(__name__)

MIN_COVERAGE = 0.01
PRUNE_OPACITY = 0.01
GRAD_FLOOR = 1e-12  # round-off level; Adam would otherwise rescale it to a full step
DENSIFY_STRIDE = 2
DENSIFY_OPACITY = 0.7
RADIUS_FACTOR = 0.5  # fraction of the pixel footprint; sharper renders


class NonFiniteLossError(RuntimeError):
    pass


@dataclass(frozen=True)
class LossWeights:
    scale_d: float = 10.0
    depth: float = 5.0
    depth_normal: float = 0.05
    scale: float = 10.0
    normal: float = 0.05
    ssim: float = 0.2
    window: int = 10  # K + 4

    def __post_init__(self):
        for k, v in self.__dict__.items():
            if v < 0:
                raise ValueError(f"loss weight {k} must be nonnegative, got {v}")


GBA_WEIGHTS = LossWeights(depth=0.5)


@dataclass(frozen=True)
class LearningRates:
    rotation: float = 0.001
    translation: float = 0.005
    position: float = 0.0005
    color: float = 0.005
    opacity: float = 0.05
    scale: float = 0.001
    quat: float = 0.001


@dataclass(frozen=True)
class RegisteredView:
    """A keyframe registered into the map.

    ``points`` is ``pose`` applied to the unprojected ``depth`` (NaN where
    invalid). ``exposure`` is ``(A, b)`` mapping rendered to observed colour.
    """

    index: int
    submap: int
    color: np.ndarray
    pose: Pose
    depth: np.ndarray
    points: np.ndarray
    silhouette: np.ndarray | None = None
    exposure: tuple[np.ndarray, np.ndarray] = field(
        default_factory=lambda: (np.eye(3), np.zeros(3))
    )

    @classmethod
    def create(cls, index: int, submap: int, color: np.ndarray, pose: Pose, depth: np.ndarray,
               intr: Intrinsics, **kw) -> "RegisteredView":
        pts, _ = unproject(depth, intr, pose)
        return cls(index, submap, color, pose, depth, pts, **kw)

    @property
    def valid(self) -> np.ndarray:
        return depth_valid(self.depth)

    def with_pose_depth(self, pose: Pose, depth: np.ndarray, intr: Intrinsics) -> "RegisteredView":
        pts, _ = unproject(depth, intr, pose)
        return replace(self, pose=pose, depth=depth, points=pts)


def _depth_tensor(depth: np.ndarray) -> tuple[torch.Tensor, torch.Tensor]:
    valid = depth_valid(depth)
    return torch.as_tensor(np.where(valid, depth, 1.0), dtype=DTYPE), torch.as_tensor(valid)


# -- intra-submap pose refinement ---------------------------------------------


@dataclass(frozen=True)
class PoseRefinement:
    pose: Pose
    initial_loss: float
    final_loss: float
    iterations: int
    skipped: bool = False
    coverage: float = 0.0


def tracking_loss(out, color: torch.Tensor, depth: torch.Tensor, dvalid: torch.Tensor,
                  weights: LossWeights) -> torch.Tensor:
    """Silhouette-masked colour L1 plus weighted scale-invariant depth loss."""
    mask = out.depth_mask()
    loss = masked_l1(out.color, color, mask)
    dmask = mask & dvalid
    if weights.scale_d and int(dmask.sum()) >= 2:
        loss = loss + weights.scale_d * scale_invariant_depth_loss(out.depth, depth, dmask)
    return loss


def refine_pose_intra(m: SplatMap, view: RegisteredView, intr: Intrinsics,
                      weights: LossWeights = LossWeights(), iters: int = 50,
                      lr: LearningRates = LearningRates(), init: Pose | None = None,
                      splats: SplatTensors | None = None) -> PoseRefinement:
    """Refine a camera pose against the rendered map with Adam on a local twist.

    Returns the lowest-loss iterate. When the map covers less than 1% of the
    view the pose is returned unchanged with ``skipped=True``.
    """
    pose0 = view.pose if init is None else init
    st = SplatTensors.from_map(m) if splats is None else splats
    color = torch.as_tensor(view.color, dtype=DTYPE)
    depth, dvalid = _depth_tensor(view.depth)
    with torch.no_grad():
        R, t = pose_to_torch(pose0)
        cov = float(render(st, R, t, intr).depth_mask().double().mean())
    if cov < MIN_COVERAGE:
        return PoseRefinement(pose0, math.nan, math.nan, 0, True, cov)

    rot = torch.zeros(3, dtype=DTYPE, requires_grad=True)
    trans = torch.zeros(3, dtype=DTYPE, requires_grad=True)
    opt = torch.optim.Adam([{"params": [rot], "lr": lr.rotation}, {"params": [trans], "lr": lr.translation}])
    best = (math.inf, np.zeros(6))
    first = math.nan
    for it in range(iters + 1):
        opt.zero_grad()
        R, t = perturbed_pose(pose0, torch.cat([rot, trans]))
        out = render(st, R, t, intr)
        try:
            loss = tracking_loss(out, color, depth, dvalid, weights)
        except EmptyMaskError:
            break
        lv = float(loss.detach())
        if not math.isfinite(lv):
            raise NonFiniteLossError(f"pose refinement of view {view.index}: loss {lv} at iteration {it}")
        if it == 0:
            first = lv
        if lv < best[0]:
            best = (lv, torch.cat([rot, trans]).detach().numpy().copy())
        if it == iters:
            break
        loss.backward()
        opt.step()
    return PoseRefinement(pose0 @ Pose.exp(best[1]), first, best[0], iters, False, cov)


def rescale_and_reproject(view: RegisteredView, d_hat: np.ndarray, mask: np.ndarray,
                          intr: Intrinsics) -> tuple[np.ndarray, np.ndarray, float]:
    """Rescale the view depth by ``exp(mean(log d_hat - log d))`` over ``mask``.

    Returns ``(D_new, X_new, factor)`` with ``X_new`` lifted by the view pose.
    """
    ok = mask & depth_valid(d_hat) & view.valid
    if not ok.any():
        logger.warning("view %d: empty rescaling mask, depth left unchanged", view.index)
        return view.depth, view.points, 1.0
    f = float(np.exp(np.mean(np.log(d_hat[ok]) - np.log(view.depth[ok]))))
    d_new = view.depth * f
    x_new, _ = unproject(d_new, intr, view.pose)
    return d_new, x_new, f


def feedback_views(m: SplatMap, views: Sequence[RegisteredView], intr: Intrinsics) -> list[FeedbackRecord]:
    """Rendered-depth rescaled depth and point map for every view at its current pose."""
    st = SplatTensors.from_map(m)
    out = []
    for v in views:
        with torch.no_grad():
            R, t = pose_to_torch(v.pose)
            r = render(st, R, t, intr).numpy()
        d_new, x_new, _ = rescale_and_reproject(v, r["depth"], r["silhouette"] > SILHOUETTE_TAU, intr)
        out.append(FeedbackRecord(v.index, v.pose, d_new, x_new))
    return out


# -- densification -------------------------------------------------------------


def _frame_from_normal(n: np.ndarray) -> np.ndarray:
    """Quaternions whose local z axis is ``n`` (rows, unit)."""
    helper = np.where(np.abs(n[:, 2:3]) < 0.9, [[0.0, 0.0, 1.0]], [[1.0, 0.0, 0.0]])
    x = np.cross(helper, n)
    x /= np.linalg.norm(x, axis=1, keepdims=True)
    y = np.cross(n, x)
    Rs = np.stack([x, y, n], axis=2)
    return np.array([matrix_to_quat(R) for R in Rs]).reshape(-1, 4)


def densify(m: SplatMap, view: RegisteredView, intr: Intrinsics, stride: int = DENSIFY_STRIDE,
            tau: float = SILHOUETTE_TAU, opacity: float = DENSIFY_OPACITY,
            silhouette: np.ndarray | None = None) -> np.ndarray:
    """Add one splat per uncovered, valid, stride-subsampled pixel. Returns new ids.

    Splats sit at the view's point map, face the surface normal from the depth
    map (or the camera when no normal is available) and have radius
    ``depth / fx * stride / 2`` so that their two-sigma disc spans the stride.
    """
    if silhouette is None:
        if len(m):
            with torch.no_grad():
                R, t = pose_to_torch(view.pose)
                silhouette = render(SplatTensors.from_map(m), R, t, intr).silhouette.numpy()
        else:
            silhouette = np.zeros(intr.shape)
    sel = np.zeros(intr.shape, dtype=bool)
    sel[::stride, ::stride] = True
    sel &= view.valid & (silhouette < tau) & np.all(np.isfinite(view.points), axis=-1)
    if not sel.any():
        return np.zeros(0, dtype=np.int64)
    normals, nok = depth_to_normal(view.depth, intr)
    rays = intr.pixel_rays()
    n_cam = np.where(nok[..., None], normals, -rays / np.linalg.norm(rays, axis=-1, keepdims=True))
    n_world = n_cam[sel] @ view.pose.R.T
    radius = view.depth[sel] / intr.fx * stride * RADIUS_FACTOR
    return m.add(
        view.points[sel],
        _frame_from_normal(n_world),
        np.repeat(radius[:, None], 3, axis=1),
        np.full(len(radius), opacity),
        np.clip(view.color[sel], 0.0, 1.0),
        view.submap,
    )


# -- bundle adjustment -----------------------------------------------------------


@dataclass
class BundleAdjustResult:
    poses: dict[int, Pose]
    losses: list[float]
    pruned: int = 0
    aborted: bool = False


def view_loss(out, view_t: dict, weights: LossWeights, intr: Intrinsics, st: SplatTensors,
              use_normal: bool = False) -> torch.Tensor:
    """Photometric + inverse-depth + depth-normal + anisotropy (+ normal) loss of one view."""
    color = out.color
    if view_t.get("exposure") is not None:
        A, b = view_t["exposure"]
        color = color @ A.T + b
    loss = photometric_loss(color, view_t["color"], weights.ssim)
    mask = out.depth_mask() & view_t["dvalid"]
    if bool(mask.any()):
        if weights.depth:
            loss = loss + weights.depth * inverse_depth_loss(out.depth, view_t["depth"], mask)
        nmask = mask & view_t["nvalid"]
        if weights.depth_normal:
            nbar, nbar_ok = depth_to_normal_t(torch.where(mask, out.depth, torch.full_like(out.depth, math.nan)), intr)
            m2 = nmask & nbar_ok
            if bool(m2.any()):
                loss = loss + weights.depth_normal * normal_consistency_loss(view_t["normal"], nbar, m2)
        if use_normal and weights.normal and bool(nmask.any()):
            loss = loss + weights.normal * normal_consistency_loss(view_t["normal"], out.normal, nmask)
    if weights.scale:
        loss = loss + weights.scale * anisotropy_loss(st.log_scales)
    return loss


def _view_tensors(v: RegisteredView, intr: Intrinsics, exposure: bool) -> dict:
    depth, dvalid = _depth_tensor(v.depth)
    n, nok = depth_to_normal(v.depth, intr)
    d = {
        "color": torch.as_tensor(v.color, dtype=DTYPE),
        "depth": depth,
        "dvalid": dvalid,
        "normal": torch.as_tensor(np.nan_to_num(n), dtype=DTYPE),
        "nvalid": torch.as_tensor(nok),
        "exposure": None,
    }
    if exposure:
        A, b = v.exposure
        d["exposure"] = (torch.as_tensor(A, dtype=DTYPE), torch.as_tensor(b, dtype=DTYPE))
    return d


def bundle_adjust(m: SplatMap, views: Sequence[RegisteredView], intr: Intrinsics,
                  weights: LossWeights = LossWeights(), iters: int = 20,
                  lr: LearningRates = LearningRates(), fixed: set[int] | frozenset = frozenset({0}),
                  optimize_poses: bool = True, use_normal: bool = False, exposure: bool = False,
                  densify_every: int = 0, prune: bool = True,
                  rng: np.random.Generator | None = None) -> BundleAdjustResult:
    """Jointly refine splats and view poses with Adam, one view per iteration.

    Views are visited cyclically (shuffled per pass when ``rng`` is given).
    ``m`` is updated in place; refined poses are returned by frame index.
    Views whose index is in ``fixed`` keep their pose (gauge).
    """
    if not views:
        raise ValueError("bundle adjustment needs at least one view")
    st = SplatTensors.from_map(m, requires_grad=True)
    twists = {
        v.index: (torch.zeros(3, dtype=DTYPE, requires_grad=True), torch.zeros(3, dtype=DTYPE, requires_grad=True))
        for v in views
    }
    tensors = {v.index: _view_tensors(v, intr, exposure) for v in views}
    opt, losses, aborted = _make_ba_optimizer(st, twists, views, fixed, optimize_poses, lr), [], False
    order: list[int] = []
    for it in range(iters):
        if not order:
            order = list(range(len(views)))
            if rng is not None:
                rng.shuffle(order)
        v = views[order.pop(0)]
        opt.zero_grad()
        R, t = perturbed_pose(v.pose, torch.cat(twists[v.index]))
        out = render(st, R, t, intr)
        loss = view_loss(out, tensors[v.index], weights, intr, st, use_normal)
        lv = float(loss.detach())
        if not math.isfinite(lv):
            logger.warning("bundle adjustment: non-finite loss at iteration %d, stopping", it)
            aborted = True
            break
        losses.append(lv)
        loss.backward()
        _drop_roundoff(opt)
        opt.step()
        if densify_every and (it + 1) % densify_every == 0 and it + 1 < iters:
            st.write_back(m)
            poses = _current_poses(views, twists)
            for w in views:
                densify(m, replace(w, points=unproject(w.depth, intr, poses[w.index])[0], pose=poses[w.index]), intr)
            st = SplatTensors.from_map(m, requires_grad=True)
            opt = _make_ba_optimizer(st, twists, views, fixed, optimize_poses, lr)
    st.write_back(m)
    pruned = m.prune(PRUNE_OPACITY) if prune else 0
    return BundleAdjustResult(_current_poses(views, twists), losses, pruned, aborted)


def _drop_roundoff(opt: torch.optim.Optimizer) -> None:
    for group in opt.param_groups:
        for p in group["params"]:
            if p.grad is not None:
                p.grad[p.grad.abs() < GRAD_FLOOR] = 0.0


def _make_ba_optimizer(st, twists, views, fixed, optimize_poses, lr):
    groups = [
        {"params": [st.positions], "lr": lr.position},
        {"params": [st.colors], "lr": lr.color},
        {"params": [st.opacity_logits], "lr": lr.opacity},
        {"params": [st.log_scales], "lr": lr.scale},
        {"params": [st.quats], "lr": lr.quat},
    ]
    if optimize_poses:
        free = [twists[v.index] for v in views if v.index not in fixed]
        if free:
            groups.append({"params": [r for r, _ in free], "lr": lr.rotation})
            groups.append({"params": [t for _, t in free], "lr": lr.translation})
    return torch.optim.Adam(groups)


def _current_poses(views, twists) -> dict[int, Pose]:
    return {
        v.index: v.pose @ Pose.exp(torch.cat(twists[v.index]).detach().numpy()) for v in views
    }


def bundle_adjust_window(m: SplatMap, views: Sequence[RegisteredView], intr: Intrinsics,
                         weights: LossWeights = LossWeights(), iters: int = 20, **kw) -> BundleAdjustResult:
    return bundle_adjust(m, views, intr, weights, iters, **kw)


# -- exposure ------------------------------------------------------------------------


@dataclass(frozen=True)
class ExposureFit:
    A: np.ndarray
    b: np.ndarray
    ok: bool


def fit_exposure(rendered: np.ndarray, observed: np.ndarray, mask: np.ndarray | None = None,
                 rcond: float = 1e-10) -> ExposureFit:
    """Least-squares affine colour map ``observed ~ A @ rendered + b`` over ``mask``."""
    r = rendered.reshape(-1, 3)
    o = observed.reshape(-1, 3)
    sel = np.ones(len(r), bool) if mask is None else np.asarray(mask).reshape(-1)
    sel = sel & np.all(np.isfinite(r), 1) & np.all(np.isfinite(o), 1)
    if sel.sum() < 12:
        return ExposureFit(np.eye(3), np.zeros(3), False)
    X = np.concatenate([r[sel], np.ones((int(sel.sum()), 1))], axis=1)
    sv = np.linalg.svd(X, compute_uv=False)
    if sv[-1] <= rcond * sv[0]:
        return ExposureFit(np.eye(3), np.zeros(3), False)
    sol, *_ = np.linalg.lstsq(X, o[sel], rcond=None)
    return ExposureFit(sol[:3].T.copy(), sol[3].copy(), True)
