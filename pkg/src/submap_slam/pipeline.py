"""End-to-end SLAM loop: tracker, mapper and loop closure exchanging views
through a keyframe buffer, plus configuration, reporting and exports."""

from __future__ import annotations

import dataclasses
import json
import logging
import threading
import time
from concurrent.futures import Future, ThreadPoolExecutor
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from . import backend as be
from .geometry import Intrinsics, Pose, umeyama, unproject
from .io import write_point_cloud, write_tum_trajectory
from .mapping.mapper import (
    LearningRates,
    LossWeights,
    RegisteredView,
    bundle_adjust,
    densify,
    feedback_views,
    fit_exposure,
    refine_pose_intra,
    rescale_and_reproject,
)
from .mapping.renderer import SILHOUETTE_TAU, render_map
from .mapping.splats import SplatMap
from .metrics import accuracy_completeness_chamfer, ate_rmse, psnr, ssim
from .sim.encoder import CorruptionConfig, simulate_encoder
from .sim.render import Frame, render_sequence
from .sim.scene import generate_scene
from .sim.trajectory import generate_trajectory
from .sim.tum import load_tum_sequence
from .tracking import FeedbackRecord, SubTracker, Submap, apply_feedback

logger = logging.getLogger(__name__)

STAGES = ("loop", "loop_s", "intra", "mapper", "gba")


# -- configuration -----------------------------------------------------------------


@dataclass(frozen=True)
class PipelineConfig:
    """Every tunable of a run. Defaults follow the published settings."""

    K: int = 6
    beta: float = 0.7
    th: float = 0.7
    covis_threshold: float = 0.3
    depth_tolerance: float = 0.1
    loop_w_pts: float = 0.7
    loop_w_feat: float = 0.3
    loop_threshold: float = 0.5
    min_temporal_distance: int = 10
    loop_cooldown: int = 20
    lambda_scale_d: float = 10.0
    lambda_d_map: float = 5.0
    lambda_d_gba: float = 0.5
    lambda_dn: float = 0.05
    lambda_n: float = 0.05
    lambda_s: float = 10.0
    ssim_weight: float = 0.2
    window_extra: int = 4
    intra_iters: int = 50
    ba_iters: int = 20
    loop_iters: int = 1000
    loop_lr: float = 0.005
    gba_iters: int = 400
    densify_every: int = 200
    gpa_iters: int = 50
    lr_rotation: float = 0.001
    lr_translation: float = 0.005
    lr_position: float = 0.0005
    lr_color: float = 0.005
    lr_opacity: float = 0.05
    lr_scale: float = 0.001
    lr_quat: float = 0.001
    densify_stride: int = 2
    keyframe_selection: bool = True
    heldout_every: int = 8
    exposure_gba: bool = True
    # encoder simulation
    scale_sigma: float = 0.0
    rot_drift_sigma: float = 0.0
    trans_drift_sigma: float = 0.0
    depth_noise_rel: float = 0.0
    dropout: float = 0.0
    # stages
    loop: bool = True
    loop_s: bool = False
    intra: bool = True
    mapper: bool = True
    gba: bool = True
    seed: int = 0
    deterministic: bool = True

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.K < 1:
            raise ValueError("K must be at least 1")
        for name in ("beta", "th", "covis_threshold", "loop_threshold", "depth_tolerance"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name}={v} must lie in [0, 1]")
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, (int, float)) and not isinstance(v, bool) and v < 0:
                raise ValueError(f"{f.name}={v} must be nonnegative")
        if self.min_temporal_distance < 0:
            raise ValueError("min_temporal_distance must be nonnegative")
        if not self.mapper and (self.intra or self.gba):
            raise ValueError("intra registration and global BA need the mapper")
        if self.loop and not self.mapper:
            raise ValueError("bidirectional loop closure needs the mapper; use loop_s instead")

    # -- construction helpers --

    @classmethod
    def from_text(cls, text: str, **overrides) -> "PipelineConfig":
        values = {}
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"config line {lineno}: expected key=value, got {line!r}")
            k, v = (s.strip() for s in line.split("=", 1))
            values[k] = v
        values.update(overrides)
        return cls.from_dict(values)

    @classmethod
    def from_file(cls, path: str | Path, **overrides) -> "PipelineConfig":
        return cls.from_text(Path(path).read_text(), **overrides)

    @classmethod
    def from_dict(cls, values: dict) -> "PipelineConfig":
        known = {f.name: f for f in fields(cls)}
        kw = {}
        for k, v in values.items():
            if k not in known:
                raise ValueError(f"unknown config key {k!r}")
            kw[k] = _coerce(v, type(getattr(cls, k)) if hasattr(cls, k) else str)
        return cls(**kw)

    def with_ablation(self, names: Sequence[str]) -> "PipelineConfig":
        """Disable stages; disabling the mapper also disables its dependants."""
        off = {n.strip() for n in names if n.strip()}
        bad = off - set(STAGES)
        if bad:
            raise ValueError(f"unknown stages {sorted(bad)}; choose from {STAGES}")
        kw = {n: False for n in off}
        if "mapper" in off:
            kw.update(intra=False, gba=False)
            if self.loop and "loop" not in off:
                logger.warning("mapper disabled: bidirectional loop closure falls back to loop_s")
                kw.update(loop=False, loop_s="loop_s" not in off)
        return replace(self, **kw)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_text(self) -> str:
        return "".join(f"{k} = {_fmt_value(v)}\n" for k, v in self.to_dict().items())

    # -- derived objects --

    @property
    def loop_mode(self) -> str:
        if self.loop:
            return "full"
        return "points" if self.loop_s else "off"

    def map_weights(self) -> LossWeights:
        return LossWeights(self.lambda_scale_d, self.lambda_d_map, self.lambda_dn, self.lambda_s,
                           self.lambda_n, self.ssim_weight, self.K + self.window_extra)

    def gba_weights(self) -> LossWeights:
        return replace(self.map_weights(), depth=self.lambda_d_gba)

    def learning_rates(self) -> LearningRates:
        return LearningRates(self.lr_rotation, self.lr_translation, self.lr_position, self.lr_color,
                             self.lr_opacity, self.lr_scale, self.lr_quat)

    def corruption(self) -> CorruptionConfig:
        return CorruptionConfig(self.scale_sigma, self.rot_drift_sigma, self.trans_drift_sigma,
                                self.depth_noise_rel, self.dropout, self.seed)


def _coerce(v, kind):
    if not isinstance(v, str):
        return kind(v) if kind in (int, float) and not isinstance(v, bool) else v
    if kind is bool:
        low = v.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {v!r}")
    return kind(v)


def _fmt_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    return repr(v) if isinstance(v, float) else str(v)


# -- sources --------------------------------------------------------------------------


@dataclass(frozen=True)
class SyntheticSource:
    trajectory: str = "square_loop"
    frames: int = 120
    scene: str = "room"
    scene_seed: int = 0
    width: int = 64
    height: int = 48
    hfov: float = 70.0

    @classmethod
    def parse(cls, source: str) -> "SyntheticSource":
        kw = {}
        for part in filter(None, (p.strip() for p in source.split(","))):
            if "=" not in part:
                raise ValueError(f"synthetic source: expected key=value, got {part!r}")
            k, v = part.split("=", 1)
            k = "trajectory" if k == "kind" else k
            if k not in {f.name for f in fields(cls)}:
                raise ValueError(f"synthetic source: unknown key {k!r}")
            kw[k] = _coerce(v, type(getattr(cls, k)))
        return cls(**kw)

    def load(self) -> tuple[list[Frame], Intrinsics]:
        intr = Intrinsics.from_fov(self.width, self.height, self.hfov)
        scene = generate_scene(self.scene, self.scene_seed)
        poses = generate_trajectory(self.trajectory, self.frames)
        return render_sequence(scene, poses, intr), intr


def load_source(source: str) -> tuple[list[Frame], Intrinsics]:
    """``synthetic:<key=value,...>`` or ``tum:<directory>``."""
    if source.startswith("synthetic:") or source == "synthetic":
        return SyntheticSource.parse(source.partition(":")[2]).load()
    if source.startswith("tum:"):
        frames, _, intr = load_tum_sequence(source[4:])
        return frames, intr
    raise ValueError(f"unknown source {source!r}; expected synthetic:... or tum:<dir>")


# -- keyframe buffer ---------------------------------------------------------------------


@dataclass(frozen=True)
class BufferSnapshot:
    views: tuple[RegisteredView, ...]
    generations: dict[int, int]

    def get(self, index: int) -> RegisteredView:
        for v in self.views:
            if v.index == index:
                return v
        raise KeyError(index)


class KeyframeBuffer:
    """Ordered registered views with per-view generation counters.

    Writers replace whole immutable views under a lock, so readers taking a
    snapshot never see a half-applied update.
    """

    def __init__(self):
        self._lock = threading.Lock()
        self._views: dict[int, RegisteredView] = {}
        self._gen: dict[int, int] = {}
        self._order: list[int] = []

    def __len__(self) -> int:
        return len(self._order)

    def __contains__(self, index: int) -> bool:
        return index in self._views

    def add(self, view: RegisteredView) -> None:
        with self._lock:
            if self._order and view.index <= self._order[-1]:
                raise ValueError(f"keyframe index {view.index} is not increasing")
            self._views[view.index] = view
            self._gen[view.index] = 0
            self._order.append(view.index)

    def update(self, views: Sequence[RegisteredView]) -> None:
        with self._lock:
            for v in views:
                if v.index not in self._views:
                    raise KeyError(f"view {v.index} is not in the buffer")
            for v in views:
                self._views[v.index] = v
                self._gen[v.index] += 1

    def get(self, index: int) -> RegisteredView:
        with self._lock:
            return self._views[index]

    def generation(self, index: int) -> int:
        with self._lock:
            return self._gen[index]

    def snapshot(self) -> BufferSnapshot:
        with self._lock:
            return BufferSnapshot(tuple(self._views[i] for i in self._order), dict(self._gen))

    @property
    def indices(self) -> list[int]:
        with self._lock:
            return list(self._order)


# -- report -------------------------------------------------------------------------------


@dataclass
class RunReport:
    """Metrics with units; a metric that could not be computed carries a reason."""

    metrics: dict[str, dict] = field(default_factory=dict)
    heldout: list[dict] = field(default_factory=list)
    loop_events: list[str] = field(default_factory=list)
    stage_seconds: dict[str, float] = field(default_factory=dict)
    config: dict = field(default_factory=dict)

    def set(self, name: str, value, unit: str) -> None:
        self.metrics[name] = {"value": value, "unit": unit}

    def skip(self, name: str, reason: str, unit: str) -> None:
        self.metrics[name] = {"value": None, "unit": unit, "skipped": reason}

    def value(self, name: str):
        return self.metrics[name]["value"]

    def to_json(self) -> str:
        """Deterministic content only; wall times are exported separately."""
        doc = {"metrics": self.metrics, "heldout": self.heldout, "loop_events": self.loop_events,
               "config": self.config}
        return json.dumps(doc, indent=2, sort_keys=True, default=_json_default) + "\n"


def _json_default(o):
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    raise TypeError(f"cannot serialise {type(o)}")


# -- the SLAM system ---------------------------------------------------------------------


@dataclass
class LoopRecord:
    candidate: be.LoopCandidate
    constraint: be.LoopConstraint
    cost_before: float
    cost_after: float


class SlamSystem:
    """Single-writer orchestration of tracking, mapping and loop closure."""

    def __init__(self, cfg: PipelineConfig, intr: Intrinsics, parallel: bool = False):
        self.cfg = cfg
        self.intr = intr
        self.parallel = parallel
        self.rng = np.random.default_rng(cfg.seed)
        self.corruption = cfg.corruption()
        self._salt = 0
        self.tracker = SubTracker(self._encode, cfg.K, cfg.beta, cfg.th, cfg.keyframe_selection)
        self.buffer = KeyframeBuffer()
        self.map = SplatMap()
        self.graph = be.CovisibilityGraph(cfg.covis_threshold)
        self.frames: dict[int, Frame] = {}
        self.ordinal: dict[int, int] = {}
        self.home: dict[int, int] = {}  # keyframe -> submap that registered it
        self.loops: list[LoopRecord] = []
        self.loop_log: list[str] = []
        self.last_loop: dict[int, int] = {}
        self.flags: dict[str, int] = {"intra_skipped": 0, "gpa_skipped": 0, "scale_fallback": 0,
                                      "loop_skipped": 0, "ba_aborted": 0}
        self.times: dict[str, float] = {}
        self._executor = ThreadPoolExecutor(1) if parallel else None
        self._gba_pending: tuple[Future, BufferSnapshot, int] | None = None

    # -- bookkeeping --

    def _timed(self, stage: str):
        sys_ = self

        class _T:
            def __enter__(self):
                self.t0 = time.perf_counter()

            def __exit__(self, *exc):
                sys_.times[stage] = sys_.times.get(stage, 0.0) + time.perf_counter() - self.t0

        return _T()

    def _encode(self, window: Sequence[Frame]):
        return simulate_encoder(window, self.corruption, self.intr, salt=self._salt)

    def heldout(self, index: int) -> bool:
        n = self.cfg.heldout_every
        return bool(n) and self.cfg.mapper and self.ordinal[index] % n == n - 1

    def mapping_views(self, views: Sequence[RegisteredView]) -> list[RegisteredView]:
        return [v for v in views if not self.heldout(v.index)]

    # -- main entry points --

    def process(self, frame: Frame) -> None:
        self.frames[frame.index] = frame
        with self._timed("tracking"):
            sub = self.tracker.process(frame)
        for kf in self.tracker.keyframes[len(self.ordinal):]:
            self.ordinal[kf.index] = len(self.ordinal)
        if sub is not None:
            self._on_submap(sub)

    def finish(self) -> None:
        with self._timed("tracking"):
            sub = self.tracker.flush()
        if sub is not None:
            self._on_submap(sub)
        self._merge_gba(wait=True)
        if self.cfg.gba and len(self.buffer):
            self._run_gba(final=True)

    # -- per submap --

    def _on_submap(self, sub: Submap) -> None:
        if not sub.scale_ok:
            self.flags["scale_fallback"] += 1
        self._merge_gba(wait=False)
        new = []
        for j, fi in enumerate(sub.frame_indices):
            if fi in self.buffer:
                continue
            f = self.frames[fi]
            v = RegisteredView.create(fi, sub.id, f.color, sub.poses[j], sub.depths[j], self.intr)
            self.home[fi] = sub.id
            self.buffer.add(v)
            new.append(v)
        if self.cfg.mapper:
            with self._timed("mapping"):
                self._map_submap(sub, new)
        with self._timed("loop"):
            self._covisibility_and_loops(sub, new)

    def _map_submap(self, sub: Submap, new: list[RegisteredView]) -> None:
        cfg, intr = self.cfg, self.intr
        weights, lr = cfg.map_weights(), cfg.learning_rates()
        refined: list[RegisteredView] = []
        prev_in, prev_out = None, None
        for v in new:
            pose0 = v.pose
            if prev_in is not None:
                # carry the previous frame's correction along the submap
                pose0 = prev_out @ (prev_in.inverse() @ v.pose)
            if cfg.intra and len(self.map):
                r = refine_pose_intra(self.map, v, intr, weights, cfg.intra_iters, lr, init=pose0)
                pose = r.pose
                if r.skipped:
                    self.flags["intra_skipped"] += 1
            else:
                pose = pose0 if cfg.intra else v.pose
            prev_in, prev_out = v.pose, pose
            v = v.with_pose_depth(pose, v.depth, intr)
            if cfg.intra and len(self.map):
                r = render_map(self.map, pose, intr)
                d_new, _, _ = rescale_and_reproject(v, r["depth"], r["silhouette"] > SILHOUETTE_TAU, intr)
                v = v.with_pose_depth(pose, d_new, intr)
            if not self.heldout(v.index):
                densify(self.map, v, intr, stride=cfg.densify_stride)
            refined.append(v)
        self.buffer.update(refined)

        window = self.mapping_views([self.buffer.get(v.index) for v in new])
        older = [v for v in self.mapping_views(self.buffer.snapshot().views)
                 if v.index not in {w.index for w in window}]
        if older and cfg.window_extra:
            pick = self.rng.choice(len(older), size=min(cfg.window_extra, len(older)), replace=False)
            window += [older[i] for i in sorted(pick)]
        if window and cfg.ba_iters:
            res = bundle_adjust(self.map, window, intr, weights, cfg.ba_iters, lr, fixed=self._fixed(),
                                rng=self.rng)
            if res.aborted:
                self.flags["ba_aborted"] += 1
            self.buffer.update([v.with_pose_depth(res.poses[v.index], v.depth, intr) for v in window])
        self._feedback(sub)

    def _fixed(self) -> frozenset[int]:
        first = self.buffer.indices[:1]
        return frozenset(first)

    def _feedback(self, sub: Submap) -> None:
        """Push map-refined poses and depths of ``sub``'s frames back to the tracker."""
        views = [self.buffer.get(i) for i in sub.frame_indices]
        recs = feedback_views(self.map, views, self.intr)
        self.buffer.update([replace(v, depth=r.depth, points=r.points) for v, r in zip(views, recs)])
        self.tracker.replace_submap(apply_feedback(self.tracker.submaps[sub.id], recs))

    # -- loops --

    def _covisibility_and_loops(self, sub: Submap, new: list[RegisteredView]) -> None:
        cfg = self.cfg
        best = None
        for v in new:
            v = self.buffer.get(v.index)
            snap = self.buffer.snapshot()
            previous = [w for w in snap.views if w.index < v.index]
            be.covisibility_update(self.graph, v, previous, self.intr, cfg.depth_tolerance)
            if cfg.loop_mode == "off":
                continue
            feats = {w.index: self.frames[w.index].features for w in snap.views}
            cand, scored = be.detect_loop(
                self.graph, v, previous, feats, self.intr, self.ordinal, cfg.min_temporal_distance,
                cfg.loop_threshold, (cfg.loop_w_pts, cfg.loop_w_feat), cfg.beta, cfg.depth_tolerance,
            )
            for c in scored:
                self.loop_log.append(c.log_line())
            if cand is not None:
                m = self.home[cand.matched]
                last = self.last_loop.get(m)
                if last is not None and self.ordinal[v.index] - last < cfg.loop_cooldown:
                    continue
                if best is None or cand.score > best.score:
                    best = cand
        if best is not None:
            self._close_loop(sub, best)

    def _close_loop(self, sub: Submap, cand: be.LoopCandidate) -> None:
        cfg = self.cfg
        m = self.home[cand.matched]
        matched_sub = self.tracker.submaps[m]
        try:
            idx = be.loop_window(matched_sub, cand.matched, cfg.K)
            self._salt += 1
            loop_sub = be.build_loop_submap(self._encode, [self.frames[i] for i in idx],
                                            self.frames[cand.current], matched_sub, cand.matched)
        except (ValueError, KeyError) as exc:
            logger.warning("loop %s skipped: %s", cand, exc)
            self.flags["loop_skipped"] += 1
            return
        i = self.home[cand.current]
        cur_sub = self.tracker.submaps[i]
        j = list(cur_sub.frame_indices).index(cand.current)
        lc = be.LoopConstraint(i, cur_sub.points[j], m, loop_sub.points[-1])
        constraints = [rec.constraint for rec in self.loops] + [lc]
        sol = be.optimize_loop(self.tracker.submaps, constraints, cfg.loop_iters, cfg.loop_lr)
        self.last_loop[m] = self.ordinal[cand.current]
        self.loops.append(LoopRecord(cand, lc, sol.initial_cost, sol.final_cost))
        self._apply_transforms(sol.transforms)
        if cfg.loop_mode == "full":
            with self._timed("global_pose_adjust"):
                self._global_pose_adjust()
            if cfg.gba:
                self._run_gba(final=False)

    def _apply_transforms(self, T: list[Pose]) -> None:
        for t, sub in enumerate(self.tracker.submaps):
            self.tracker.replace_submap(be.transform_submap(sub, T[t]))
        for k, rec in enumerate(self.loops):
            c = rec.constraint
            moved = replace(
                c,
                points=np.where(np.isfinite(c.points), T[c.submap].apply(np.nan_to_num(c.points)), np.nan),
                loop_points=np.where(np.isfinite(c.loop_points),
                                     T[c.matched_submap].apply(np.nan_to_num(c.loop_points)), np.nan),
            )
            self.loops[k] = replace(rec, constraint=moved)
        snap = self.buffer.snapshot()
        self.buffer.update([be.transform_view(v, T[self.home[v.index]]) for v in snap.views])
        if self.cfg.loop_mode == "full":
            self.map = be.apply_transforms_to_map(self.map, dict(enumerate(T)))

    def _global_pose_adjust(self) -> None:
        snap = self.buffer.snapshot()
        res = be.global_pose_adjust(self.map, snap.views, self.intr, self.cfg.map_weights(),
                                    self.cfg.gpa_iters, fixed=self._fixed())
        self.flags["gpa_skipped"] += len(res.skipped)
        self.buffer.update(res.views)
        self._sync_tracker()

    def _sync_tracker(self) -> None:
        """Feed buffer poses/depths of every submap frame back to the tracker."""
        for sub in list(self.tracker.submaps):
            recs = []
            for fi in sub.frame_indices:
                v = self.buffer.get(fi)
                recs.append(FeedbackRecord(fi, v.pose, v.depth, v.points))
            self.tracker.replace_submap(apply_feedback(sub, recs))

    # -- global bundle adjustment --

    def _gba_inputs(self):
        snap = self.buffer.snapshot()
        return self.map.copy(), self.mapping_views(snap.views), snap

    def _gba_job(self, m: SplatMap, views, seed: int):
        res, out = be.global_bundle_adjust(
            m, views, self.intr, self.cfg.gba_iters, self.cfg.gba_weights(), self.cfg.densify_every,
            self.cfg.exposure_gba, fixed=self._fixed(), rng=np.random.default_rng(seed),
        )
        return m, out, res

    def _run_gba(self, final: bool) -> None:
        if not self.mapping_views(self.buffer.snapshot().views) or not self.cfg.gba_iters:
            return
        m, views, snap = self._gba_inputs()
        seed = int(self.rng.integers(2**31))
        if self.parallel and not final:
            self._merge_gba(wait=True)
            base_next = self.map.next_id
            fut = self._executor.submit(self._gba_job, m, views, seed)
            self._gba_pending = (fut, snap, base_next)
            return
        with self._timed("gba"):
            m, out, res = self._gba_job(m, views, seed)
        if res.aborted:
            self.flags["ba_aborted"] += 1
        self.map = m
        self._commit_gba(out)

    def _commit_gba(self, out: Sequence[RegisteredView]) -> None:
        self.buffer.update([replace(self.buffer.get(v.index), pose=v.pose, points=v.points,
                                    exposure=v.exposure) for v in out])
        self._sync_tracker()

    def _merge_gba(self, wait: bool) -> None:
        pending = self._gba_pending
        if pending is None:
            return
        fut, snap, base_next = pending
        if not wait and not fut.done():
            return
        m, out, res = fut.result()
        # splats added by the mapper while GBA ran are carried over unchanged
        newer = self.map.ids >= base_next
        if newer.any():
            m.positions = np.concatenate([m.positions, self.map.positions[newer]])
            m.quats = np.concatenate([m.quats, self.map.quats[newer]])
            m.scales = np.concatenate([m.scales, self.map.scales[newer]])
            m.opacities = np.concatenate([m.opacities, self.map.opacities[newer]])
            m.colors = np.concatenate([m.colors, self.map.colors[newer]])
            m.submaps = np.concatenate([m.submaps, self.map.submaps[newer]])
            m.ids = np.concatenate([m.ids, self.map.ids[newer]])
        m.next_id = max(m.next_id, self.map.next_id)
        self.map = m
        # only views untouched since the snapshot take the GBA result
        fresh = [v for v in out if self.buffer.generation(v.index) == snap.generations[v.index]]
        self._commit_gba(fresh)
        self._gba_pending = None

    def close(self) -> None:
        if self._executor is not None:
            self._executor.shutdown(wait=True)

    # -- results --

    def keyframe_indices(self) -> list[int]:
        return self.buffer.indices

    def estimated_poses(self) -> list[Pose]:
        return [v.pose for v in self.buffer.snapshot().views]


# -- running and reporting ----------------------------------------------------------------


@dataclass
class RunResult:
    report: RunReport
    system: SlamSystem
    frames: list[Frame]
    intr: Intrinsics


def run_slam(cfg: PipelineConfig, source: str | tuple[list[Frame], Intrinsics],
             parallel: bool = False) -> RunResult:
    """Run the full pipeline over a source and compute the report."""
    if cfg.deterministic:
        torch.use_deterministic_algorithms(True)
        torch.set_num_threads(1)
    frames, intr = load_source(source) if isinstance(source, str) else source
    if not frames:
        raise ValueError("source has no frames")
    t0 = time.perf_counter()
    system = SlamSystem(cfg, intr, parallel=parallel and not cfg.deterministic)
    try:
        for f in frames:
            system.process(f)
        system.finish()
    finally:
        system.close()
    system.times["total"] = time.perf_counter() - t0
    report = build_report(system, frames, intr)
    return RunResult(report, system, frames, intr)


def gt_point_cloud(frames: Sequence[Frame], indices: Sequence[int], intr: Intrinsics,
                   stride: int = 4) -> np.ndarray:
    by = {f.index: f for f in frames}
    pts = []
    for i in indices:
        f = by[i]
        p, ok = unproject(f.gt_depth, intr, f.gt_pose)
        pts.append(p[::stride, ::stride][ok[::stride, ::stride]])
    return np.concatenate(pts) if pts else np.zeros((0, 3))


def render_heldout(m: SplatMap, views: Sequence[RegisteredView], intr: Intrinsics,
                   exposure: bool = True) -> list[dict]:
    """PSNR/SSIM of map renders at held-out poses against their observed images."""
    rows = []
    for v in views:
        r = render_map(m, v.pose, intr)
        cover = r["silhouette"] > SILHOUETTE_TAU
        if not cover.any():
            rows.append({"frame": v.index, "psnr": None, "ssim": None, "skipped": "zero silhouette"})
            continue
        img = r["color"]
        if exposure:
            fit = fit_exposure(img, v.color, cover)
            if fit.ok:
                img = np.clip(img @ fit.A.T + fit.b, 0.0, 1.0)
        rows.append({"frame": v.index, "psnr": psnr(img, v.color), "ssim": ssim(img, v.color)})
    return rows


def build_report(system: SlamSystem, frames: Sequence[Frame], intr: Intrinsics) -> RunReport:
    rep = RunReport(config=system.cfg.to_dict())
    idx = system.keyframe_indices()
    by = {f.index: f for f in frames}
    est = system.estimated_poses()
    gt = [by[i].gt_pose for i in idx]
    rep.set("keyframes", len(idx), "count")
    if len(idx) >= 3:
        rep.set("ate_rmse", ate_rmse(est, gt, align=True, with_scale=True), "m")
        align = umeyama(np.array([p.t for p in est]), np.array([p.t for p in gt]), with_scale=True)
    else:
        rep.skip("ate_rmse", "fewer than 3 keyframes", "m")
        align = None
    if idx:
        # the first keyframe defines the estimate's world frame
        anchor = gt[0].inverse()
        rep.set("ate_rmse_unaligned", ate_rmse(est, [anchor @ g for g in gt], align=False), "m")
    else:
        rep.skip("ate_rmse_unaligned", "no keyframes", "m")
    m = system.map
    rep.set("splat_count", len(m), "count")
    rep.set("map_bytes", len(_ply_bytes(m)), "bytes")
    if len(m) and align is not None:
        ref = gt_point_cloud(frames, idx, intr)
        acc, comp, ch = accuracy_completeness_chamfer(align.apply(m.positions), ref)
        rep.set("accuracy", acc, "m")
        rep.set("completeness", comp, "m")
        rep.set("chamfer", ch, "m")
    else:
        for k in ("accuracy", "completeness", "chamfer"):
            rep.skip(k, "empty map" if not len(m) else "no trajectory alignment", "m")
    held = [v for v in system.buffer.snapshot().views if system.heldout(v.index)]
    if system.cfg.mapper and held:
        rep.heldout = render_heldout(m, held, intr, exposure=system.cfg.exposure_gba)
        vals = [r["psnr"] for r in rep.heldout if r["psnr"] is not None]
        if vals:
            rep.set("psnr_mean", float(np.mean(vals)), "dB")
            rep.set("ssim_mean", float(np.mean([r["ssim"] for r in rep.heldout if r["ssim"] is not None])), "1")
        else:
            rep.skip("psnr_mean", "all held-out views uncovered", "dB")
            rep.skip("ssim_mean", "all held-out views uncovered", "1")
    else:
        reason = "mapper disabled" if not system.cfg.mapper else "no held-out keyframes"
        rep.skip("psnr_mean", reason, "dB")
        rep.skip("ssim_mean", reason, "1")
    rep.set("loops_accepted", len(system.loops), "count")
    for k, v in system.flags.items():
        rep.set(k, v, "count")
    rep.loop_events = list(system.loop_log)
    rep.stage_seconds = dict(system.times)
    return rep


def _ply_bytes(m: SplatMap) -> bytes:
    import tempfile

    with tempfile.TemporaryDirectory() as d:
        p = Path(d) / "m.ply"
        m.save_ply(p)
        return p.read_bytes()


def export_artifacts(result: RunResult, out_dir: str | Path) -> dict[str, Path]:
    """Write trajectories, map, dense points, report and loop log into ``out_dir``."""
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create output directory {out}: {exc}") from exc
    if not out.is_dir():
        raise OSError(f"{out} is not a directory")
    system, frames = result.system, result.frames
    by = {f.index: f for f in frames}
    idx = system.keyframe_indices()
    stamps = [by[i].timestamp for i in idx]
    paths = {k: out / n for k, n in [
        ("trajectory_est", "trajectory_est.txt"), ("trajectory_gt", "trajectory_gt.txt"),
        ("map", "map.ply"), ("points_dense", "points_dense.ply"), ("report", "report.json"),
        ("loops", "loops.log"), ("timings", "timings.json"), ("config", "config.txt"),
    ]}
    try:
        write_tum_trajectory(paths["trajectory_est"], stamps, system.estimated_poses())
        write_tum_trajectory(paths["trajectory_gt"], stamps, [by[i].gt_pose for i in idx])
        system.map.save_ply(paths["map"])
        views = system.buffer.snapshot().views
        pts = [v.points[v.valid] for v in views]
        cols = [v.color[v.valid] for v in views]
        write_point_cloud(paths["points_dense"], np.concatenate(pts) if pts else np.zeros((0, 3)),
                          np.concatenate(cols) if cols else np.zeros((0, 3)))
        paths["report"].write_text(result.report.to_json())
        paths["loops"].write_text("".join(line + "\n" for line in result.report.loop_events))
        paths["timings"].write_text(json.dumps({k: {"value": v, "unit": "s"}
                                                for k, v in sorted(result.report.stage_seconds.items())},
                                               indent=2) + "\n")
        paths["config"].write_text(system.cfg.to_text())
    except OSError as exc:
        raise OSError(f"failed to write artifacts to {out}: {exc}") from exc
    return paths
