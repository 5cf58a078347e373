import copy

import numpy as np
import pytest

from conftest import random_pose
from submap_slam.geometry import Intrinsics, Pose, unproject
from submap_slam.metrics import ate_rmse
from submap_slam.sim.encoder import CorruptionConfig, simulate_encoder
from submap_slam.sim.render import render_sequence
from submap_slam.sim.scene import generate_scene
from submap_slam.sim.trajectory import generate_trajectory
from submap_slam.tracking import (
    FeedbackRecord,
    SubTracker,
    apply_feedback,
    bootstrap_first_submap,
    compute_scale_factor,
    keyframe_overlap,
    register_submap,
)

K = 6


@pytest.fixture(scope="module")
def seq():
    intr = Intrinsics.from_fov(64, 48)
    frames = render_sequence(generate_scene("room", 2), generate_trajectory("orbit", 10 * K + 1), intr)
    return frames, intr


def windows(frames, n):
    """Consecutive K+1 windows sharing one overlap frame."""
    return [frames[i * K : i * K + K + 1] for i in range(n)]


def encode(win, intr, **corruption):
    return simulate_encoder(win, CorruptionConfig(**corruption), intr)


def gt_local(frames, g0):
    """Ground truth poses expressed relative to frame ``g0``."""
    inv = g0.inverse()
    return [inv @ f.gt_pose for f in frames]


def assert_pose_close(a: Pose, b: Pose, atol=1e-9):
    np.testing.assert_allclose(a.matrix(), b.matrix(), atol=atol)


def assert_points_close(a, b, atol=1e-9):
    assert np.array_equal(np.isnan(a), np.isnan(b))
    np.testing.assert_allclose(np.nan_to_num(a), np.nan_to_num(b), atol=atol)


# -- keyframe overlap -----------------------------------------------------------------


def _unit(rng, n, d):
    f = rng.standard_normal((n, d))
    return f / np.linalg.norm(f, axis=1, keepdims=True)


def test_overlap_identical_is_one(rng):
    f = _unit(rng, 48, 16).reshape(6, 8, 16)
    dec = keyframe_overlap(f, f, 0.7)
    assert dec.ratio == 1.0 and not dec.is_keyframe


def test_overlap_orthogonal_is_zero():
    eye = np.eye(16)
    a, b = eye[:8].reshape(2, 4, 16), eye[8:].reshape(2, 4, 16)
    dec = keyframe_overlap(a, b, 0.7)
    assert dec.ratio == 0.0 and dec.is_keyframe


def test_overlap_half_matched(rng):
    # reference: 8 orthonormal directions; current patch i has similarity 0.9 or 0.1 to ref i
    d = 32
    basis = np.linalg.qr(rng.standard_normal((d, d)))[0].T
    ref, ortho = basis[:8], basis[8:16]
    sims = np.array([0.9] * 4 + [0.1] * 4)
    cur = sims[:, None] * ref + np.sqrt(1 - sims**2)[:, None] * ortho
    # brute force over the full similarity matrix
    S = cur @ ref.T
    expected = np.mean(S.max(axis=1) > 0.7)
    assert expected == 0.5
    dec = keyframe_overlap(cur.reshape(2, 4, d), ref.reshape(2, 4, d), 0.7)
    assert dec.ratio == pytest.approx(0.5) and dec.is_keyframe


def test_overlap_self_is_one_for_random_maps(rng):
    for _ in range(5):
        f = _unit(rng, 12, 8).reshape(3, 4, 8)
        assert keyframe_overlap(f, f).ratio == 1.0


def test_overlap_shape_mismatch(rng):
    with pytest.raises(ValueError):
        keyframe_overlap(np.ones((2, 3, 4)), np.ones((3, 2, 4)))


# -- scale factor ---------------------------------------------------------------------


def test_scale_equal_depths(rng):
    d = rng.uniform(1, 4, (48, 64))
    assert compute_scale_factor(d, d) == (pytest.approx(1.0, abs=1e-12), True)


def test_scale_halved(rng):
    d = rng.uniform(1, 4, (48, 64))
    s, ok = compute_scale_factor(d, d / 2)
    assert ok and s == pytest.approx(2.0, abs=1e-12)


def test_scale_lognormal_statistical_oracle():
    sigma, true = 0.05, 1.3
    for seed in range(20):
        rng = np.random.default_rng(seed)
        cur = rng.uniform(1, 4, (48, 64))
        cur[rng.uniform(size=cur.shape) < 0.1] = np.nan
        prev = cur * true * np.exp(sigma * rng.standard_normal(cur.shape))
        n = int(np.isfinite(cur).sum())
        s, ok = compute_scale_factor(prev, cur)
        assert ok
        assert abs(np.log(s) - np.log(true)) < 3 * sigma / np.sqrt(n)


def test_scale_fallback_with_few_pixels(rng):
    d = np.full((48, 64), np.nan)
    d[0, :50] = 2.0
    s, ok = compute_scale_factor(d, d / 3)
    assert (s, ok) == (1.0, False)


def test_scale_shape_mismatch():
    with pytest.raises(ValueError):
        compute_scale_factor(np.ones((4, 4)), np.ones((4, 5)))


# -- bootstrap and registration -------------------------------------------------------


def test_bootstrap_identity_and_gt(seq):
    frames, intr = seq
    win = frames[: K + 1]
    sub = bootstrap_first_submap(encode(win, intr))
    assert_pose_close(sub.poses[0], Pose.identity(), 0)
    assert sub.scale == 1.0
    for j, (p, g) in enumerate(zip(sub.poses, gt_local(win, win[0].gt_pose))):
        assert_pose_close(p, g)
        expected = g.apply(encode(win, intr).points[j])
        assert_points_close(sub.points[j], expected)


def test_bootstrap_keeps_unit_scale_under_injected_scale(seq):
    frames, intr = seq
    out = encode(frames[: K + 1], intr, scale_sigma=0.5, seed=3)
    assert out.injected_scale != 1.0
    assert bootstrap_first_submap(out).scale == 1.0


def test_bootstrap_renormalises_pose_zero(seq):
    frames, intr = seq
    out = encode(frames[: K + 1], intr)
    G = random_pose(np.random.default_rng(0))
    out.poses = [G @ p for p in out.poses]
    sub = bootstrap_first_submap(out)
    for p, g in zip(sub.poses, gt_local(frames[: K + 1], frames[0].gt_pose)):
        assert_pose_close(p, g)


def test_register_exact_composition(seq):
    frames, intr = seq
    w0, w1 = windows(frames, 2)
    prev = bootstrap_first_submap(encode(w0, intr))
    nxt = register_submap(prev, encode(w1, intr))
    assert nxt.frame_indices[0] == prev.frame_indices[-1]
    for p, g in zip(nxt.poses, gt_local(w1, frames[0].gt_pose)):
        assert_pose_close(p, g)


def test_register_recovers_scale_two(seq):
    frames, intr = seq
    w0, w1 = windows(frames, 2)
    prev = bootstrap_first_submap(encode(w0, intr))
    local = encode(w1, intr)
    local.points = [2 * p for p in local.points]
    nxt = register_submap(prev, local)
    assert nxt.scale == pytest.approx(0.5, abs=1e-12)
    # world points vs ray-cast ground truth in the frame-0 world
    g0 = frames[0].gt_pose.inverse()
    for j, f in enumerate(w1):
        gt_pts, _ = unproject(f.gt_depth, intr, g0 @ f.gt_pose)
        assert_points_close(nxt.points[j], gt_pts)


def test_register_scale_factor_two_when_local_halved(seq):
    frames, intr = seq
    w0, w1 = windows(frames, 2)
    prev = bootstrap_first_submap(encode(w0, intr))
    local = encode(w1, intr)
    local.points = [p / 2 for p in local.points]
    assert register_submap(prev, local).scale == pytest.approx(2.0, abs=1e-12)


def test_register_rejects_non_overlapping(seq):
    frames, intr = seq
    prev = bootstrap_first_submap(encode(frames[:7], intr))
    with pytest.raises(ValueError):
        register_submap(prev, encode(frames[7:14], intr))


def test_chain_of_ten_submaps_unaligned_ate(seq):
    frames, intr = seq
    subs = [bootstrap_first_submap(encode(windows(frames, 10)[0], intr))]
    for w in windows(frames, 10)[1:]:
        subs.append(register_submap(subs[-1], encode(w, intr)))
    est = [subs[0].poses[0]] + [p for s in subs for p in s.poses[1:]]
    gt = gt_local(frames, frames[0].gt_pose)
    assert len(est) == len(gt) == 10 * K + 1
    assert ate_rmse(est, gt, align=False) < 1e-8


def test_register_does_not_mutate_prev(seq):
    frames, intr = seq
    w0, w1 = windows(frames, 2)
    prev = bootstrap_first_submap(encode(w0, intr, scale_sigma=0.3, seed=1))
    snapshot = copy.deepcopy(prev)
    register_submap(prev, encode(w1, intr, scale_sigma=0.3, seed=2))
    assert prev.scale == snapshot.scale
    for a, b in zip(prev.poses, snapshot.poses):
        assert_pose_close(a, b, 0)
    for a, b in zip(prev.points, snapshot.points):
        assert_points_close(a, b, 0)


def test_gauge_covariance(seq):
    frames, intr = seq
    w0, w1 = windows(frames, 2)
    prev = bootstrap_first_submap(encode(w0, intr))
    local = encode(w1, intr, rot_drift_sigma=0.01, trans_drift_sigma=0.01, scale_sigma=0.2, seed=4)
    base = register_submap(prev, local)
    G = random_pose(np.random.default_rng(7), 1.0, 2.0)
    moved = copy.deepcopy(prev)
    object.__setattr__(moved, "poses", tuple(G @ p for p in prev.poses))
    object.__setattr__(moved, "points", tuple(G.apply(p) for p in prev.points))
    out = register_submap(moved, local)
    assert out.scale == pytest.approx(base.scale, abs=1e-12)
    for a, b in zip(out.poses, base.poses):
        assert_pose_close(a, G @ b)
    for a, b in zip(out.points, base.points):
        assert_points_close(a, G.apply(b))


def test_scale_telescoping(seq):
    frames, intr = seq
    ws = windows(frames, 6)
    outs = [encode(w, intr, scale_sigma=0.3, seed=10 + i) for i, w in enumerate(ws)]
    injected = [o.injected_scale for o in outs]
    subs = [bootstrap_first_submap(outs[0])]
    for o in outs[1:]:
        subs.append(register_submap(subs[-1], o))
    # each recovered factor undoes one ratio; the product telescopes to a_0 / a_n
    for i in range(1, len(subs)):
        ratio = subs[i].scale / subs[i - 1].scale
        assert ratio == pytest.approx(injected[i - 1] / injected[i], rel=1e-6)
    prod = np.prod([subs[i].scale / subs[i - 1].scale for i in range(1, len(subs))])
    assert prod == pytest.approx(injected[0] / injected[-1], rel=1e-6)


# -- feedback ---------------------------------------------------------------------------


def _records(sub):
    return [FeedbackRecord(i, p, d, x) for i, p, d, x in zip(sub.frame_indices, sub.poses, sub.depths, sub.points)]


def test_feedback_idempotent(seq):
    frames, intr = seq
    sub = bootstrap_first_submap(encode(frames[: K + 1], intr, depth_noise_rel=0.02, seed=1))
    same = apply_feedback(sub, _records(sub))
    for a, b in zip(same.poses, sub.poses):
        assert_pose_close(a, b, 0)
    for a, b in zip(same.points, sub.points):
        assert_points_close(a, b, 0)


def test_feedback_requires_all_frames(seq):
    frames, intr = seq
    sub = bootstrap_first_submap(encode(frames[: K + 1], intr))
    with pytest.raises(ValueError):
        apply_feedback(sub, _records(sub)[:-1])


def _gt_records(win, intr, g0, c=1.0):
    recs = []
    for f in win:
        T = g0.inverse() @ f.gt_pose
        pts, _ = unproject(c * f.gt_depth, intr, T)
        recs.append(FeedbackRecord(f.index, T, c * f.gt_depth, pts))
    return recs


def test_feedback_with_gt_then_register(seq):
    frames, intr = seq
    w0, w1 = windows(frames, 2)
    noisy = bootstrap_first_submap(encode(w0, intr, rot_drift_sigma=0.02, trans_drift_sigma=0.02,
                                          depth_noise_rel=0.05, scale_sigma=0.3, seed=5))
    fixed = apply_feedback(noisy, _gt_records(w0, intr, frames[0].gt_pose))
    nxt = register_submap(fixed, encode(w1, intr))
    for p, g in zip(nxt.poses, gt_local(w1, frames[0].gt_pose)):
        assert_pose_close(p, g)


def test_feedback_depth_rescale_compensated(seq):
    frames, intr = seq
    w0, w1 = windows(frames, 2)
    local = encode(w1, intr, scale_sigma=0.2, seed=8)
    prev = bootstrap_first_submap(encode(w0, intr))
    base = register_submap(prev, local).scale
    for c in (0.5, 1.7, 3.0):
        scaled = apply_feedback(prev, _gt_records(w0, intr, frames[0].gt_pose, c))
        assert register_submap(scaled, local).scale == pytest.approx(c * base, rel=1e-9)


# -- tracker state machine -------------------------------------------------------------


def test_tracker_forms_overlapping_submaps(seq):
    frames, intr = seq
    tr = SubTracker(lambda w: encode(w, intr), K=K, select_keyframes=False)
    done = [s for s in (tr.process(f) for f in frames) if s is not None]
    assert len(done) == 10
    for a, b in zip(done[:-1], done[1:]):
        assert b.frame_indices[0] == a.frame_indices[-1]
        assert len(b) == K + 1
    assert tr.flush() is None


def test_tracker_drops_repeated_frames(seq):
    frames, intr = seq
    tr = SubTracker(lambda w: encode(w, intr), K=K)
    for _ in range(5):
        tr.process(frames[0])
    assert len(tr.keyframes) == 1
