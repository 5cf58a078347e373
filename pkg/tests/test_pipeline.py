import threading
from dataclasses import replace

import numpy as np
import pytest

from submap_slam.geometry import Intrinsics, Pose
from submap_slam.io import read_point_cloud, read_tum_trajectory
from submap_slam.mapping.mapper import RegisteredView, bundle_adjust, densify
from submap_slam.mapping.renderer import render_map
from submap_slam.mapping.splats import SplatMap
from submap_slam.metrics import PSNR_CAP
from submap_slam.pipeline import (
    STAGES,
    KeyframeBuffer,
    PipelineConfig,
    RunReport,
    SyntheticSource,
    export_artifacts,
    load_source,
    render_heldout,
    run_slam,
)

INTR = Intrinsics.from_fov(64, 48)
SHORT = "synthetic:kind=orbit,frames=20"
FAST = dict(gba_iters=30, intra_iters=10, ba_iters=5, gpa_iters=5)
TRACKER_ONLY = dict(loop=False, mapper=False, intra=False, gba=False)
LOOP_S = dict(loop=False, loop_s=True, mapper=False, intra=False, gba=False)


@pytest.fixture(scope="module")
def short_run():
    return run_slam(PipelineConfig(**FAST), SHORT)


# -- configuration ---------------------------------------------------------------------


def test_defaults_are_published_values():
    c = PipelineConfig()
    assert (c.K, c.beta, c.th, c.covis_threshold) == (6, 0.7, 0.7, 0.3)
    assert (c.loop_w_pts, c.loop_w_feat, c.loop_threshold, c.min_temporal_distance) == (0.7, 0.3, 0.5, 10)
    assert (c.lambda_scale_d, c.lambda_dn, c.lambda_n, c.lambda_s) == (10, 0.05, 0.05, 10)
    assert (c.lambda_d_map, c.lambda_d_gba) == (5, 0.5)
    assert (c.intra_iters, c.ba_iters, c.loop_iters, c.densify_every) == (50, 20, 1000, 200)
    assert (c.lr_rotation, c.lr_translation) == (0.001, 0.005)
    assert c.gba_weights().depth == 0.5 and c.map_weights().depth == 5


def test_text_roundtrip_and_comments():
    c = PipelineConfig(K=4, th=0.6, loop=False, loop_s=True)
    assert PipelineConfig.from_text(c.to_text()) == c
    text = "# a comment\nK = 3   # trailing\n\nkeyframe_selection = off\n"
    d = PipelineConfig.from_text(text, seed="7")
    assert (d.K, d.keyframe_selection, d.seed) == (3, False, 7)


@pytest.mark.parametrize("text", ["bogus = 1", "K 6", "th = 1.5", "loop = maybe", "K = 0", "lr_color = -1"])
def test_invalid_config_rejected(text):
    with pytest.raises(ValueError):
        PipelineConfig.from_text(text)


def test_flag_consistency():
    with pytest.raises(ValueError):
        PipelineConfig(mapper=False)
    with pytest.raises(ValueError):
        PipelineConfig(loop=False, mapper=False, intra=True, gba=False)
    PipelineConfig(**TRACKER_ONLY)


def test_ablation_cascades():
    c = PipelineConfig().with_ablation(["mapper"])
    assert not (c.mapper or c.intra or c.gba or c.loop) and c.loop_s
    assert c.loop_mode == "points"
    assert PipelineConfig().with_ablation(["mapper", "loop_s"]).loop_mode == "off"
    assert PipelineConfig().with_ablation(["loop", "gba"]).loop_mode == "off"
    with pytest.raises(ValueError):
        PipelineConfig().with_ablation(["nope"])
    assert set(STAGES) == {"loop", "loop_s", "intra", "mapper", "gba"}


def test_source_parsing():
    s = SyntheticSource.parse("kind=orbit,frames=7,width=32,height=24")
    assert (s.trajectory, s.frames, s.width, s.height) == ("orbit", 7, 32, 24)
    frames, intr = load_source("synthetic:kind=orbit,frames=3,width=32,height=24")
    assert len(frames) == 3 and intr.shape == (24, 32)
    for bad in ("synthetic:frames", "synthetic:color=red", "video:foo"):
        with pytest.raises(ValueError):
            load_source(bad)


# -- keyframe buffer ---------------------------------------------------------------------


def _view(index, t=0.0):
    d = np.full(INTR.shape, 2.0)
    return RegisteredView.create(index, 0, np.zeros((*INTR.shape, 3)),
                                 Pose.from_rt(np.eye(3), [t, 0, 0]), d, INTR)


def test_buffer_order_and_generations():
    b = KeyframeBuffer()
    b.add(_view(0))
    b.add(_view(3))
    with pytest.raises(ValueError):
        b.add(_view(3))
    with pytest.raises(KeyError):
        b.update([_view(5)])
    snap = b.snapshot()
    b.update([_view(3, 1.0)])
    assert b.generation(3) == 1 and b.generation(0) == 0
    assert snap.get(3).pose.t[0] == 0.0 and b.get(3).pose.t[0] == 1.0
    assert b.indices == [0, 3] and 3 in b and 4 not in b and len(b) == 2


def test_buffer_readers_never_see_mixed_generations():
    b = KeyframeBuffer()
    for i in range(4):
        b.add(_view(i))
    stop, bad = threading.Event(), []

    def writer():
        for g in range(1, 300):
            b.update([_view(i, float(g)) for i in range(4)])
        stop.set()

    def reader():
        while not stop.is_set():
            s = b.snapshot()
            if len(set(s.generations.values())) != 1 or len({v.pose.t[0] for v in s.views}) != 1:
                bad.append(s.generations)

    threads = [threading.Thread(target=writer)] + [threading.Thread(target=reader) for _ in range(3)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert bad == []
    assert b.generation(0) == 299


# -- report -------------------------------------------------------------------------------


def test_report_metrics_have_units(short_run):
    rep = short_run.report
    for name, m in rep.metrics.items():
        assert m["unit"], name
        assert m["value"] is not None or m["skipped"], name
    for name in ("ate_rmse", "ate_rmse_unaligned", "accuracy", "completeness", "chamfer"):
        assert rep.metrics[name]["unit"] == "m"
    assert rep.config == PipelineConfig(**FAST).to_dict()


def test_tracker_only_marks_skips():
    r = run_slam(PipelineConfig(**TRACKER_ONLY), SHORT)
    assert r.report.metrics["psnr_mean"]["skipped"] == "mapper disabled"
    assert r.report.metrics["accuracy"]["skipped"] == "empty map"
    assert r.report.value("splat_count") == 0


def test_too_few_keyframes_degrades():
    r = run_slam(PipelineConfig(**FAST), "synthetic:kind=orbit,frames=2")
    assert r.report.metrics["ate_rmse"]["skipped"] == "fewer than 3 keyframes"
    assert r.report.value("keyframes") == 2


def test_report_json_excludes_wall_times():
    rep = RunReport()
    rep.set("ate_rmse", np.float64(0.5), "m")
    rep.stage_seconds["gba"] = 3.0
    text = rep.to_json()
    assert '"unit": "m"' in text and "gba" not in text


# -- exports ------------------------------------------------------------------------------


def test_export_roundtrip(short_run, tmp_path):
    paths = export_artifacts(short_run, tmp_path)
    for p in paths.values():
        assert p.exists()
    _, est = read_tum_trajectory(paths["trajectory_est"])
    for a, b in zip(est, short_run.system.estimated_poses()):
        assert np.abs(a.matrix() - b.matrix()).max() < 1e-9
    assert len(SplatMap.load_ply(paths["map"])) == short_run.report.value("splat_count")
    dense = read_point_cloud(paths["points_dense"])
    assert len(dense) == sum(int(v.valid.sum()) for v in short_run.system.buffer.snapshot().views)
    assert PipelineConfig.from_file(paths["config"]) == short_run.system.cfg


def test_export_to_unwritable_target(short_run, tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(OSError):
        export_artifacts(short_run, blocker / "out")


def test_deterministic_repeat(tmp_path):
    cfg = PipelineConfig(**FAST, trans_drift_sigma=0.002, seed=3)
    texts = []
    for k in range(2):
        paths = export_artifacts(run_slam(cfg, SHORT), tmp_path / str(k))
        texts.append({n: paths[n].read_bytes() for n in ("trajectory_est", "report", "loops", "map")})
    assert texts[0] == texts[1]


# -- held-out rendering ---------------------------------------------------------------------


@pytest.fixture(scope="module")
def trained():
    src = SyntheticSource("orbit", 24)
    frames, intr = src.load()
    views = [RegisteredView.create(f.index, 0, f.color, f.gt_pose, f.gt_depth, intr) for f in frames]
    m = SplatMap()
    train = views[0:12:2]
    for v in train:
        densify(m, v, intr)
    bundle_adjust(m, train, intr, iters=120, optimize_poses=False, rng=np.random.default_rng(0))
    return m, views, train, intr


def test_heldout_empty_map_skips(trained):
    _, views, _, intr = trained
    rows = render_heldout(SplatMap(), views[:3], intr)
    assert all(r["psnr"] is None and r["skipped"] == "zero silhouette" for r in rows)


def test_heldout_duplicate_render_is_perfect(trained):
    m, views, _, intr = trained
    v = views[3]
    img = render_map(m, v.pose, intr)["color"]
    (row,) = render_heldout(m, [replace(v, color=img)], intr, exposure=False)
    assert row["ssim"] == pytest.approx(1.0, abs=1e-12) and row["psnr"] == PSNR_CAP


def test_heldout_training_pose_beats_farthest_view(trained):
    m, views, train, intr = trained
    centre = np.mean([v.pose.t for v in train], axis=0)
    far = max(views[12:], key=lambda v: np.linalg.norm(v.pose.t - centre))
    (at_train,), (at_far,) = render_heldout(m, [train[2]], intr), render_heldout(m, [far], intr)
    assert at_train["psnr"] >= at_far["psnr"]


# -- end to end -----------------------------------------------------------------------------


@pytest.mark.xfail(strict=True, reason="photometric refinement against a 64x48 splat map biases poses by "
                   "a fraction of a pixel, far above 1e-6 m; see decisions ledger")
def test_noise_free_orbit_is_exact():
    r = run_slam(PipelineConfig(), "synthetic:kind=orbit,frames=60")
    assert r.report.value("ate_rmse") < 1e-6


def test_noise_free_tracker_is_exact():
    r = run_slam(PipelineConfig(**TRACKER_ONLY), "synthetic:kind=orbit,frames=60")
    assert r.report.value("ate_rmse") < 1e-6


def test_point_loop_beats_tracker_on_drifted_square():
    src = SyntheticSource("square_loop", 61).load()
    base = dict(trans_drift_sigma=0.005, keyframe_selection=False, seed=0)
    a = run_slam(PipelineConfig(**base, **TRACKER_ONLY), src).report
    b = run_slam(PipelineConfig(**base, **LOOP_S), src).report
    assert b.value("loops_accepted") >= 1
    assert b.value("ate_rmse") < a.value("ate_rmse")
