import numpy as np
import pytest
from conftest import straight_config

from vascutrace import io
from vascutrace.geom import RigidTransform, rotation_about
from vascutrace.phantom import (
    FRAME_INTERVAL_S,
    Heightfield,
    PhantomConfig,
    PhantomValidationError,
    build_phantom,
    image_to_ct,
    rasterize,
    read_recording,
    render_frame,
    simulate_scan,
    surface_cloud,
    write_recording,
)
from vascutrace.segnet.classical import ClassicalParams, segment_frame
from vascutrace.segnet.metrics import dice_iou

# probe looking straight down (-z) with its image plane normal along +x
DOWN = np.column_stack([[0.0, 1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, -1.0]])


def probe_pose(x, yaw_deg=0.0, y=0.0):
    R = rotation_about(np.array([0.0, 0.0, 1.0]), np.radians(yaw_deg)) @ DOWN
    return RigidTransform(R, [x, y, 0.0], "ee", "base")


def test_ground_truth_count_and_spacing(straight_phantom):
    spec = straight_phantom
    gt = spec.ground_truth.points
    total = sum(seg.length for seg in spec.segments)
    assert len(gt) == int(round(total)) + 1
    trunk_n = int(np.sum(spec.ground_truth_segment == 0))
    gaps = np.linalg.norm(np.diff(gt[:trunk_n], axis=0), axis=1)
    assert np.abs(gaps - 1.0).max() < 1e-6
    for k in (1, 2):
        seg = gt[spec.ground_truth_segment == k]
        chain = np.vstack([spec.bifurcation, seg])
        assert np.abs(np.linalg.norm(np.diff(chain, axis=0), axis=1) - 1.0).max() < 1e-6


def test_curved_segment_arc_spacing():
    cfg = straight_config()
    cfg = PhantomConfig(
        trunk=((0.0, 0.0, -25.0), (20.0, 5.0, -27.0), (45.0, 0.0, -24.0)),
        branch_a=((70.0, 20.0, -25.0), (95.0, 30.0, -22.0)),
        branch_b=((75.0, -15.0, -30.0),),
        radius=cfg.radius,
    )
    spec = build_phantom(cfg)
    trunk = spec.segment("trunk")
    n = int(np.sum(spec.ground_truth_segment == 0))
    # consecutive samples are 1 mm apart along the spline
    arcs = [trunk.arc_length(trunk.param_at(s)) for s in trunk.length - np.arange(n - 1, -1, -1)]
    assert np.abs(np.diff(arcs) - 1.0).max() < 1e-6


def test_bifurcation_appears_once(straight_phantom):
    gt = straight_phantom.ground_truth.points
    d = np.linalg.norm(gt - straight_phantom.bifurcation, axis=1)
    assert int(np.sum(d < 1e-9)) == 1


def test_branches_share_trunk_endpoint(straight_phantom):
    bif = straight_phantom.bifurcation
    for name in ("branch_a", "branch_b"):
        assert np.array_equal(straight_phantom.segment(name).point(0.0), bif)


def test_depths_within_bounds():
    spec = build_phantom(straight_config(depth=12.0))
    assert spec.depths().min() >= 12.0 - 1e-9
    with pytest.raises(PhantomValidationError, match="< 12"):
        build_phantom(straight_config(depth=11.0))
    with pytest.raises(PhantomValidationError, match="> 56"):
        build_phantom(straight_config(depth=57.0))


def test_radius_below_minimum_rejected():
    with pytest.raises(PhantomValidationError) as exc:
        build_phantom(straight_config(radius=1.9))
    assert len(exc.value.violations) == 3


def test_build_is_deterministic():
    cfg = straight_config().to_dict()
    cfg.update(random_bumps=3, seed=11)
    a, b = build_phantom(cfg), build_phantom(cfg)
    assert io.canonical_json(a.to_dict()) == io.canonical_json(b.to_dict())
    assert np.array_equal(a.ground_truth.points, b.ground_truth.points)


def test_surface_cloud_flat_grid(straight_phantom):
    cloud = surface_cloud(straight_phantom, density=1.0)
    assert cloud.frame == "camera"
    assert np.all(cloud.points[:, 2] == 0.0)
    xs = np.unique(cloud.points[:, 0])
    assert np.allclose(np.diff(xs), 1.0)


def test_surface_cloud_exact_heightfield():
    cfg = straight_config()
    cfg = PhantomConfig(cfg.trunk, cfg.branch_a, cfg.branch_b, cfg.radius, Heightfield(curvature=(0.001, 0.0, 0.0)))
    spec = build_phantom(cfg)
    p = surface_cloud(spec, 0.25).points
    assert np.array_equal(p[:, 2], spec.surface(p[:, 0], p[:, 1]))
    assert np.abs(p[:, 2] - 0.001 * p[:, 0] ** 2).max() < 1e-12
    q = surface_cloud(spec, 0.25).points
    assert np.array_equal(p, q)


def test_surface_cloud_density_validated(straight_phantom):
    with pytest.raises(ValueError):
        surface_cloud(straight_phantom, 0.0)


def _single_detection(frame):
    _, dets = segment_frame(frame.pixels, ClassicalParams())
    assert len(dets) == 1
    return dets[0]


@pytest.mark.parametrize("yaw, ratio", [(0.0, 1.0), (60.0, 2.0)])
def test_cross_section_ellipse_ratio(straight_phantom, bundle, yaw, ratio):
    frame = render_frame(straight_phantom, probe_pose(20.0, yaw), bundle.us_ee, 1)
    (cs,) = frame.sections
    a, b = cs.axes_mm
    assert abs(a / b - ratio) < 1e-9
    det = _single_detection(frame)
    major, minor = max(det.ellipse[1]), min(det.ellipse[1])
    assert abs(major / minor - ratio) / ratio < 0.05


def test_single_region_before_bifurcation_and_centroid(straight_phantom, bundle):
    pose = probe_pose(15.0)
    frame = render_frame(straight_phantom, pose, bundle.us_ee, 2)
    assert frame.artifacts == ()
    det = _single_detection(frame)
    # native pixel of the analytic tube/plane intersection
    to_ct = image_to_ct(pose, bundle.us_ee, None)
    cs = frame.sections[0]
    native = to_ct.inverse().apply(cs.center_ct)[:2] / frame.mm_per_pixel
    got = (np.asarray(det.centroid_px) + 0.5) * 2.0 - 0.5
    assert np.hypot(*(got - native)) < 0.5


def test_render_background_only_when_missing(straight_phantom, bundle):
    frame = render_frame(straight_phantom, probe_pose(-200.0), bundle.us_ee, 0)
    assert frame.sections == () and not frame.lumen_mask.any()
    assert frame.depth_setting == 100.0 and frame.shape == (512, 512)


def test_render_is_pure(straight_phantom, bundle):
    a = render_frame(straight_phantom, probe_pose(10.0), bundle.us_ee, 5)
    b = render_frame(straight_phantom, probe_pose(10.0), bundle.us_ee, 5)
    c = render_frame(straight_phantom, probe_pose(10.0), bundle.us_ee, 6)
    assert np.array_equal(a.pixels, b.pixels) and not np.array_equal(a.pixels, c.pixels)


def test_artifacts_keep_clear_of_lumens(bundle):
    spec = build_phantom(straight_config(artifact_rate=1.0))
    for k in range(20):
        frame = render_frame(spec, probe_pose(5.0 + 3 * k), bundle.us_ee, k)
        assert len(frame.artifacts) == 1
        x, y, dia = frame.artifacts[0]
        assert 2.0 <= dia <= 6.0
        for cs in frame.sections:
            assert np.hypot(x - cs.center_mm[0], y - cs.center_mm[1]) >= 10.0


def test_rendered_mask_dice_at_zero_artifacts(straight_phantom, bundle):
    frame = render_frame(straight_phantom, probe_pose(30.0), bundle.us_ee, 3)
    mask, _ = segment_frame(frame.pixels, ClassicalParams())
    truth = rasterize(frame.sections, mask.shape, frame.mm_per_pixel, 2.0)
    assert dice_iou(mask, truth)[0] >= 0.95


def _straight_path(n=100):
    return [probe_pose(float(k)).relabel(from_frame="probe") for k in range(n)]


def test_simulate_scan_entries_and_timestamps(straight_phantom, bundle):
    path = _straight_path()
    rec = simulate_scan(straight_phantom, path, bundle)
    assert len(rec) == 100
    ts = np.array([e.frame.timestamp for e in rec.entries])
    assert np.all(np.diff(ts) > 0)
    assert np.allclose(np.diff(ts), FRAME_INTERVAL_S)
    for w, e in zip(path, rec.entries):
        assert np.array_equal(e.pose.matrix, w.matrix)
    assert rec.ground_truth is straight_phantom.ground_truth


def test_simulate_scan_pose_noise_reproducible(straight_phantom, bundle):
    path = _straight_path(20)
    a = simulate_scan(straight_phantom, path, bundle, pose_noise=0.1, seed=4)
    b = simulate_scan(straight_phantom, path, bundle, pose_noise=0.1, seed=4)
    c = simulate_scan(straight_phantom, path, bundle, pose_noise=0.1, seed=5)
    da = np.array([e.pose.translation - w.translation for e, w in zip(a.entries, path)])
    db = np.array([e.pose.translation - w.translation for e, w in zip(b.entries, path)])
    dc = np.array([e.pose.translation - w.translation for e, w in zip(c.entries, path)])
    assert np.array_equal(da, db) and not np.array_equal(da, dc)
    assert 0.02 < da.std() < 0.3
    for e, w in zip(a.entries, path):
        assert np.array_equal(e.pose.rotation, w.rotation)


def test_simulate_scan_parallel_matches_serial(straight_phantom, bundle):
    path = _straight_path(8)
    a = simulate_scan(straight_phantom, path, bundle, seed=1)
    b = simulate_scan(straight_phantom, path, bundle, seed=1, jobs=3)
    assert all(np.array_equal(x.frame.pixels, y.frame.pixels) for x, y in zip(a.entries, b.entries))


def test_simulate_scan_empty_path(straight_phantom, bundle):
    with pytest.raises(ValueError):
        simulate_scan(straight_phantom, [], bundle)


def test_recording_roundtrip(tmp_path, straight_phantom, bundle):
    rec = simulate_scan(straight_phantom, _straight_path(5), bundle, pose_noise=0.1, seed=2)
    write_recording(rec, tmp_path / "rec")
    back = read_recording(tmp_path / "rec")
    assert len(back) == 5
    for x, y in zip(rec.entries, back.entries):
        assert np.array_equal(x.pose.matrix, y.pose.matrix)
        assert np.array_equal(x.frame.pixels, y.frame.pixels)
        assert x.frame.timestamp == y.frame.timestamp
    assert np.array_equal(back.ground_truth.points, rec.ground_truth.points)
    assert np.array_equal(back.calibration_bundle.us_ee.matrix, bundle.us_ee.matrix)
