import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from test_phantom import probe_pose

from vascutrace.phantom import render_frame, simulate_scan
from vascutrace.segnet import read_detections, write_segmentation
from vascutrace.segnet.classical import ClassicalParams, detect_lumens, segment_frame, threshold_mask
from vascutrace.segnet.metrics import dice_iou
from vascutrace.segnet.video import SegmentParams, StubNetwork, segment_video


def test_dice_examples():
    full = np.ones((8, 8), dtype=bool)
    left = np.zeros((8, 8), dtype=bool)
    left[:, :4] = True
    d, i = dice_iou(left, full)
    assert d == pytest.approx(2 / 3, abs=1e-15) and i == 0.5
    assert dice_iou(full, full) == (1.0, 1.0)
    assert dice_iou(left, ~left) == (0.0, 0.0)
    assert dice_iou(np.zeros((3, 3)), np.zeros((3, 3))) == (1.0, 1.0)
    with pytest.raises(ValueError):
        dice_iou(np.zeros((3, 3)), np.zeros((3, 4)))


@settings(max_examples=300)
@given(st.integers(0, 2**32 - 1), st.floats(0.0, 1.0), st.floats(0.0, 1.0))
def test_property_dice_iou_relation(seed, p, q):
    rng = np.random.default_rng(seed)
    a, b = rng.random((12, 12)) < p, rng.random((12, 12)) < q
    d, i = dice_iou(a, b)
    assert d >= i - 1e-15
    assert abs(d - 2 * i / (1 + i)) < 1e-12


def test_blank_and_speckle_frames_give_no_detections():
    assert segment_frame(np.full((512, 512), 130, np.uint8))[1] == []
    speckle = np.clip(np.random.default_rng(0).normal(130, 30, (512, 512)), 0, 255).astype(np.uint8)
    mask, dets = segment_frame(speckle)
    assert dets == [] and not mask.any()


def test_single_tube_within_one_pixel(straight_phantom, bundle):
    pose = probe_pose(25.0)
    frame = render_frame(straight_phantom, pose, bundle.us_ee, 7)
    (det,) = segment_frame(frame.pixels)[1]
    cs = frame.sections[0]
    truth_native = np.asarray(cs.center_mm) / frame.mm_per_pixel
    truth_mask = (truth_native + 0.5) / 2.0 - 0.5
    assert np.hypot(*(np.asarray(det.centroid_px) - truth_mask)) < 1.0
    # ellipse area in native pixels, within 10% of the disc area
    area_native = det.area_px * 4.0
    assert abs(area_native - np.pi * (3.0 / frame.mm_per_pixel) ** 2) / area_native < 0.1


def test_fixed_threshold_and_unknown_method():
    img = np.full((64, 64), 200, np.uint8)
    img[20:30, 20:30] = 10
    assert threshold_mask(img, ClassicalParams(size=64, threshold=100.0))[25, 25]
    with pytest.raises(ValueError):
        threshold_mask(img, ClassicalParams(size=64, method="mean-shift"))


def test_tiny_contour_fallback():
    mask = np.zeros((20, 20), dtype=bool)
    mask[5:7, 5:7] = True
    (d,) = detect_lumens(mask, 3)
    assert d.ellipse is None and d.area_px == 4.0 and d.centroid_px == (5.5, 5.5) and d.frame_index == 3
    line = np.zeros((20, 20), dtype=bool)
    line[5, 5:9] = True  # zero-area contour
    assert detect_lumens(line) == []


@pytest.fixture(scope="module")
def short_recording(straight_phantom, bundle):
    path = [probe_pose(float(x)).relabel(from_frame="probe") for x in range(10, 22)]
    return simulate_scan(straight_phantom, path, bundle, seed=3)


def test_classical_video_deterministic_and_parallel(short_recording):
    a = segment_video(short_recording)
    b = segment_video(short_recording, params=SegmentParams(jobs=3))
    assert len(a) == 12
    for x, y in zip(a, b):
        assert np.array_equal(x.mask.pixels, y.mask.pixels)
        assert [d.to_dict() for d in x.detections] == [d.to_dict() for d in y.detections]
    assert all(len(r.detections) == 1 and r.detections[0].frame_index == k for k, r in enumerate(a))


def test_attention_ref_runs_and_is_deterministic(short_recording):
    params = SegmentParams(encoder_channels=32, key_channels=8, value_channels=4)
    a = segment_video(short_recording, "attention-ref", params)
    b = segment_video(short_recording, "attention-ref", params)
    assert len(a) == 12 and all(r.mask.pixels.shape == (256, 256) for r in a)
    assert all(np.array_equal(x.mask.pixels, y.mask.pixels) for x, y in zip(a, b))


def test_attention_ref_single_frame(short_recording):
    params = SegmentParams(encoder_channels=16, key_channels=4, value_channels=2)
    (r,) = segment_video(short_recording.frames[:1], "attention-ref", params)
    assert r.mask.pixels.shape == (256, 256)


def test_stub_weights_roundtrip(tmp_path):
    params = SegmentParams(encoder_channels=8, key_channels=4, value_channels=2)
    net = StubNetwork(params)
    net.save(tmp_path / "stub")
    back = StubNetwork.load(tmp_path / "stub", params)
    for k, v in net.weights.items():
        assert np.array_equal(back.weights[k], v)
    with pytest.raises(ValueError, match="expected shape"):
        StubNetwork.load(tmp_path / "stub", SegmentParams(encoder_channels=16, key_channels=4, value_channels=2))


def test_unknown_backend(short_recording):
    with pytest.raises(ValueError):
        segment_video(short_recording, "unet")


def test_segmentation_files_roundtrip(tmp_path, short_recording):
    res = segment_video(short_recording)
    write_segmentation(res, tmp_path / "seg")
    dets = read_detections(tmp_path / "seg" / "detections.jsonl")
    assert [d.to_dict() for d in dets] == [d.to_dict() for r in res for d in r.detections]
    assert len(list((tmp_path / "seg" / "masks").glob("*.pgm"))) == 12
