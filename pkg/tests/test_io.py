import numpy as np
import pytest

from vascutrace import io
from vascutrace.geom import PointCloud, RigidTransform


def test_config_hash_ignores_key_order():
    assert io.config_hash({"a": 1, "b": [1, 2]}) == io.config_hash({"b": [1, 2], "a": 1})
    assert io.config_hash({"a": 1}) != io.config_hash({"a": 2})


def test_transform_roundtrip_exact(tmp_path):
    T = RigidTransform.from_rotvec([0.1, -0.2, 0.3], [1.0 / 3.0, 2.0, -7.5], "us", "ee")
    io.write_transform(tmp_path / "t.json", T, rms=0.5)
    U = io.read_transform(tmp_path / "t.json")
    assert np.array_equal(U.matrix, T.matrix)
    assert (U.from_frame, U.to_frame) == ("us", "ee")
    assert io.read_json(tmp_path / "t.json")["rms"] == 0.5


def test_ply_roundtrip_with_scalars(tmp_path):
    rng = np.random.default_rng(0)
    cloud = PointCloud(rng.normal(size=(17, 3)) * 100, "base")
    fidx = np.arange(17)
    area = rng.random(17)
    io.write_ply(tmp_path / "c.ply", cloud, {"frame_index": fidx, "area_mm2": area}, comments=["seed=1"])
    back, scalars = io.read_ply(tmp_path / "c.ply")
    assert back.frame == "base"
    assert np.array_equal(back.points, cloud.points)
    assert np.array_equal(scalars["frame_index"], fidx) and scalars["frame_index"].dtype.kind == "i"
    assert np.array_equal(scalars["area_mm2"], area)


def test_ply_scalar_length_checked(tmp_path):
    with pytest.raises(ValueError):
        io.write_ply(tmp_path / "c.ply", PointCloud(np.zeros((3, 3))), {"x2": np.zeros(2)})


def test_ply_empty_cloud(tmp_path):
    io.write_ply(tmp_path / "e.ply", PointCloud(np.zeros((0, 3)), "ct"))
    back, _ = io.read_ply(tmp_path / "e.ply")
    assert len(back) == 0 and back.frame == "ct"


def test_pgm_roundtrip_with_comments(tmp_path):
    img = np.random.default_rng(1).integers(0, 256, (7, 11), dtype=np.uint8)
    io.write_pgm(tmp_path / "f.pgm", img, comments=["config_hash=abc"])
    assert np.array_equal(io.read_pgm(tmp_path / "f.pgm"), img)
    io.write_pgm(tmp_path / "m.pgm", img > 128)
    assert set(np.unique(io.read_pgm(tmp_path / "m.pgm"))) <= {0, 255}


def test_pgm_rejects_ascii(tmp_path):
    (tmp_path / "a.pgm").write_bytes(b"P2\n2 1\n255\n0 1\n")
    with pytest.raises(ValueError):
        io.read_pgm(tmp_path / "a.pgm")


def test_jsonl_roundtrip(tmp_path):
    rows = [{"k": i, "v": [0.1 * i]} for i in range(5)]
    io.write_jsonl(tmp_path / "r.jsonl", rows)
    assert list(io.read_jsonl(tmp_path / "r.jsonl")) == rows


def test_tensors_roundtrip(tmp_path):
    rng = np.random.default_rng(2)
    t = {"w": rng.normal(size=(4, 2, 3, 3)), "b": rng.normal(size=4), "s": np.array(3.0)}
    io.write_tensors(tmp_path / "weights", t, note="x")
    back, manifest = io.read_tensors(tmp_path / "weights")
    assert manifest["note"] == "x"
    for k in t:
        assert np.array_equal(back[k], t[k])


def test_writers_are_byte_deterministic(tmp_path):
    cloud = PointCloud(np.random.default_rng(3).normal(size=(9, 3)))
    io.write_ply(tmp_path / "a.ply", cloud)
    io.write_ply(tmp_path / "b.ply", cloud)
    assert (tmp_path / "a.ply").read_bytes() == (tmp_path / "b.ply").read_bytes()
