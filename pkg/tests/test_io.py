import json
import math
import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from helpers import random_transform, textured_image
from refpose.config import RunConfig, config_from_dict, load_config
from refpose.errors import FormatError, InvalidInputError, PlyParseError
from refpose.geometry import CameraIntrinsics, RigidTransform, axis_rotation
from refpose.io import (
    crop_roi,
    import_provider,
    load_depth_png,
    load_gray,
    load_mesh_ply,
    load_scene,
    parse_ply,
    pose_from_bop,
    pose_to_bop,
    read_features,
    read_jsonl,
    save_depth_png,
    save_gray,
    save_mesh_ply,
    write_features,
    write_jsonl,
    write_scene,
)
from refpose.matching import FeatureMap, builtin_features
from refpose.metrics import MeshModel

seeds = st.integers(0, 2**31 - 1)

CUBE_PLY = b"""ply
format ascii 1.0
element vertex 8
property float x
property float y
property float z
element face 6
property list uchar int vertex_indices
end_header
0 0 0
1 0 0
1 1 0
0 1 0
0 0 1
1 0 1
1 1 1
0 1 1
4 0 1 2 3
4 4 5 6 7
4 0 1 5 4
4 1 2 6 5
4 2 3 7 6
4 3 0 4 7
"""


def test_depth_png_roundtrip_and_clamp(tmp_path):
    d = np.array([[0.0, 0.1, 1.234], [5.0, 9.5, 0.3]])
    save_depth_png(tmp_path / "d.png", d)
    out, n = load_depth_png(tmp_path / "d.png", return_tally=True)
    np.testing.assert_allclose(out, [[0.0, 0.3, 1.234], [5.0, 8.0, 0.3]])
    assert n == 2


def test_depth_png_rejects_8bit(tmp_path):
    save_gray(tmp_path / "g.png", np.zeros((4, 4)))
    with pytest.raises(FormatError):
        load_depth_png(tmp_path / "g.png")


def test_gray_roundtrip(tmp_path):
    img = textured_image(8, 8, 0)
    save_gray(tmp_path / "i.png", img)
    assert np.abs(load_gray(tmp_path / "i.png") - img).max() <= 0.5 / 255 + 1e-12


def test_crop_roi_shifts_principal_point():
    k = CameraIntrinsics(500.0, 500.0, 320.0, 240.0, 640, 480)
    (crop,), kc, (x0, y0) = crop_roi([np.zeros((480, 640))], k, (300, 250), 256)
    assert crop.shape == (256, 256)
    assert (kc.cx, kc.cy, kc.fx) == (320.0 - x0, 240.0 - y0, 500.0)
    with pytest.raises(InvalidInputError):
        crop_roi([np.zeros((480, 640))], k, (40, 40), 256)


def test_ply_ascii_cube_fan_triangulation():
    v, f = parse_ply(CUBE_PLY)
    assert v.shape == (8, 3) and f.shape == (12, 3)
    assert MeshModel(v, f).diameter == pytest.approx(math.sqrt(3), abs=1e-12)


@settings(max_examples=10)
@given(seed=seeds)
def test_ply_binary_and_ascii_roundtrip(tmp_path_factory, seed):
    rng = np.random.default_rng(seed)
    mesh = MeshModel(rng.normal(size=(10, 3)).astype(np.float32), rng.integers(0, 10, (6, 3)))
    d = tmp_path_factory.mktemp("ply")
    for binary in (True, False):
        save_mesh_ply(d / "m.ply", mesh, binary=binary)
        back = load_mesh_ply(d / "m.ply")
        np.testing.assert_array_equal(back.vertices, mesh.vertices)
        np.testing.assert_array_equal(back.faces, mesh.faces)


def test_ply_big_endian_and_truncation():
    be = CUBE_PLY.replace(b"ascii", b"binary_big_endian")
    with pytest.raises(FormatError, match="big_endian"):
        parse_ply(be)
    with pytest.raises(PlyParseError):
        parse_ply(CUBE_PLY[:-40])
    with pytest.raises(PlyParseError):
        parse_ply(b"not a ply")


def test_symmetry_sidecar_and_units(tmp_path):
    (tmp_path / "obj.ply").write_bytes(CUBE_PLY)
    assert len(load_mesh_ply(tmp_path / "obj.ply").symmetries) == 1
    rot = np.eye(4)
    rot[:3, :3] = axis_rotation("z", 180)
    rot[:3, 3] = [1000.0, 1000.0, 0.0]  # millimetres
    (tmp_path / "obj.sym.json").write_text(json.dumps([rot.tolist()]))
    m = load_mesh_ply(tmp_path / "obj.ply", unit_scale=0.001)
    assert len(m.symmetries) == 2
    np.testing.assert_allclose(m.symmetries[1].translation, [1.0, 1.0, 0.0])
    assert m.diameter == pytest.approx(math.sqrt(3) * 1e-3)


@given(seeds)
def test_bop_pose_roundtrip(seed):
    t = random_transform(np.random.default_rng(seed))
    back = pose_from_bop(json.loads(json.dumps(pose_to_bop(t))))
    np.testing.assert_allclose(back.matrix, t.matrix, atol=1e-12)


def test_scene_roundtrip(tmp_path):
    k = CameraIntrinsics(100.0, 100.0, 15.5, 11.5, 32, 24)
    depth = np.full((24, 32), 1.25)
    pose = RigidTransform(axis_rotation("y", 20), [0.01, -0.02, 0.5])
    mask = np.zeros((24, 32), dtype=bool)
    mask[5:10, 5:10] = True
    write_scene(tmp_path, 3, textured_image(24, 32, 0), depth, k, [(7, pose)], [mask], depth_scale=10000.0)
    (rec,) = load_scene(tmp_path)
    assert rec.im_id == 3 and rec.intrinsics == k and rec.depth_scale == pytest.approx(10000.0)
    np.testing.assert_allclose(rec.depth(), depth)
    np.testing.assert_allclose(rec.objects[0].pose.matrix, pose.matrix, atol=1e-12)
    np.testing.assert_array_equal(rec.mask(0), mask)
    with pytest.raises(InvalidInputError):
        load_scene(tmp_path, im_id=4)
    (tmp_path / "depth" / "000003.png").unlink()
    with pytest.raises(InvalidInputError):
        load_scene(tmp_path)


def test_feature_file_roundtrip_and_provider(tmp_path):
    c, f = builtin_features(textured_image(32, 48, 2))
    write_features(tmp_path / "img.feat", c, f)
    c2, f2 = import_provider(tmp_path)("img.png")
    np.testing.assert_allclose(c2.data, c.data.astype(np.float32))
    assert (c2.stride, f2.stride) == (8, 2)
    data = (tmp_path / "img.feat").read_bytes()
    (tmp_path / "bad.feat").write_bytes(data[:-4])
    with pytest.raises(FormatError):
        read_features(tmp_path / "bad.feat")
    bad = FeatureMap(np.ones((3, 3, 2)), 2)
    write_features(tmp_path / "mis.feat", c, bad)
    with pytest.raises(FormatError):
        read_features(tmp_path / "mis.feat")
    assert struct.unpack_from("<3i", data) == (4, 6, c.channels)


def test_jsonl_sorted_and_roundtrip(tmp_path):
    write_jsonl(tmp_path / "r.jsonl", [{"pair_id": "b", "x": np.float64(1.5)}, {"pair_id": "a", "x": 2}])
    recs = read_jsonl(tmp_path / "r.jsonl")
    assert [r["pair_id"] for r in recs] == ["a", "b"] and recs[1]["x"] == 1.5


def test_config_toml(tmp_path):
    p = tmp_path / "c.toml"
    p.write_text('[losses]\nlambda = 2.0\n[matching]\ntau = 0.2\n[registration]\nseed = 5\n'
                 '[metrics]\nmspd_px = [5, 10]\n')
    cfg = load_config(p)
    assert cfg.losses.lam == 2.0 and cfg.matching.tau == 0.2 and cfg.registration.seed == 5
    assert cfg.metrics.mspd_px == (5.0, 10.0)
    assert load_config(None) == RunConfig()


def test_config_rejects_unknown_and_invalid(tmp_path):
    with pytest.raises(InvalidInputError):
        config_from_dict({"losses": {"gamma": 1.0}})
    with pytest.raises(InvalidInputError):
        config_from_dict({"nope": {}})
    with pytest.raises(InvalidInputError):
        config_from_dict({"matching": {"theta_c": 2.0}})
    (tmp_path / "bad.toml").write_text("[depth\n")
    with pytest.raises(InvalidInputError):
        load_config(tmp_path / "bad.toml")
