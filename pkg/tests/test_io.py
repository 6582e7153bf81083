import json
import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from gifsplat.config import ConfigError, load_config, parse_config_text, refine_config, train_config
from gifsplat.core import Camera, GaussianScene
from gifsplat.head import HeadError, HeadParams, init_head_params
from gifsplat.io import (FormatError, atomic_write, camera_from_dict, camera_to_dict,
                         load_cameras, load_depth, load_image_raw, load_png, load_scene,
                         quantize_scene, read_tensor_file, save_cameras, save_depth,
                         save_image_raw, save_png, save_scene, scene_from_bytes, scene_to_bytes,
                         write_tensor_file)

from helpers import random_scene


def _f32_scene(seed, n=7, df=5):
    return quantize_scene(random_scene(np.random.default_rng(seed), n, feature_dim=df))


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.integers(0, 20), st.sampled_from([0, 3, 12]))
def test_scene_round_trip_bit_exact(seed, n, df):
    s = _f32_scene(seed, n, df)
    data = scene_to_bytes(s)
    back = scene_from_bytes(data)
    assert back.equals(s)
    assert scene_to_bytes(back) == data
    (declared,) = struct.unpack_from("<Q", data, 8)
    assert declared == n == len(back)


def test_scene_file_on_disk(tmp_path):
    s = _f32_scene(1)
    save_scene(tmp_path / "a.gspl", s)
    assert load_scene(tmp_path / "a.gspl").equals(s)
    assert not list(tmp_path.glob("*.partial"))


def test_scene_format_errors():
    data = scene_to_bytes(_f32_scene(2))
    with pytest.raises(FormatError, match="magic"):
        scene_from_bytes(b"XXXX" + data[4:])
    with pytest.raises(FormatError, match="version"):
        scene_from_bytes(data[:4] + struct.pack("<I", 2) + data[8:])
    with pytest.raises(FormatError, match="truncated"):
        scene_from_bytes(data[:40])
    with pytest.raises(FormatError):
        scene_from_bytes(data + b"\x00")


def test_camera_round_trip(tmp_path):
    cams = [Camera.look_at([np.sin(a) * 3, 0.2, -np.cos(a) * 3], [0, 0, 0], [0, -1, 0],
                           40.0, 41.0, 16, 15.5, 32, 31) for a in (0.0, 0.4, 1.1)]
    save_cameras(tmp_path / "c.json", cams)
    back = load_cameras(tmp_path / "c.json")
    for a, b in zip(cams, back):
        assert np.array_equal(a.rotation, b.rotation)
        assert np.array_equal(a.translation, b.translation)
        assert (a.fx, a.fy, a.cx, a.cy, a.width, a.height) == (b.fx, b.fy, b.cx, b.cy, b.width, b.height)
    raw = json.loads((tmp_path / "c.json").read_text())
    assert len(raw[0]["world_to_cam"]) == 12


def test_camera_reorthonormalized_within_tolerance():
    d = camera_to_dict(Camera(10, 10, 4, 4, 8, 8))
    d["world_to_cam"][0] += 3e-6
    cam = camera_from_dict(d)
    assert np.abs(cam.rotation @ cam.rotation.T - np.eye(3)).max() < 1e-12
    d["world_to_cam"][0] += 1e-3
    with pytest.raises(FormatError):
        camera_from_dict(d)
    with pytest.raises(FormatError):
        camera_from_dict({"fx": 1})


def test_depth_and_raw_image_round_trip(tmp_path):
    rng = np.random.default_rng(3)
    d = rng.uniform(0.5, 4, (5, 7)).astype(np.float32).astype(float)
    save_depth(tmp_path / "d.dpth", d)
    assert np.array_equal(load_depth(tmp_path / "d.dpth"), d)
    raw = (tmp_path / "d.dpth").read_bytes()
    assert raw[:4] == b"DPTH" and struct.unpack_from("<II", raw, 4) == (7, 5)
    img = rng.uniform(0, 1, (5, 7, 3)).astype(np.float32).astype(float)
    save_image_raw(tmp_path / "i.f32", img)
    assert np.array_equal(load_image_raw(tmp_path / "i.f32"), img)
    (tmp_path / "bad").write_bytes(b"DPTH" + struct.pack("<II", 3, 3))
    with pytest.raises(FormatError):
        load_depth(tmp_path / "bad")


def test_png_quantization(tmp_path):
    img = np.random.default_rng(4).uniform(0, 1, (6, 5, 3))
    save_png(tmp_path / "x.png", img)
    back = load_png(tmp_path / "x.png")
    assert back.shape == img.shape
    assert np.abs(back - img).max() <= 0.5 / 255 + 1e-12


def test_head_params_round_trip(tmp_path):
    p = init_head_params(12, 12, d_model=16, n_heads=4, seed=2)
    p.save(tmp_path / "h.bin")
    back = HeadParams.load(tmp_path / "h.bin")
    assert back.equals(p)
    back.save(tmp_path / "h2.bin")
    assert (tmp_path / "h.bin").read_bytes() == (tmp_path / "h2.bin").read_bytes()
    header, _ = read_tensor_file(tmp_path / "h.bin")
    assert header["d_model"] == 16 and header["format_version"] == 1
    assert [m["name"] for m in header["manifest"]][:2] == ["embed_w", "embed_b"]


def test_tensor_file_errors(tmp_path):
    write_tensor_file(tmp_path / "t.bin", {"kind": "other"}, {"a": np.ones((2, 3))})
    with pytest.raises(HeadError):
        HeadParams.load(tmp_path / "t.bin")
    data = (tmp_path / "t.bin").read_bytes()
    (tmp_path / "trunc.bin").write_bytes(data[:-4])
    with pytest.raises(FormatError):
        read_tensor_file(tmp_path / "trunc.bin")
    (tmp_path / "junk.bin").write_bytes(b"GTNS" + struct.pack("<Q", 3) + b"{x}")
    with pytest.raises(FormatError):
        read_tensor_file(tmp_path / "junk.bin")


def test_atomic_write_failure_leaves_nothing(tmp_path):
    target = tmp_path / "out.bin"
    with pytest.raises(RuntimeError):
        with atomic_write(target) as fh:
            fh.write(b"half")
            raise RuntimeError("boom")
    assert list(tmp_path.iterdir()) == []


def test_config_parsing(tmp_path):
    text = "# comment\nsteps = 5\nmode = gifsplat   # trailing\n\nenhancer = unsharp\nlr=0.01\n"
    cfg = parse_config_text(text)
    assert cfg == {"steps": "5", "mode": "gifsplat", "enhancer": "unsharp", "lr": "0.01"}
    path = tmp_path / "c.cfg"
    path.write_text(text)
    merged = load_config(str(path), ["steps = 2"])
    rc = refine_config(merged)
    assert rc.steps == 2 and rc.mode == "gifsplat" and rc.enhancer.kind == "unsharp"
    assert train_config(merged).lr == 0.01
    with pytest.raises(ConfigError, match="unknown key"):
        parse_config_text("colour = red")
    with pytest.raises(ConfigError, match="key = value"):
        parse_config_text("steps 3")
    with pytest.raises(ConfigError, match="bad value"):
        refine_config({"steps": "three"})


def test_config_schedule():
    rc = refine_config({"ref_views": "0,2", "novel_views": "0,1,0.25; 1,2,0.5"})
    assert rc.schedule[0].refs == (0, 2)
    assert rc.schedule[0].novel == ((0, 1, 0.25), (1, 2, 0.5))
