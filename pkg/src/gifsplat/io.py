"""On-disk formats: scene, camera, depth, tensor (head/feature weights), PNG.

All binary formats are little-endian.  Writers go through ``atomic_write`` so
an interrupted command leaves at most a ``.partial`` file behind.
"""

from __future__ import annotations

import contextlib
import json
import os
import struct
from pathlib import Path
from typing import Dict, Iterable, List, Tuple

import numpy as np
from PIL import Image as PILImage

from .core import Camera, GaussianScene, normalize_quats

SCENE_MAGIC = b"GSPL"
SCENE_VERSION = 1
DEPTH_MAGIC = b"DPTH"
IMAGE_MAGIC = b"IMGF"
TENSOR_MAGIC = b"GTNS"
TENSOR_VERSION = 1


class FormatError(ValueError):
    pass


@contextlib.contextmanager
def atomic_write(path, mode: str = "wb"):
    """Write to ``<path>.partial`` and rename into place only on success."""
    path = Path(path)
    tmp = path.with_name(path.name + ".partial")
    try:
        with open(tmp, mode) as fh:
            yield fh
    except BaseException:
        tmp.unlink(missing_ok=True)
        raise
    os.replace(tmp, path)


# -- scenes -----------------------------------------------------------------

def scene_to_bytes(scene: GaussianScene) -> bytes:
    n = len(scene)
    records = np.concatenate([
        scene.positions, scene.log_scales, scene.rotations, scene.colors,
        scene.opacity_logits[:, None]], axis=1).astype("<f4")
    parts = [SCENE_MAGIC, struct.pack("<IQf", SCENE_VERSION, n, scene.scene_extent),
             records.tobytes()]
    if scene.feature_dim:
        parts.append(struct.pack("<I", scene.feature_dim))
        parts.append(scene.features.astype("<f4").tobytes())
    return b"".join(parts)


def scene_from_bytes(data: bytes) -> GaussianScene:
    if data[:4] != SCENE_MAGIC:
        raise FormatError("not a scene file (bad magic)")
    if len(data) < 20:
        raise FormatError("truncated scene header")
    version, n, extent = struct.unpack_from("<IQf", data, 4)
    if version != SCENE_VERSION:
        raise FormatError(f"unsupported scene file version {version}")
    off = 20
    rec_bytes = n * 14 * 4
    if len(data) < off + rec_bytes:
        raise FormatError(f"scene file declares {n} Gaussians but is truncated")
    rec = np.frombuffer(data, dtype="<f4", count=n * 14, offset=off).reshape(n, 14)
    off += rec_bytes
    feats = np.zeros((n, 0))
    if off < len(data):
        (df,) = struct.unpack_from("<I", data, off)
        off += 4
        if len(data) != off + n * df * 4:
            raise FormatError("feature block size mismatch")
        feats = np.frombuffer(data, dtype="<f4", count=n * df, offset=off).reshape(n, df)
    rec = rec.astype(float)
    return GaussianScene(
        positions=rec[:, 0:3].copy(), log_scales=rec[:, 3:6].copy(),
        rotations=normalize_quats(rec[:, 6:10]), colors=rec[:, 10:13].copy(),
        opacity_logits=rec[:, 13].copy(), features=feats.astype(float),
        scene_extent=float(extent))


def save_scene(path, scene: GaussianScene) -> None:
    with atomic_write(path) as fh:
        fh.write(scene_to_bytes(scene))


def load_scene(path) -> GaussianScene:
    return scene_from_bytes(Path(path).read_bytes())


def quantize_scene(scene: GaussianScene) -> GaussianScene:
    """The scene exactly as it will read back from a scene file."""
    return scene_from_bytes(scene_to_bytes(scene))


# -- cameras ------------------------------------------------------------------

def camera_to_dict(cam: Camera) -> dict:
    m = np.concatenate([cam.rotation, cam.translation[:, None]], axis=1)
    return {"fx": cam.fx, "fy": cam.fy, "cx": cam.cx, "cy": cam.cy,
            "width": cam.width, "height": cam.height,
            "world_to_cam": [float(v) for v in m.reshape(-1)]}


def camera_from_dict(d: dict) -> Camera:
    try:
        m = np.asarray(d["world_to_cam"], dtype=float).reshape(3, 4)
        rot = m[:, :3]
        if np.abs(rot @ rot.T - np.eye(3)).max() > 1e-5:
            raise FormatError("camera rotation is not orthonormal")
        u, _, vt = np.linalg.svd(rot)
        rot_fixed = u @ vt
        if np.linalg.det(rot_fixed) < 0:
            raise FormatError("camera rotation has negative determinant")
        if np.abs(rot_fixed - rot).max() > 1e-12:
            rot = rot_fixed
        return Camera(float(d["fx"]), float(d["fy"]), float(d["cx"]), float(d["cy"]),
                      int(d["width"]), int(d["height"]), rot, m[:, 3].copy())
    except (KeyError, TypeError) as exc:
        raise FormatError(f"malformed camera entry: {exc}") from exc


def save_cameras(path, cameras: Iterable[Camera]) -> None:
    with atomic_write(path, "w") as fh:
        json.dump([camera_to_dict(c) for c in cameras], fh, indent=1)
        fh.write("\n")


def load_cameras(path) -> List[Camera]:
    data = json.loads(Path(path).read_text())
    if not isinstance(data, list):
        raise FormatError("camera file must hold a JSON array")
    return [camera_from_dict(d) for d in data]


# -- depth maps ---------------------------------------------------------------

def save_depth(path, depth: np.ndarray) -> None:
    h, w = depth.shape
    with atomic_write(path) as fh:
        fh.write(DEPTH_MAGIC + struct.pack("<II", w, h))
        fh.write(np.asarray(depth, dtype="<f4").tobytes())


def load_depth(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if data[:4] != DEPTH_MAGIC:
        raise FormatError("not a depth file (bad magic)")
    w, h = struct.unpack_from("<II", data, 4)
    if len(data) != 12 + w * h * 4:
        raise FormatError("depth file size mismatch")
    return np.frombuffer(data, dtype="<f4", offset=12).reshape(h, w).astype(float)


# -- images -------------------------------------------------------------------

def to_uint8(image: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)


def save_png(path, image: np.ndarray) -> None:
    with atomic_write(path) as fh:
        PILImage.fromarray(to_uint8(image), mode="RGB").save(fh, format="PNG")


def load_png(path) -> np.ndarray:
    with PILImage.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=float)
    return arr / 255.0


def save_image_raw(path, image: np.ndarray) -> None:
    """Lossless float image: magic "IMGF", width, height, channels (u32), then f32."""
    h, w, c = image.shape
    with atomic_write(path) as fh:
        fh.write(IMAGE_MAGIC + struct.pack("<III", w, h, c))
        fh.write(np.asarray(image, dtype="<f4").tobytes())


def load_image_raw(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if data[:4] != IMAGE_MAGIC:
        raise FormatError("not a raw image file (bad magic)")
    w, h, c = struct.unpack_from("<III", data, 4)
    if len(data) != 16 + w * h * c * 4:
        raise FormatError("raw image file size mismatch")
    return np.frombuffer(data, dtype="<f4", offset=16).reshape(h, w, c).astype(float)


# -- tensor files (head parameters, loaded feature weights) -----------------

def tensors_to_bytes(header: dict, tensors: Dict[str, np.ndarray]) -> bytes:
    manifest = [{"name": k, "shape": list(v.shape)} for k, v in tensors.items()]
    head = dict(header, format_version=TENSOR_VERSION, manifest=manifest)
    hbytes = json.dumps(head, sort_keys=True).encode("utf-8")
    body = b"".join(np.ascontiguousarray(v, dtype="<f4").tobytes() for v in tensors.values())
    return TENSOR_MAGIC + struct.pack("<Q", len(hbytes)) + hbytes + body


def tensors_from_bytes(data: bytes) -> Tuple[dict, Dict[str, np.ndarray]]:
    if data[:4] != TENSOR_MAGIC or len(data) < 12:
        raise FormatError("not a tensor file (bad magic)")
    (hlen,) = struct.unpack_from("<Q", data, 4)
    try:
        header = json.loads(data[12:12 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"corrupt tensor header: {exc}") from exc
    if header.get("format_version") != TENSOR_VERSION:
        raise FormatError(f"unsupported tensor file version {header.get('format_version')}")
    off = 12 + hlen
    tensors: Dict[str, np.ndarray] = {}
    for entry in header.get("manifest", []):
        shape = tuple(int(s) for s in entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        if off + 4 * count > len(data):
            raise FormatError(f"tensor {entry['name']!r} is truncated")
        arr = np.frombuffer(data, dtype="<f4", count=count, offset=off).reshape(shape)
        tensors[entry["name"]] = arr.astype(float)
        off += 4 * count
    if off != len(data):
        raise FormatError("trailing bytes after tensor blocks")
    return header, tensors


def write_tensor_file(path, header: dict, tensors: Dict[str, np.ndarray]) -> None:
    with atomic_write(path) as fh:
        fh.write(tensors_to_bytes(header, tensors))


def read_tensor_file(path) -> Tuple[dict, Dict[str, np.ndarray]]:
    return tensors_from_bytes(Path(path).read_bytes())
