"""File formats: depth PNGs, PLY meshes, BOP-style scene JSON, feature
containers and JSON-lines reports.

Poses on disk follow the BOP layout: ``cam_R_m2c`` is a row-major 3x3
rotation and ``cam_t_m2c`` a translation in millimetres. In memory every
length is in metres.
"""

from __future__ import annotations

import json
import logging
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import FormatError, InvalidInputError, PlyParseError
from .geometry import DEPTH_MAX, DEPTH_MIN, CameraIntrinsics, RigidTransform, clamp_depth
from .matching import COARSE_STRIDE, FINE_STRIDE, FeatureMap
from .metrics import MeshModel

log = logging.getLogger(__name__)

DEFAULT_DEPTH_SCALE = 1000.0


# ---------------------------------------------------------------------------
# images

def load_depth_png(path, scale: float = DEFAULT_DEPTH_SCALE, d_min: float = DEPTH_MIN,
                   d_max: float = DEPTH_MAX, return_tally: bool = False):
    """Read a 16-bit single-channel PNG as metres (``stored / scale``), clamped.

    Zeros stay invalid. With ``return_tally`` the number of clamped pixels is
    returned as well.
    """
    if not scale > 0:
        raise InvalidInputError(f"depth scale must be positive, got {scale}")
    try:
        img = Image.open(path)
        img.load()
    except (OSError, ValueError) as exc:
        raise FormatError(f"{path}: cannot read image ({exc})") from exc
    if img.mode not in ("I;16", "I;16B", "I;16L", "I"):
        raise FormatError(f"{path}: expected a 16-bit single-channel PNG, got mode {img.mode}")
    stored = np.asarray(img)
    if img.mode == "I" and (stored.min() < 0 or stored.max() > 65535):
        raise FormatError(f"{path}: values exceed the 16-bit range")
    depth, n_clamped = clamp_depth(stored.astype(float) / scale, d_min, d_max)
    if n_clamped:
        log.info("%s: clamped %d depth values to [%g, %g]", path, n_clamped, d_min, d_max)
    return (depth, n_clamped) if return_tally else depth


def save_depth_png(path, depth, scale: float = DEFAULT_DEPTH_SCALE) -> None:
    stored = np.rint(np.asarray(depth, dtype=float) * scale)
    if stored.min() < 0 or stored.max() > 65535:
        raise InvalidInputError("depth does not fit in 16 bits at this scale")
    Image.fromarray(stored.astype(np.uint16)).save(path)


def load_gray(path) -> np.ndarray:
    """Grayscale image in [0, 1]."""
    try:
        img = Image.open(path)
        img.load()
    except (OSError, ValueError) as exc:
        raise FormatError(f"{path}: cannot read image ({exc})") from exc
    if img.mode.startswith("I;16"):
        return np.asarray(img, dtype=float) / 65535.0
    return np.asarray(img.convert("L"), dtype=float) / 255.0


def save_gray(path, image) -> None:
    img = np.clip(np.rint(np.asarray(image, dtype=float) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(img).save(path)


def load_mask(path) -> np.ndarray:
    return load_gray(path) > 0.5


def save_mask(path, mask) -> None:
    Image.fromarray((np.asarray(mask, dtype=bool) * 255).astype(np.uint8)).save(path)


def crop_roi(arrays, k: CameraIntrinsics, center, size: int = 256):
    """Crop ``size x size`` windows centred on ``center = (u, v)``.

    The window is shifted to stay inside the image and the principal point
    moves with the crop origin; focal lengths are unchanged. Raises if the
    principal point falls outside the crop.
    """
    arrays = [np.asarray(a) for a in arrays]
    w, h = min(size, k.width), min(size, k.height)
    x0 = int(np.clip(round(center[0] - w / 2), 0, k.width - w))
    y0 = int(np.clip(round(center[1] - h / 2), 0, k.height - h))
    return [a[y0:y0 + h, x0:x0 + w] for a in arrays], k.crop(x0, y0, w, h), (x0, y0)


# ---------------------------------------------------------------------------
# PLY

_PLY_TYPES = {
    "char": "i1", "int8": "i1", "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2", "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4", "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4", "double": "f8", "float64": "f8",
}


@dataclass
class _Element:
    name: str
    count: int
    props: list = field(default_factory=list)  # (name, dtype) or (name, (count_dtype, item_dtype))


def _parse_header(data: bytes):
    end = data.find(b"end_header")
    if not data.startswith(b"ply") or end < 0:
        raise PlyParseError("missing 'ply' magic or 'end_header'", 0)
    nl = data.find(b"\n", end)
    if nl < 0:
        raise PlyParseError("header not terminated by newline", end)
    fmt, elements = None, []
    offset = 0
    for raw in data[:end].split(b"\n"):
        line = raw.decode("ascii", "replace").strip()
        parts = line.split()
        try:
            if not parts or parts[0] in ("ply", "comment", "obj_info"):
                pass
            elif parts[0] == "format":
                fmt = parts[1]
            elif parts[0] == "element":
                elements.append(_Element(parts[1], int(parts[2])))
            elif parts[0] == "property":
                if not elements:
                    raise ValueError("property before any element")
                if parts[1] == "list":
                    elements[-1].props.append((parts[4], (_PLY_TYPES[parts[2]], _PLY_TYPES[parts[3]])))
                else:
                    elements[-1].props.append((parts[2], _PLY_TYPES[parts[1]]))
            else:
                raise ValueError(f"unknown header keyword {parts[0]!r}")
        except (IndexError, KeyError, ValueError) as exc:
            raise PlyParseError(f"malformed header line {line!r} ({exc})", offset) from exc
        offset += len(raw) + 1
    if fmt is None:
        raise PlyParseError("header has no format line", 0)
    if fmt == "binary_big_endian":
        raise FormatError("unsupported PLY encoding binary_big_endian; use ascii or binary_little_endian")
    if fmt not in ("ascii", "binary_little_endian"):
        raise FormatError(f"unsupported PLY encoding {fmt}")
    return fmt, elements, nl + 1


def _read_binary(data, pos, el: _Element):
    if all(not isinstance(t, tuple) for _, t in el.props):
        dt = np.dtype([(n, "<" + t) for n, t in el.props])
        need = dt.itemsize * el.count
        if pos + need > len(data):
            raise PlyParseError(f"truncated {el.name} data", len(data))
        arr = np.frombuffer(data, dtype=dt, count=el.count, offset=pos)
        return {n: arr[n].astype(float) for n, _ in el.props}, pos + need
    cols = {n: [] for n, _ in el.props}
    for _ in range(el.count):
        for n, t in el.props:
            if isinstance(t, tuple):
                ct, it = np.dtype("<" + t[0]), np.dtype("<" + t[1])
                if pos + ct.itemsize > len(data):
                    raise PlyParseError(f"truncated {el.name} list", pos)
                cnt = int(np.frombuffer(data, ct, 1, pos)[0])
                pos += ct.itemsize
                if pos + cnt * it.itemsize > len(data):
                    raise PlyParseError(f"truncated {el.name} list", pos)
                cols[n].append(np.frombuffer(data, it, cnt, pos).astype(np.int64))
                pos += cnt * it.itemsize
            else:
                dt = np.dtype("<" + t)
                if pos + dt.itemsize > len(data):
                    raise PlyParseError(f"truncated {el.name} data", pos)
                cols[n].append(float(np.frombuffer(data, dt, 1, pos)[0]))
                pos += dt.itemsize
    return cols, pos


def _read_ascii(data, pos, el: _Element, lines):
    cols = {n: [] for n, _ in el.props}
    for _ in range(el.count):
        try:
            start, line = next(lines)
        except StopIteration:
            raise PlyParseError(f"truncated {el.name} data", len(data)) from None
        tok = line.split()
        try:
            i = 0
            for n, t in el.props:
                if isinstance(t, tuple):
                    cnt = int(tok[i])
                    cols[n].append(np.array([int(x) for x in tok[i + 1:i + 1 + cnt]], dtype=np.int64))
                    if len(cols[n][-1]) != cnt:
                        raise ValueError("short list")
                    i += 1 + cnt
                else:
                    cols[n].append(float(tok[i]))
                    i += 1
        except (IndexError, ValueError) as exc:
            raise PlyParseError(f"bad {el.name} record ({exc})", start) from exc
    return cols


def _ascii_lines(data, pos):
    while pos < len(data):
        nl = data.find(b"\n", pos)
        nl = len(data) if nl < 0 else nl
        line = data[pos:nl].decode("ascii", "replace").strip()
        if line:
            yield pos, line
        pos = nl + 1


def parse_ply(data: bytes) -> tuple[np.ndarray, np.ndarray]:
    """Vertices ``(N, 3)`` and triangles ``(M, 3)`` from PLY bytes; polygons are fan-split."""
    fmt, elements, pos = _parse_header(data)
    verts, faces = None, []
    lines = _ascii_lines(data, pos) if fmt == "ascii" else None
    for el in elements:
        if fmt == "ascii":
            cols = _read_ascii(data, pos, el, lines)
        else:
            cols, pos = _read_binary(data, pos, el)
        if el.name == "vertex":
            try:
                verts = np.stack([np.asarray(cols[a], dtype=float) for a in "xyz"], axis=-1).reshape(-1, 3)
            except KeyError as exc:
                raise PlyParseError(f"vertex element lacks property {exc}", 0) from exc
        elif el.name == "face":
            key = next((n for n, _ in el.props if n in ("vertex_indices", "vertex_index")), None)
            if key is None:
                raise PlyParseError("face element lacks vertex_indices", 0)
            for poly in cols[key]:
                poly = np.asarray(poly, dtype=np.int64)
                for j in range(1, len(poly) - 1):
                    faces.append((poly[0], poly[j], poly[j + 1]))
    if verts is None:
        raise PlyParseError("no vertex element", 0)
    tris = np.asarray(faces, dtype=np.int64).reshape(-1, 3)
    if len(tris) and (tris.min() < 0 or tris.max() >= len(verts)):
        raise PlyParseError("face index out of range", 0)
    return verts, tris


def symmetry_path(mesh_path) -> Path:
    p = Path(mesh_path)
    return p.with_name(p.stem + ".sym.json")


def load_symmetries(path, unit_scale: float = 1.0) -> list:
    """Symmetries from a JSON list of 4x4 row-major matrices (file units scaled to metres)."""
    path = Path(path)
    if not path.exists():
        return [RigidTransform.identity()]
    try:
        mats = json.loads(path.read_text())
        out = []
        for m in mats:
            m = np.asarray(m, dtype=float).reshape(4, 4).copy()
            m[:3, 3] *= unit_scale
            out.append(RigidTransform.from_matrix(m))
    except (ValueError, TypeError) as exc:
        raise FormatError(f"{path}: bad symmetry file ({exc})") from exc
    return out


def load_mesh_ply(path, unit_scale: float = 1.0) -> MeshModel:
    """Load a PLY mesh; ``unit_scale`` converts file units to metres (0.001 for mm)."""
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise FormatError(f"{path}: cannot read ({exc})") from exc
    try:
        verts, tris = parse_ply(data)
    except PlyParseError as exc:
        raise PlyParseError(f"{path}: {exc.detail}", exc.offset) from None
    mesh = MeshModel(verts * unit_scale, tris, load_symmetries(symmetry_path(path), unit_scale), path.stem)
    if len(mesh.symmetries) > 1:
        mesh.check_symmetries()
    return mesh


def save_mesh_ply(path, mesh: MeshModel, binary: bool = True) -> None:
    v = np.asarray(mesh.vertices, dtype=np.float32)
    f = np.asarray(mesh.faces, dtype=np.int32)
    header = (
        f"ply\nformat {'binary_little_endian' if binary else 'ascii'} 1.0\n"
        f"element vertex {len(v)}\nproperty float x\nproperty float y\nproperty float z\n"
        f"element face {len(f)}\nproperty list uchar int vertex_indices\nend_header\n"
    )
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        if binary:
            fh.write(v.astype("<f4").tobytes())
            rec = np.zeros(len(f), dtype=[("n", "u1"), ("i", "<i4", (3,))])
            rec["n"], rec["i"] = 3, f
            fh.write(rec.tobytes())
        else:
            for p in v:
                fh.write(f"{float(p[0])!r} {float(p[1])!r} {float(p[2])!r}\n".encode())
            for t in f:
                fh.write(f"3 {t[0]} {t[1]} {t[2]}\n".encode())
    if len(mesh.symmetries) > 1:
        symmetry_path(path).write_text(json.dumps([s.matrix.tolist() for s in mesh.symmetries]))


# ---------------------------------------------------------------------------
# BOP-style scenes

@dataclass
class ObjectRecord:
    obj_id: int
    pose: RigidTransform
    mask_path: Path | None = None


@dataclass
class SceneRecord:
    im_id: int
    rgb_path: Path
    depth_path: Path
    depth_scale: float  # divisor: metres = stored / depth_scale
    intrinsics: CameraIntrinsics
    objects: list = field(default_factory=list)

    def __post_init__(self):
        if not self.depth_scale > 0:
            raise InvalidInputError("depth scale must be positive")

    def check_files(self) -> None:
        paths = [self.rgb_path, self.depth_path] + [o.mask_path for o in self.objects if o.mask_path]
        missing = [str(p) for p in paths if not Path(p).exists()]
        if missing:
            raise InvalidInputError(f"missing scene files: {', '.join(missing)}")

    def image(self) -> np.ndarray:
        return load_gray(self.rgb_path)

    def depth(self) -> np.ndarray:
        return load_depth_png(self.depth_path, self.depth_scale)

    def mask(self, obj_index: int = 0) -> np.ndarray | None:
        p = self.objects[obj_index].mask_path
        return None if p is None else load_mask(p)


def pose_to_bop(t: RigidTransform) -> dict:
    return {"cam_R_m2c": t.rotation.reshape(-1).tolist(), "cam_t_m2c": (t.translation * 1000.0).tolist()}


def pose_from_bop(d) -> RigidTransform:
    R = np.asarray(d["cam_R_m2c"], dtype=float).reshape(3, 3)
    # stored rotations are often rounded; snap to the nearest rotation
    U, _, Vt = np.linalg.svd(R)
    R = U @ np.diag([1.0, 1.0, np.sign(np.linalg.det(U @ Vt))]) @ Vt
    return RigidTransform(R, np.asarray(d["cam_t_m2c"], dtype=float) / 1000.0)


def _read_json(path):
    try:
        return json.loads(Path(path).read_text())
    except OSError as exc:
        raise InvalidInputError(f"{path}: cannot read ({exc})") from exc
    except ValueError as exc:
        raise FormatError(f"{path}: invalid JSON ({exc})") from exc


def load_scene(scene_dir, im_id: int | None = None) -> list[SceneRecord]:
    """Records for a directory with ``scene_camera.json``, ``scene_gt.json``,
    ``rgb/``, ``depth/`` and ``mask_visib/`` (or ``mask/``)."""
    root = Path(scene_dir)
    cams = _read_json(root / "scene_camera.json")
    gts = _read_json(root / "scene_gt.json") if (root / "scene_gt.json").exists() else {}
    records = []
    for key in sorted(cams, key=int):
        if im_id is not None and int(key) != im_id:
            continue
        cam = cams[key]
        name = f"{int(key):06d}.png"
        rgb = root / "rgb" / name
        if not rgb.exists():
            raise InvalidInputError(f"missing image {rgb}")
        with Image.open(rgb) as im:
            width, height = im.size
        try:
            k = CameraIntrinsics.from_matrix(cam["cam_K"], width, height)
        except KeyError as exc:
            raise FormatError(f"{root / 'scene_camera.json'}: image {key} lacks cam_K") from exc
        # BOP depth_scale multiplies stored values into millimetres
        divisor = 1000.0 / float(cam.get("depth_scale", 1.0))
        objects = []
        for j, gt in enumerate(gts.get(key, [])):
            mask = None
            for sub in ("mask_visib", "mask"):
                p = root / sub / f"{int(key):06d}_{j:06d}.png"
                if p.exists():
                    mask = p
                    break
            objects.append(ObjectRecord(int(gt["obj_id"]), pose_from_bop(gt), mask))
        rec = SceneRecord(int(key), rgb, root / "depth" / name, divisor, k, objects)
        rec.check_files()
        records.append(rec)
    if im_id is not None and not records:
        raise InvalidInputError(f"image {im_id} not found in {root}")
    return records


def write_scene(scene_dir, im_id: int, image, depth, k: CameraIntrinsics, objects, masks=None,
                depth_scale: float = DEFAULT_DEPTH_SCALE) -> SceneRecord:
    """Write one image of a BOP-style scene, merging into existing JSON files.

    ``objects`` is a list of ``(obj_id, RigidTransform)``.
    """
    root = Path(scene_dir)
    for sub in ("rgb", "depth", "mask_visib"):
        (root / sub).mkdir(parents=True, exist_ok=True)
    name = f"{im_id:06d}.png"
    save_gray(root / "rgb" / name, image)
    save_depth_png(root / "depth" / name, depth, depth_scale)
    cam_path, gt_path = root / "scene_camera.json", root / "scene_gt.json"
    cams = _read_json(cam_path) if cam_path.exists() else {}
    gts = _read_json(gt_path) if gt_path.exists() else {}
    cams[str(im_id)] = {"cam_K": k.matrix.reshape(-1).tolist(), "depth_scale": 1000.0 / depth_scale}
    gts[str(im_id)] = [dict(obj_id=int(o), **pose_to_bop(t)) for o, t in objects]
    records = []
    for j, (o, t) in enumerate(objects):
        mp = None
        if masks is not None:
            mp = root / "mask_visib" / f"{im_id:06d}_{j:06d}.png"
            save_mask(mp, masks[j])
        records.append(ObjectRecord(int(o), t, mp))
    dump_json(cam_path, {k_: cams[k_] for k_ in sorted(cams, key=int)})
    dump_json(gt_path, {k_: gts[k_] for k_ in sorted(gts, key=int)})
    return SceneRecord(im_id, root / "rgb" / name, root / "depth" / name, depth_scale, k, records)


# ---------------------------------------------------------------------------
# feature container

def _write_record(fh, fmap: FeatureMap):
    h, w, c = fmap.data.shape
    fh.write(struct.pack("<3i", h, w, c))
    fh.write(np.ascontiguousarray(fmap.data, dtype="<f4").tobytes())


def write_features(path, coarse: FeatureMap, fine: FeatureMap) -> None:
    """Coarse then fine record, each ``int32 h, w, C`` (little endian) then row-major float32."""
    with open(path, "wb") as fh:
        _write_record(fh, coarse)
        _write_record(fh, fine)


def read_features(path) -> tuple[FeatureMap, FeatureMap]:
    data = Path(path).read_bytes()
    pos, maps = 0, []
    for stride in (COARSE_STRIDE, FINE_STRIDE):
        if pos + 12 > len(data):
            raise FormatError(f"{path}: truncated feature header at byte {pos}")
        h, w, c = struct.unpack_from("<3i", data, pos)
        pos += 12
        if min(h, w, c) <= 0:
            raise FormatError(f"{path}: bad feature dimensions {h}x{w}x{c}")
        n = h * w * c * 4
        if pos + n > len(data):
            raise FormatError(f"{path}: truncated feature data at byte {pos}")
        arr = np.frombuffer(data, "<f4", h * w * c, pos).reshape(h, w, c).astype(float)
        pos += n
        maps.append(FeatureMap(arr, stride))
    if pos != len(data):
        raise FormatError(f"{path}: {len(data) - pos} trailing bytes")
    if (maps[0].grid[0] * COARSE_STRIDE, maps[0].grid[1] * COARSE_STRIDE) != \
            (maps[1].grid[0] * FINE_STRIDE, maps[1].grid[1] * FINE_STRIDE):
        raise FormatError(f"{path}: coarse and fine maps describe different image sizes")
    return maps[0], maps[1]


def import_provider(directory):
    """Feature provider reading ``<directory>/<name>.feat``; images are passed as names."""
    directory = Path(directory)

    def provider(image, depth=None):
        if not isinstance(image, (str, os.PathLike)):
            raise InvalidInputError("the import provider expects an image name, not pixels")
        return read_features(directory / f"{Path(image).stem}.feat")

    return provider


# ---------------------------------------------------------------------------
# JSON records

def _default(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, Path):
        return str(o)
    raise TypeError(f"not serializable: {type(o).__name__}")


def dumps(obj) -> str:
    return json.dumps(obj, sort_keys=True, default=_default)


def dump_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=1, sort_keys=True, default=_default) + "\n")


def write_jsonl(path, records, key: str = "pair_id") -> None:
    """Write records sorted by ``key`` (then by their serialization) so output is order-stable."""
    lines = sorted((str(r.get(key, "")), dumps(r)) for r in records)
    with open(path, "w") as fh:
        for _, line in lines:
            fh.write(line + "\n")


def read_jsonl(path) -> list[dict]:
    out = []
    with open(path) as fh:
        for i, line in enumerate(fh, 1):
            if line.strip():
                try:
                    out.append(json.loads(line))
                except ValueError as exc:
                    raise FormatError(f"{path}:{i}: invalid JSON ({exc})") from exc
    return out
