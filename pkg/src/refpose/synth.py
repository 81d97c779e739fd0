"""Procedural query/reference scenes with exact ground truth.

Each pair shares one textured blob object. The query and reference views
see it against different textured back walls and different distractor
blobs; the reference view rotates the object about the camera's vertical
axis through the object's centre by the configured gap. Textures are solid
(3D) functions of the object-frame surface point, so the same surface point
has the same intensity in both views.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import InvalidInputError
from .geometry import (
    DEPTH_MAX,
    DEPTH_MIN,
    CameraIntrinsics,
    RigidTransform,
    axis_rotation,
    backproject,
    clamp_depth,
    random_rotation,
)
from .metrics import MeshModel, rasterize


@dataclass
class SynthConfig:
    n_pairs: int = 8
    width: int = 256
    height: int = 192
    focal: float = 250.0
    depth_range: tuple = (DEPTH_MIN, DEPTH_MAX)
    object_radius: float = 0.09
    object_distance: tuple = (0.55, 0.7)
    n_distractors: int = 2
    texture_richness: int = 24  # sinusoid components per texture
    texture_scale: tuple = (0.012, 0.05)  # wavelength range in metres
    outlier_fraction: float = 0.0
    noise_std: float = 0.0  # metres
    gap_deg: tuple = (0.0, 45.0, 0.0)  # rotation about camera x, y, z through the object centre
    subdivisions: int = 3
    seed: int = 0

    def __post_init__(self):
        self.depth_range = tuple(float(x) for x in self.depth_range)
        self.object_distance = tuple(float(x) for x in self.object_distance)
        self.texture_scale = tuple(float(x) for x in self.texture_scale)
        self.gap_deg = tuple(float(x) for x in self.gap_deg)
        if self.n_pairs < 1 or self.n_distractors < 0 or self.texture_richness < 1:
            raise InvalidInputError("n_pairs >= 1, n_distractors >= 0, texture_richness >= 1 required")
        if self.width % 8 or self.height % 8:
            raise InvalidInputError("image size must be divisible by 8")
        lo, hi = self.depth_range
        if not 0 < lo < hi:
            raise InvalidInputError("bad depth range")
        dlo, dhi = self.object_distance
        if not lo < dlo <= dhi < hi:
            raise InvalidInputError("object distance must lie inside the depth range")
        if not 0 <= self.outlier_fraction <= 1 or self.noise_std < 0:
            raise InvalidInputError("outlier_fraction in [0, 1] and noise_std >= 0 required")
        if len(self.gap_deg) != 3:
            raise InvalidInputError("gap_deg needs one angle per axis")

    def camera(self) -> CameraIntrinsics:
        return CameraIntrinsics(self.focal, self.focal, (self.width - 1) / 2, (self.height - 1) / 2,
                                self.width, self.height)


# ---------------------------------------------------------------------------
# geometry and texture

def icosphere(subdivisions: int = 3) -> tuple[np.ndarray, np.ndarray]:
    """Unit sphere mesh by repeated midpoint subdivision of an icosahedron."""
    p = (1 + 5 ** 0.5) / 2
    v = [(-1, p, 0), (1, p, 0), (-1, -p, 0), (1, -p, 0), (0, -1, p), (0, 1, p),
         (0, -1, -p), (0, 1, -p), (p, 0, -1), (p, 0, 1), (-p, 0, -1), (-p, 0, 1)]
    f = [(0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11), (1, 5, 9), (5, 11, 4),
         (11, 10, 2), (10, 7, 6), (7, 1, 8), (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8),
         (3, 8, 9), (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1)]
    verts = [np.array(x, dtype=float) / np.linalg.norm(x) for x in v]
    faces = f
    for _ in range(subdivisions):
        cache, new = {}, []

        def mid(a, b):
            key = (min(a, b), max(a, b))
            if key not in cache:
                m = verts[a] + verts[b]
                verts.append(m / np.linalg.norm(m))
                cache[key] = len(verts) - 1
            return cache[key]

        for a, b, c in faces:
            ab, bc, ca = mid(a, b), mid(b, c), mid(c, a)
            new += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
        faces = new
    return np.array(verts), np.array(faces, dtype=np.int64)


@dataclass
class SolidTexture:
    """Sum of random 3D sinusoids squashed into [0, 1]."""

    freqs: np.ndarray  # (n, 3) angular frequencies, rad/m
    phases: np.ndarray
    amps: np.ndarray

    @classmethod
    def random(cls, rng, n, wavelengths) -> "SolidTexture":
        d = rng.normal(size=(n, 3))
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        lam = np.exp(rng.uniform(np.log(wavelengths[0]), np.log(wavelengths[1]), n))
        return cls(d * (2 * np.pi / lam)[:, None], rng.uniform(0, 2 * np.pi, n), rng.uniform(0.5, 1.0, n))

    def __call__(self, points) -> np.ndarray:
        s = np.sin(points @ self.freqs.T + self.phases) @ self.amps
        s /= np.sqrt(0.5 * np.sum(self.amps ** 2))
        return 0.5 + 0.5 * np.tanh(1.2 * s)


def blob(rng, radius, subdivisions=3) -> MeshModel:
    """Asymmetric star-shaped blob: a sphere with a smooth random radial bump field."""
    v, f = icosphere(subdivisions)
    d = rng.normal(size=(5, 3))
    bump = np.sin(v @ d.T * 1.5 + rng.uniform(0, 2 * np.pi, 5)) @ rng.uniform(0.05, 0.12, 5)
    return MeshModel(v * (radius * (1 + bump))[:, None], f)


def _wall(z, half_w, half_h, tilt_deg):
    # subdivide so perspective interpolation has small triangles
    n = 8
    xs = np.linspace(-half_w, half_w, n + 1)
    ys = np.linspace(-half_h, half_h, n + 1)
    gx, gy = np.meshgrid(xs, ys)
    v = np.stack([gx.ravel(), gy.ravel(), np.zeros(gx.size)], axis=-1)
    idx = np.arange((n + 1) ** 2).reshape(n + 1, n + 1)
    a, b, c, d = idx[:-1, :-1].ravel(), idx[:-1, 1:].ravel(), idx[1:, 1:].ravel(), idx[1:, :-1].ravel()
    faces = np.concatenate([np.stack([a, b, c], 1), np.stack([a, c, d], 1)])
    R = axis_rotation("x", tilt_deg[0]) @ axis_rotation("y", tilt_deg[1])
    return MeshModel(v, faces), RigidTransform(R, [0.0, 0.0, z])


# ---------------------------------------------------------------------------
# rendering

@dataclass
class View:
    """One rendered image with its exact depth, target mask and target pose."""

    image: np.ndarray
    depth: np.ndarray
    mask: np.ndarray
    k: CameraIntrinsics
    pose: RigidTransform  # object -> camera
    clean_depth: np.ndarray | None = None


@dataclass
class _Item:
    mesh: MeshModel
    pose: RigidTransform
    texture: SolidTexture


def render_view(items, k: CameraIntrinsics):
    """Rasterize textured items; item 0 is the target. Returns (image, depth, mask)."""
    verts, faces, owner, local = [], [], [], []
    offset = 0
    for i, it in enumerate(items):
        verts.append(it.pose.apply(it.mesh.vertices))
        local.append(it.mesh.vertices)
        faces.append(it.mesh.faces + offset)
        owner.append(np.full(len(it.mesh.faces), i))
        offset += len(it.mesh.vertices)
    V, F, own, L = np.concatenate(verts), np.concatenate(faces), np.concatenate(owner), np.concatenate(local)
    r = rasterize(V, F, k)
    image = np.zeros(r.depth.shape)
    hit = r.face_id >= 0
    fid = r.face_id[hit]
    pts = np.einsum("nk,nkj->nj", r.bary[hit], L[F[fid]])
    vals = np.zeros(len(fid))
    for i, it in enumerate(items):
        sel = own[fid] == i
        vals[sel] = it.texture(pts[sel])
    image[hit] = vals
    mask = np.zeros(r.depth.shape, dtype=bool)
    mask[hit] = own[fid] == 0
    return image, r.depth, mask


def _place_distractor(rng, cfg, k, target_xy, target_px):
    for _ in range(100):
        z = rng.uniform(cfg.object_distance[0] + 0.05, cfg.object_distance[1] + 0.25)
        u = rng.uniform(0.1, 0.9) * cfg.width
        v = rng.uniform(0.1, 0.9) * cfg.height
        if np.hypot(u - target_xy[0], v - target_xy[1]) > target_px * 1.6:
            break
    x = (u - k.cx) * z / k.fx
    y = (v - k.cy) * z / k.fy
    return RigidTransform(random_rotation(rng), [x, y, z])


def gap_rotation(gap_deg) -> np.ndarray:
    gx, gy, gz = gap_deg
    return axis_rotation("z", gz) @ axis_rotation("y", gy) @ axis_rotation("x", gx)


@dataclass
class ScenePair:
    pair_id: str
    mesh: MeshModel
    query: View
    reference: View

    @property
    def relative_pose(self) -> RigidTransform:
        """Exact query-camera to reference-camera transform."""
        return self.reference.pose @ self.query.pose.inverse()


def _corrupt(depth, rng, cfg):
    out = depth.copy()
    valid = out > 0
    if cfg.noise_std > 0:
        out[valid] += rng.normal(0.0, cfg.noise_std, int(valid.sum()))
    if cfg.outlier_fraction > 0:
        idx = np.flatnonzero(valid)
        pick = rng.random(len(idx)) < cfg.outlier_fraction
        out.flat[idx[pick]] = rng.uniform(*cfg.depth_range, int(pick.sum()))
    out[valid & (out <= 0)] = cfg.depth_range[0]
    return clamp_depth(out, *cfg.depth_range)[0]


def synth_pair(cfg: SynthConfig, index: int = 0) -> ScenePair:
    """Pair ``index`` of the suite defined by ``cfg`` (deterministic in ``cfg.seed``)."""
    rng = np.random.default_rng([cfg.seed, index])
    k = cfg.camera()
    mesh = blob(rng, cfg.object_radius, cfg.subdivisions)
    tex = SolidTexture.random(rng, cfg.texture_richness, cfg.texture_scale)
    z = rng.uniform(*cfg.object_distance)
    center = np.array([rng.uniform(-0.15, 0.15) * cfg.width * z / k.fx,
                       rng.uniform(-0.15, 0.15) * cfg.height * z / k.fy, z])
    R_q = random_rotation(rng)
    pose_q = RigidTransform(R_q, center)
    pose_r = RigidTransform(gap_rotation(cfg.gap_deg) @ R_q, center)
    target_xy = (k.fx * center[0] / z + k.cx, k.fy * center[1] / z + k.cy)
    target_px = k.fx * cfg.object_radius * 1.3 / z

    views = []
    for pose in (pose_q, pose_r):
        items = [_Item(mesh, pose, tex)]
        for _ in range(cfg.n_distractors):
            items.append(_Item(blob(rng, cfg.object_radius * rng.uniform(0.4, 0.8), 2),
                               _place_distractor(rng, cfg, k, target_xy, target_px),
                               SolidTexture.random(rng, cfg.texture_richness, cfg.texture_scale)))
        wz = rng.uniform(1.1, 1.5)
        wall, wall_pose = _wall(wz, 1.2 * wz * cfg.width / k.fx, 1.2 * wz * cfg.height / k.fy,
                                rng.uniform(-15, 15, 2))
        items.append(_Item(wall, wall_pose, SolidTexture.random(rng, cfg.texture_richness,
                                                                 (cfg.texture_scale[0] * 2, cfg.texture_scale[1] * 2))))
        image, depth, mask = render_view(items, k)
        clean = clamp_depth(depth, *cfg.depth_range)[0]
        views.append(View(image, _corrupt(clean, rng, cfg), mask, k, pose, clean))
    return ScenePair(f"{cfg.seed:04d}-{index:04d}", mesh, views[0], views[1])


def synth_suite(cfg: SynthConfig) -> list[ScenePair]:
    return [synth_pair(cfg, i) for i in range(cfg.n_pairs)]


def exact_correspondences(pair: ScenePair, stride: int = 4, tol: float = 1e-6):
    """Ground-truth 3D pairs: query target pixels mapped into the reference camera.

    Only points visible in the reference view (its clean depth agrees within
    ``tol`` metres after projection to the nearest pixel) are kept. Returns
    ``(src, dst)`` in query and reference camera coordinates.
    """
    q = pair.query
    sub = np.zeros_like(q.mask)
    sub[::stride, ::stride] = True
    cloud = backproject(q.clean_depth, q.k, q.mask & sub)
    dst = pair.relative_pose.apply(cloud.points)
    r = pair.reference
    u = np.rint(r.k.fx * dst[:, 0] / dst[:, 2] + r.k.cx).astype(int)
    v = np.rint(r.k.fy * dst[:, 1] / dst[:, 2] + r.k.cy).astype(int)
    ok = (u >= 0) & (u < r.k.width) & (v >= 0) & (v < r.k.height)
    ok[ok] &= r.mask[v[ok], u[ok]]
    ok[ok] &= np.abs(r.clean_depth[v[ok], u[ok]] - dst[ok, 2]) < max(tol, 0.01 * pair.mesh.diameter)
    return cloud.points[ok], dst[ok]


def write_suite(out_dir, cfg: SynthConfig, pairs=None) -> list[dict]:
    """Write pairs as two BOP-style scenes plus meshes and a pair index."""
    from .io import dump_json, save_mesh_ply, write_jsonl, write_scene

    out = Path(out_dir)
    (out / "models").mkdir(parents=True, exist_ok=True)
    pairs = synth_suite(cfg) if pairs is None else pairs
    index = []
    for i, pair in enumerate(pairs):
        obj_id = i + 1
        save_mesh_ply(out / "models" / f"obj_{obj_id:06d}.ply", pair.mesh)
        for name, view in (("query", pair.query), ("reference", pair.reference)):
            write_scene(out / name, i, view.image, view.depth, view.k, [(obj_id, view.pose)], [view.mask])
        index.append({"pair_id": pair.pair_id, "im_id": i, "obj_id": obj_id,
                      "gap_deg": list(cfg.gap_deg), "relative_pose": pair.relative_pose.to_dict()})
    write_jsonl(out / "pairs.jsonl", index)
    dump_json(out / "synth_config.json", {k: getattr(cfg, k) for k in cfg.__dataclass_fields__})
    return index
