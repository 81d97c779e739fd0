"""Pose-error measures, recall aggregation and depth metrics.

Pose errors follow the usual benchmark definitions: VSD compares rendered
depth maps, MSSD/MSPD take the worst vertex error minimized over the object's
symmetry set, ADD/ADD-S average vertex distances. Rendering uses a small
z-buffer rasterizer in :func:`render_depth`.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
from scipy.spatial import ConvexHull, cKDTree
from scipy.spatial.distance import pdist

from .errors import InvalidInputError, MetricDomainError
from .geometry import CameraIntrinsics, RigidTransform

log = logging.getLogger(__name__)

EXACT_DIAMETER_LIMIT = 2000
DEPTH_EPS = 1e-8


@dataclass
class MeshModel:
    vertices: np.ndarray
    faces: np.ndarray
    symmetries: list = field(default_factory=lambda: [RigidTransform.identity()])
    name: str = "mesh"

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=float).reshape(-1, 3)
        self.faces = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
        if len(self.vertices) == 0:
            raise InvalidInputError("mesh has no vertices")
        if len(self.faces) and (self.faces.min() < 0 or self.faces.max() >= len(self.vertices)):
            raise InvalidInputError("face index out of range")
        if not any(_is_identity(s) for s in self.symmetries):
            self.symmetries = [RigidTransform.identity()] + list(self.symmetries)

    @cached_property
    def diameter(self) -> float:
        v = self.vertices
        if len(v) > EXACT_DIAMETER_LIMIT:
            try:
                v = v[ConvexHull(v).vertices]
            except Exception:  # flat or degenerate point sets: fall back to all vertices
                pass
        d = float(pdist(v).max()) if len(v) > 1 else 0.0
        if not d > 0:
            raise InvalidInputError("mesh diameter is zero")
        return d

    def symmetry_deviation(self) -> float:
        """Largest distance from a symmetry-mapped vertex to the nearest original vertex."""
        tree = cKDTree(self.vertices)
        worst = 0.0
        for s in self.symmetries:
            d, _ = tree.query(s.apply(self.vertices))
            worst = max(worst, float(d.max()))
        return worst

    def check_symmetries(self, rel_tol: float = 0.01) -> bool:
        dev = self.symmetry_deviation()
        ok = dev <= rel_tol * self.diameter
        if not ok:
            log.warning("mesh %s: symmetry maps vertices %.4g m off the model (tolerance %.4g m)",
                        self.name, dev, rel_tol * self.diameter)
        return ok


def _is_identity(t: RigidTransform) -> bool:
    return bool(np.array_equal(t.rotation, np.eye(3)) and not np.any(t.translation))


# ---------------------------------------------------------------------------
# rasterizer

NEAR_PLANE = 1e-6


@dataclass
class Rendering:
    depth: np.ndarray
    face_id: np.ndarray  # -1 where nothing was drawn
    bary: np.ndarray  # perspective-correct barycentrics, (H, W, 3)


def rasterize(vertices_cam, faces, k: CameraIntrinsics) -> Rendering:
    """Z-buffer triangles given in camera coordinates.

    Pixel ``(u, v)`` samples the image at its center ``(u, v)``. Edges are
    inclusive and 1/z is interpolated linearly in screen space. Triangles
    with a vertex at or behind the near plane are skipped.
    """
    h, w = k.height, k.width
    depth = np.full((h, w), np.inf)
    face_id = np.full((h, w), -1, dtype=np.int64)
    bary = np.zeros((h, w, 3))
    V = np.asarray(vertices_cam, dtype=float)
    F = np.asarray(faces, dtype=np.int64)
    if len(F):
        z = V[:, 2]
        front = np.all(z[F] > NEAR_PLANE, axis=1)
        zs = np.where(z > NEAR_PLANE, z, 1.0)
        uv = np.stack([k.fx * V[:, 0] / zs + k.cx, k.fy * V[:, 1] / zs + k.cy], axis=-1)
        for f in np.nonzero(front)[0]:
            _draw(f, F[f], uv, z, depth, face_id, bary)
    depth[~np.isfinite(depth)] = 0.0
    return Rendering(depth, face_id, bary)


def _draw(f, tri, uv, z, depth, face_id, bary):
    h, w = depth.shape
    (u0, v0), (u1, v1), (u2, v2) = uv[tri]
    area = (u1 - u0) * (v2 - v0) - (u2 - u0) * (v1 - v0)
    if abs(area) < 1e-12:
        return
    umin = max(int(math.ceil(min(u0, u1, u2))), 0)
    umax = min(int(math.floor(max(u0, u1, u2))), w - 1)
    vmin = max(int(math.ceil(min(v0, v1, v2))), 0)
    vmax = min(int(math.floor(max(v0, v1, v2))), h - 1)
    if umin > umax or vmin > vmax:
        return
    pu, pv = np.meshgrid(np.arange(umin, umax + 1, dtype=float), np.arange(vmin, vmax + 1, dtype=float))
    b1 = ((pu - u0) * (v2 - v0) - (u2 - u0) * (pv - v0)) / area
    b2 = ((u1 - u0) * (pv - v0) - (pu - u0) * (v1 - v0)) / area
    b0 = 1.0 - b1 - b2
    eps = -1e-9
    inside = (b0 >= eps) & (b1 >= eps) & (b2 >= eps)
    if not inside.any():
        return
    iz0, iz1, iz2 = 1.0 / z[tri[0]], 1.0 / z[tri[1]], 1.0 / z[tri[2]]
    invz = iz0 + b1 * (iz1 - iz0) + b2 * (iz2 - iz0)
    zz = 1.0 / invz
    win = depth[vmin:vmax + 1, umin:umax + 1]
    closer = inside & (zz < win)
    if not closer.any():
        return
    win[closer] = zz[closer]
    face_id[vmin:vmax + 1, umin:umax + 1][closer] = f
    pb = np.stack([b0 * iz0, b1 * iz1, b2 * iz2], axis=-1) * zz[..., None]
    bary[vmin:vmax + 1, umin:umax + 1][closer] = pb[closer]


def render_depth(mesh: MeshModel, pose: RigidTransform, k: CameraIntrinsics) -> np.ndarray:
    """Depth map of ``mesh`` under ``pose``; uncovered pixels are 0."""
    return rasterize(pose.apply(mesh.vertices), mesh.faces, k).depth


# ---------------------------------------------------------------------------
# pose errors

def _visible(rendered, scene_depth, delta):
    covered = rendered > 0
    if scene_depth is None:
        return covered
    scene = np.asarray(scene_depth, dtype=float)
    return covered & ((scene <= 0) | (rendered - scene <= delta))


def vsd(pose_hat: RigidTransform, pose_bar: RigidTransform, mesh: MeshModel, k: CameraIntrinsics,
        delta: float = 0.015, scene_depth=None) -> float:
    """Mean absolute depth difference over the union of the two visibility masks.

    Pixels visible under only one pose contribute ``delta``; an empty union
    gives 0. ``scene_depth`` optionally gates visibility.
    """
    d_hat = render_depth(mesh, pose_hat, k)
    d_bar = render_depth(mesh, pose_bar, k)
    return vsd_from_depths(d_hat, d_bar, delta, scene_depth)


def vsd_from_depths(d_hat, d_bar, delta=0.015, scene_depth=None) -> float:
    v_hat = _visible(d_hat, scene_depth, delta)
    v_bar = _visible(d_bar, scene_depth, delta)
    union = v_hat | v_bar
    n = int(np.count_nonzero(union))
    if n == 0:
        return 0.0
    both = v_hat & v_bar
    total = np.abs(d_hat[both] - d_bar[both]).sum() + delta * (n - np.count_nonzero(both))
    return float(total / n)


def vsd_step_cost(d_hat, d_bar, tau: float, delta=0.015, scene_depth=None) -> float:
    """Thresholded VSD: fraction of union pixels with depth gap >= ``tau`` or single coverage."""
    v_hat = _visible(d_hat, scene_depth, delta)
    v_bar = _visible(d_bar, scene_depth, delta)
    union = v_hat | v_bar
    n = int(np.count_nonzero(union))
    if n == 0:
        return 0.0
    both = v_hat & v_bar
    good = np.count_nonzero(np.abs(d_hat[both] - d_bar[both]) < tau)
    return float((n - good) / n)


def _norms(d):
    return np.sqrt(d[:, 0] * d[:, 0] + d[:, 1] * d[:, 1] + d[:, 2] * d[:, 2]) if d.shape[1] == 3 else \
        np.sqrt(d[:, 0] * d[:, 0] + d[:, 1] * d[:, 1])


def mssd(pose_hat: RigidTransform, pose_bar: RigidTransform, mesh: MeshModel) -> float:
    """min over symmetries S of max over vertices x of |P_hat x - P_bar S x|.

    ``S`` and ``P_bar`` are applied one after the other (not pre-composed).
    """
    x_hat = pose_hat.apply(mesh.vertices)
    best = math.inf
    for s in mesh.symmetries:
        x_bar = pose_bar.apply(s.apply(mesh.vertices))
        best = min(best, float(_norms(x_hat - x_bar).max()))
    return best


def _project(points, k):
    if np.any(points[:, 2] <= 0):
        raise MetricDomainError("a model vertex lies at or behind the camera")
    return np.stack([k.fx * points[:, 0] / points[:, 2] + k.cx, k.fy * points[:, 1] / points[:, 2] + k.cy], axis=-1)


def mspd(pose_hat: RigidTransform, pose_bar: RigidTransform, mesh: MeshModel, k: CameraIntrinsics) -> float:
    """Projected counterpart of :func:`mssd`, in pixels."""
    p_hat = _project(pose_hat.apply(mesh.vertices), k)
    best = math.inf
    for s in mesh.symmetries:
        p_bar = _project(pose_bar.apply(s.apply(mesh.vertices)), k)
        best = min(best, float(_norms(p_hat - p_bar).max()))
    return best


def add_error(pose_hat: RigidTransform, pose_bar: RigidTransform, mesh: MeshModel, symmetric: bool = False) -> float:
    x_hat = pose_hat.apply(mesh.vertices)
    x_bar = pose_bar.apply(mesh.vertices)
    if symmetric:
        d, _ = cKDTree(x_bar).query(x_hat)
        return float(d.mean())
    return float(_norms(x_hat - x_bar).mean())


@dataclass
class PoseErrorReport:
    pair_id: str
    diameter: float
    vsd: float = math.inf
    mssd: float = math.inf
    mspd: float = math.inf
    add: float = math.inf
    symmetric: bool = False
    vsd_step: list | None = None
    failed: bool = False

    def to_dict(self) -> dict:
        fin = lambda x: None if x is None or not math.isfinite(x) else float(x)
        return {
            "pair_id": self.pair_id,
            "diameter": self.diameter,
            "vsd": fin(self.vsd),
            "mssd": fin(self.mssd),
            "mspd": fin(self.mspd),
            "add_s" if self.symmetric else "add": fin(self.add),
            "symmetric": self.symmetric,
            "vsd_step": self.vsd_step,
            "failed": self.failed,
        }

    @classmethod
    def from_dict(cls, d) -> "PoseErrorReport":
        val = lambda x: math.inf if x is None else float(x)
        sym = bool(d.get("symmetric", False))
        return cls(d["pair_id"], float(d["diameter"]), val(d.get("vsd")), val(d.get("mssd")),
                   val(d.get("mspd")), val(d.get("add_s" if sym else "add")), sym,
                   d.get("vsd_step"), bool(d.get("failed", False)))


def _grid(start, stop, step):
    n = int(round((stop - start) / step)) + 1
    return tuple(round(start + i * step, 10) for i in range(n))


@dataclass
class RecallConfig:
    mssd_fracs: tuple = _grid(0.05, 0.5, 0.05)
    mspd_px: tuple = _grid(5, 50, 5)  # at 640 px width; scaled by width / 640
    vsd_delta: float = 0.015
    vsd_thresholds: tuple = _grid(0.05, 0.5, 0.05)  # fractions of vsd_norm
    vsd_norm: float = 0.3
    vsd_variant: str = "mean"  # "mean" (absolute depth gap) or "step" (thresholded cost)
    vsd_taus: tuple = _grid(0.05, 0.5, 0.05)  # step variant: fractions of the diameter
    add_frac: float = 0.1

    def __post_init__(self):
        for name in ("mssd_fracs", "mspd_px", "vsd_thresholds", "vsd_taus"):
            g = tuple(float(x) for x in getattr(self, name))
            if not g or any(b <= a for a, b in zip(g, g[1:])):
                raise InvalidInputError(f"{name} must be a nonempty strictly increasing list")
            setattr(self, name, g)
        if self.vsd_variant not in ("mean", "step"):
            raise InvalidInputError(f"unknown VSD variant {self.vsd_variant!r}")
        if not (self.vsd_delta > 0 and self.vsd_norm > 0 and self.add_frac > 0):
            raise InvalidInputError("delta, norm and add fraction must be positive")


def pose_errors(pair_id, pose_hat, pose_bar, mesh: MeshModel, k: CameraIntrinsics,
                cfg: RecallConfig | None = None, symmetric: bool = False, scene_depth=None) -> PoseErrorReport:
    cfg = cfg or RecallConfig()
    if pose_hat is None:
        return PoseErrorReport(str(pair_id), mesh.diameter, symmetric=symmetric, failed=True)
    d_hat = render_depth(mesh, pose_hat, k)
    d_bar = render_depth(mesh, pose_bar, k)
    step = None
    if cfg.vsd_variant == "step":
        step = [vsd_step_cost(d_hat, d_bar, t * mesh.diameter, cfg.vsd_delta, scene_depth) for t in cfg.vsd_taus]
    try:
        proj = mspd(pose_hat, pose_bar, mesh, k)
    except MetricDomainError:
        proj = math.inf
    return PoseErrorReport(
        str(pair_id), mesh.diameter,
        vsd=vsd_from_depths(d_hat, d_bar, cfg.vsd_delta, scene_depth),
        mssd=mssd(pose_hat, pose_bar, mesh),
        mspd=proj,
        add=add_error(pose_hat, pose_bar, mesh, symmetric),
        symmetric=symmetric,
        vsd_step=step,
    )


@dataclass
class RecallTable:
    vsd: float
    mssd: float
    mspd: float
    ar: float
    add_01d: float
    count: int

    def to_dict(self) -> dict:
        return {"vsd": self.vsd, "mssd": self.mssd, "mspd": self.mspd, "ar": self.ar,
                "add_0.1d": self.add_01d, "count": self.count}


def pose_recalls(reports, cfg: RecallConfig | None = None, image_width: int = 640) -> RecallTable:
    """Recall (percent) of each measure averaged over its threshold grid, and AR.

    A report counts as correct at threshold ``th`` when its error is ``<= th``;
    ADD(S)-0.1d uses the strict rule ``error < 0.1 d``.
    """
    cfg = cfg or RecallConfig()
    reports = list(reports)
    if not reports:
        raise InvalidInputError("no reports to aggregate")
    r = image_width / 640.0

    def rate(errors, thresholds):
        e = np.asarray(errors, dtype=float)[:, None]
        return float(np.mean(e <= np.asarray(thresholds, dtype=float)) * 100.0)

    mssd_hits = [np.mean([x.mssd <= f * x.diameter for f in cfg.mssd_fracs]) for x in reports]
    mssd_rec = float(np.mean(mssd_hits) * 100.0)
    mspd_rec = rate([x.mspd for x in reports], [p * r for p in cfg.mspd_px])
    if cfg.vsd_variant == "mean":
        vsd_rec = rate([x.vsd for x in reports], [t * cfg.vsd_norm for t in cfg.vsd_thresholds])
    else:
        hits = []
        for x in reports:
            if x.vsd_step is None:
                hits.append(0.0)
                continue
            e = np.asarray(x.vsd_step, dtype=float)[:, None]
            hits.append(np.mean(e < np.asarray(cfg.vsd_thresholds)[None]))
        vsd_rec = float(np.mean(hits) * 100.0)
    add_rec = float(np.mean([x.add < cfg.add_frac * x.diameter for x in reports]) * 100.0)
    ar = (vsd_rec + mssd_rec + mspd_rec) / 3.0
    return RecallTable(vsd_rec, mssd_rec, mspd_rec, ar, add_rec, len(reports))


# ---------------------------------------------------------------------------
# depth metrics

def depth_metrics(pred, gt, mask=None, deltas=(1.05, 1.10, 1.25)) -> dict:
    """Standard monocular-depth error table.

    Pixels are evaluated where ``gt > 0`` (and inside ``mask`` when given).
    ``log10`` and the ``delta`` accuracies (reported in percent) additionally
    skip pixels where either depth is non-positive; those are tallied in
    ``excluded``.
    """
    pred = np.asarray(pred, dtype=float)
    gt = np.asarray(gt, dtype=float)
    if pred.shape != gt.shape:
        raise InvalidInputError(f"pred shape {pred.shape} != gt shape {gt.shape}")
    valid = gt > 0 if mask is None else np.asarray(mask, dtype=bool)
    if valid.shape != gt.shape:
        raise InvalidInputError("mask shape mismatch")
    if not valid.any():
        raise InvalidInputError("no valid pixels to evaluate")
    p, g = pred[valid], gt[valid]
    err = p - g
    out = {
        "abs_rel": float(np.mean(np.abs(err) / (g + DEPTH_EPS))),
        "sq_rel": float(np.mean(err * err / (g + DEPTH_EPS))),
        "rmse": float(np.sqrt(np.mean(err * err))),
        "mae": float(np.mean(np.abs(err))),
    }
    pos = (p > 0) & (g > 0)
    out["excluded"] = int(np.count_nonzero(~pos))
    pp, gg = p[pos], g[pos]
    if len(pp):
        out["log10"] = float(np.mean(np.abs(np.log10(pp) - np.log10(gg))))
        ratio = np.maximum(pp / gg, gg / pp)
        for d in deltas:
            out[f"delta_{d:.2f}"] = float(np.mean(ratio < d) * 100.0)
    else:
        out["log10"] = None
        for d in deltas:
            out[f"delta_{d:.2f}"] = None
    out["count"] = int(valid.sum())
    return out
