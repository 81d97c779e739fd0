"""Relative rigid pose from 2D matches and depth.

Matches are lifted to 3D with the query/reference depth maps, a seeded
sample-consensus loop around a weighted Kabsch fit estimates the
query-to-reference transform, and the query object pose follows from the
known reference pose. The learned registration network of the original
pipeline is deliberately not reproduced; every estimate is tagged with the
``method`` that produced it.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import (
    DegenerateGeometryError,
    InsufficientCorrespondencesError,
    InvalidInputError,
    RegistrationFailure,
)
from .geometry import CameraIntrinsics, RigidTransform, backproject_pixels

METHOD = "sample-consensus+kabsch"


@dataclass
class Correspondence3D:
    src: np.ndarray  # query-camera points (N, 3)
    dst: np.ndarray  # reference-camera points (N, 3)
    weights: np.ndarray
    stats: dict = field(default_factory=dict)

    def __post_init__(self):
        self.src = np.asarray(self.src, dtype=float).reshape(-1, 3)
        self.dst = np.asarray(self.dst, dtype=float).reshape(-1, 3)
        self.weights = np.asarray(self.weights, dtype=float).reshape(-1)
        if not (len(self.src) == len(self.dst) == len(self.weights)):
            raise InvalidInputError("correspondence lists differ in length")
        if not (np.all(np.isfinite(self.src)) and np.all(np.isfinite(self.dst))):
            raise InvalidInputError("non-finite correspondence coordinates")

    def __len__(self):
        return len(self.src)

    @classmethod
    def unweighted(cls, src, dst) -> "Correspondence3D":
        return cls(src, dst, np.ones(len(np.asarray(src).reshape(-1, 3))))

    def to_dict(self) -> dict:
        return {"src": self.src.tolist(), "dst": self.dst.tolist(),
                "weights": self.weights.tolist(), "stats": self.stats}

    @classmethod
    def from_dict(cls, d) -> "Correspondence3D":
        return cls(d["src"], d["dst"], d.get("weights", np.ones(len(d["src"]))), dict(d.get("stats", {})))


@dataclass
class PoseEstimate:
    transform: RigidTransform
    inliers: np.ndarray
    rms: float
    iterations: int
    method: str = METHOD

    @property
    def n_inliers(self) -> int:
        return int(np.count_nonzero(self.inliers))

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "transform": self.transform.to_dict(),
            "inliers": self.inliers.astype(int).tolist(),
            "n_inliers": self.n_inliers,
            "rms": self.rms,
            "iterations": self.iterations,
        }

    @classmethod
    def from_dict(cls, d) -> "PoseEstimate":
        return cls(
            RigidTransform.from_dict(d["transform"]),
            np.asarray(d["inliers"], dtype=bool),
            float(d["rms"]),
            int(d["iterations"]),
            d.get("method", METHOD),
        )


# ---------------------------------------------------------------------------
# lifting

def sample_depth(depth, u, v):
    """Bilinear depth at sub-pixel ``(u, v)``.

    If any of the four neighbours is invalid the nearest valid neighbour is
    used instead; ``nan`` marks positions with no valid neighbour.
    """
    depth = np.asarray(depth, dtype=float)
    h, w = depth.shape
    u = np.asarray(u, dtype=float)
    v = np.asarray(v, dtype=float)
    u0 = np.clip(np.floor(u).astype(int), 0, w - 1)
    v0 = np.clip(np.floor(v).astype(int), 0, h - 1)
    u1 = np.minimum(u0 + 1, w - 1)
    v1 = np.minimum(v0 + 1, h - 1)
    fu, fv = u - u0, v - v0
    corners = [(v0, u0, (1 - fu) * (1 - fv)), (v0, u1, fu * (1 - fv)),
               (v1, u0, (1 - fu) * fv), (v1, u1, fu * fv)]
    vals = np.stack([depth[r, c] for r, c, _ in corners])
    wts = np.stack([wt for _, _, wt in corners])
    dist = np.stack([np.hypot(c - u, r - v) for r, c, _ in corners])
    ok = vals > 0
    bilinear = (vals * wts).sum(axis=0)
    dist = np.where(ok, dist, np.inf)
    nearest = np.take_along_axis(vals, np.argmin(dist, axis=0)[None], axis=0)[0]
    out = np.where(ok.all(axis=0), bilinear, nearest)
    return np.where(ok.any(axis=0), out, np.nan)


def _in_bounds(xy, shape):
    h, w = shape
    return (xy[:, 0] >= 0) & (xy[:, 0] <= w - 1) & (xy[:, 1] >= 0) & (xy[:, 1] <= h - 1)


def lift_matches(matches, depth_q, depth_r, kq: CameraIntrinsics, kr: CameraIntrinsics,
                 mask_q=None, mask_r=None) -> Correspondence3D:
    """Backproject both ends of every fine match; drop pairs without valid depth or outside a mask."""
    depth_q = np.asarray(depth_q, dtype=float)
    depth_r = np.asarray(depth_r, dtype=float)
    kq.check_shape(depth_q.shape)
    kr.check_shape(depth_r.shape)
    qxy = np.asarray(matches.query_xy, dtype=float).reshape(-1, 2)
    rxy = np.asarray(matches.ref_xy, dtype=float).reshape(-1, 2)
    keep = _in_bounds(qxy, depth_q.shape) & _in_bounds(rxy, depth_r.shape)
    stats = {"out_of_bounds": int(np.count_nonzero(~keep))}
    for xy, mask in ((qxy, mask_q), (rxy, mask_r)):
        if mask is None:
            continue
        mask = np.asarray(mask, dtype=bool)
        h, w = mask.shape
        cu = np.clip(np.rint(xy[:, 0]).astype(int), 0, w - 1)
        cv = np.clip(np.rint(xy[:, 1]).astype(int), 0, h - 1)
        inside = mask[cv, cu]
        stats["outside_mask"] = stats.get("outside_mask", 0) + int(np.count_nonzero(keep & ~inside))
        keep &= inside
    zq = sample_depth(depth_q, qxy[:, 0], qxy[:, 1])
    zr = sample_depth(depth_r, rxy[:, 0], rxy[:, 1])
    has_depth = np.isfinite(zq) & np.isfinite(zr)
    stats["no_depth"] = int(np.count_nonzero(keep & ~has_depth))
    keep &= has_depth
    n = int(np.count_nonzero(keep))
    if n < 3:
        raise InsufficientCorrespondencesError(n)
    src = backproject_pixels(qxy[keep, 0], qxy[keep, 1], zq[keep], kq)
    dst = backproject_pixels(rxy[keep, 0], rxy[keep, 1], zr[keep], kr)
    return Correspondence3D(src, dst, np.asarray(matches.conf, dtype=float)[keep], stats)


# ---------------------------------------------------------------------------
# closed-form fit

def _check_spread(p, w):
    c = p - (w[:, None] * p).sum(0) / w.sum()
    sv = np.linalg.svd(np.sqrt(w)[:, None] * c, compute_uv=False)
    if sv[0] <= 1e-12 or sv[1] <= 1e-9 * sv[0]:
        raise DegenerateGeometryError("points are collinear or coincident")


def rigid_fit(src, dst, weights=None) -> RigidTransform:
    """Weighted least-squares rigid transform with ``R @ src + t ~ dst``."""
    src = np.asarray(src, dtype=float).reshape(-1, 3)
    dst = np.asarray(dst, dtype=float).reshape(-1, 3)
    if len(src) != len(dst):
        raise InvalidInputError("src and dst differ in length")
    if len(src) < 3:
        raise InsufficientCorrespondencesError(len(src))
    w = np.ones(len(src)) if weights is None else np.asarray(weights, dtype=float).reshape(-1)
    if np.any(w < 0) or not w.sum() > 0:
        raise InvalidInputError("weights must be nonnegative with positive sum")
    _check_spread(src, w)
    _check_spread(dst, w)
    cs = (w[:, None] * src).sum(0) / w.sum()
    cd = (w[:, None] * dst).sum(0) / w.sum()
    H = ((src - cs) * w[:, None]).T @ (dst - cd)
    U, _, Vt = np.linalg.svd(H)
    D = np.diag([1.0, 1.0, np.sign(np.linalg.det(Vt.T @ U.T)) or 1.0])
    R = Vt.T @ D @ U.T
    return RigidTransform(R, cd - R @ cs)


def _batch_kabsch(src, dst):
    """Unweighted Kabsch for a batch of ``(B, k, 3)`` samples; returns (R, t, ok)."""
    cs = src.mean(axis=1, keepdims=True)
    cd = dst.mean(axis=1, keepdims=True)
    a, b = src - cs, dst - cd
    H = np.einsum("bki,bkj->bij", a, b)
    U, _, Vt = np.linalg.svd(H)
    d = np.sign(np.linalg.det(np.transpose(Vt, (0, 2, 1)) @ np.transpose(U, (0, 2, 1))))
    d[d == 0] = 1.0
    Vt[:, 2, :] *= d[:, None]
    R = np.transpose(Vt, (0, 2, 1)) @ np.transpose(U, (0, 2, 1))
    t = cd[:, 0] - np.einsum("bij,bj->bi", R, cs[:, 0])
    # twice the triangle areas; near-zero means a collinear sample
    area_s = np.linalg.norm(np.cross(a[:, 1] - a[:, 0], a[:, 2] - a[:, 0]), axis=-1)
    area_d = np.linalg.norm(np.cross(b[:, 1] - b[:, 0], b[:, 2] - b[:, 0]), axis=-1)
    scale = np.maximum(np.abs(a).max(axis=(1, 2)), 1e-300) ** 2
    ok = (area_s > 1e-9 * scale) & (area_d > 1e-9 * scale)
    return R, t, ok


def _residuals(T: RigidTransform, src, dst):
    return np.linalg.norm(T.apply(src) - dst, axis=1)


def robust_register(corr: Correspondence3D, inlier_threshold: float = 0.01, max_iters: int = 2048,
                    seed: int = 0, min_inliers: int | None = None, refine_rounds: int = 10,
                    batch: int = 256) -> PoseEstimate:
    """Seeded 3-point sample consensus followed by a weighted refit on the inliers.

    Correspondences are first put in a canonical order so the result does not
    depend on the input ordering. Hypotheses are scored by inlier count with
    ties going to the earliest hypothesis; the winning inlier set is refit
    and re-thresholded until it stops changing.

    A 3-point sample is always consistent with itself, so by default a
    hypothesis needs one supporting pair beyond its sample
    (``min_inliers = 4``, or 3 when only 3 pairs exist).
    """
    n = len(corr)
    if n < 3:
        raise InsufficientCorrespondencesError(n)
    if min_inliers is None:
        min_inliers = min(4, n)
    if min_inliers < 3:
        raise InvalidInputError("min_inliers must be >= 3")
    if not inlier_threshold > 0 or max_iters < 1:
        raise InvalidInputError("threshold must be positive and max_iters >= 1")
    order = np.lexsort(np.column_stack([corr.src, corr.dst, corr.weights[:, None]]).T[::-1])
    src, dst, w = corr.src[order], corr.dst[order], corr.weights[order]
    w = np.where(w > 0, w, 0.0) if np.any(w > 0) else np.ones(n)

    rng = np.random.default_rng(seed)
    samples = np.argpartition(rng.random((max_iters, n)), 2, axis=1)[:, :3] if n > 3 else \
        np.tile(np.arange(3), (max_iters, 1))
    best_score, best_index = -1, -1
    best_T = None
    for start in range(0, max_iters, batch):
        idx = samples[start:start + batch]
        R, t, ok = _batch_kabsch(src[idx], dst[idx])
        moved = np.einsum("bij,nj->bni", R, src) + t[:, None, :]
        inl = np.linalg.norm(moved - dst[None], axis=-1) < inlier_threshold
        score = np.where(ok, inl.sum(axis=1), -1)
        k = int(np.argmax(score))
        if score[k] > best_score:
            best_score, best_index = int(score[k]), start + k
            best_T = (R[k], t[k])
    if best_score < min_inliers:
        raise RegistrationFailure(
            f"no hypothesis reached {min_inliers} inliers (best {max(best_score, 0)}) "
            f"over {max_iters} samples"
        )

    T = RigidTransform(best_T[0], best_T[1])
    inliers = _residuals(T, src, dst) < inlier_threshold
    for _ in range(refine_rounds):
        try:
            T_new = rigid_fit(src[inliers], dst[inliers], w[inliers])
        except DegenerateGeometryError:
            break
        new = _residuals(T_new, src, dst) < inlier_threshold
        if np.count_nonzero(new) < min_inliers:
            break
        T = T_new
        if np.array_equal(new, inliers):
            break
        inliers = new
    res = _residuals(T, src, dst)
    inliers = res < inlier_threshold
    if np.count_nonzero(inliers) < min_inliers:
        raise RegistrationFailure("refit left fewer than the minimum number of inliers")
    flags = np.zeros(n, dtype=bool)
    flags[order] = inliers
    rms = float(np.sqrt(np.mean(res[inliers] ** 2)))
    return PoseEstimate(T, flags, rms, best_index + 1)


def compose_query_pose(t_r_inv: RigidTransform, t_q_to_r: RigidTransform) -> RigidTransform:
    """``T_q^-1 = T_r^-1 T_{q->r}``: maps query-camera points into the object frame."""
    return t_r_inv @ t_q_to_r


def query_object_pose(t_r: RigidTransform, t_q_to_r: RigidTransform) -> RigidTransform:
    """Object-to-query-camera pose from the reference pose and relative motion."""
    return compose_query_pose(t_r.inverse(), t_q_to_r).inverse()
