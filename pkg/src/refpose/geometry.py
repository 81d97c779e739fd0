"""Pinhole camera geometry, image gradients, normals from depth and SE(3).

Conventions used throughout the package:

* Images and depth maps are ``(H, W)`` float arrays indexed ``[v, u]``.
* A depth pixel is valid iff its value is ``> 0``; invalid pixels are exactly 0.
* Pixel ``(u, v)`` has its center at image coordinate ``(u, v)``.
* Point clouds are ``(N, 3)`` arrays in meters, camera frame ``x`` right,
  ``y`` down, ``z`` forward.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from .errors import InvalidInputError, ProjectionDomainError

DEPTH_MIN = 0.3
DEPTH_MAX = 8.0


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise InvalidInputError(f"focal lengths must be positive, got {self.fx}, {self.fy}")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise InvalidInputError(
                f"principal point ({self.cx}, {self.cy}) outside {self.width}x{self.height} image"
            )

    @property
    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    @classmethod
    def from_matrix(cls, K, width: int, height: int) -> "CameraIntrinsics":
        K = np.asarray(K, dtype=float).reshape(3, 3)
        return cls(float(K[0, 0]), float(K[1, 1]), float(K[0, 2]), float(K[1, 2]), int(width), int(height))

    def crop(self, x0: int, y0: int, width: int, height: int) -> "CameraIntrinsics":
        """Intrinsics of the sub-image starting at pixel ``(x0, y0)``.

        Only the principal point moves; the crop must contain it.
        """
        return CameraIntrinsics(self.fx, self.fy, self.cx - x0, self.cy - y0, int(width), int(height))

    def check_shape(self, shape) -> None:
        if tuple(shape[:2]) != (self.height, self.width):
            raise InvalidInputError(
                f"image shape {tuple(shape[:2])} does not match intrinsics {self.height}x{self.width}"
            )


def clamp_depth(depth, d_min: float = DEPTH_MIN, d_max: float = DEPTH_MAX):
    """Clamp valid depths into ``[d_min, d_max]``; invalid pixels stay 0.

    Returns the clamped map and the number of valid pixels that were changed.
    """
    depth = np.asarray(depth, dtype=float)
    valid = depth > 0
    out = np.where(valid, np.clip(depth, d_min, d_max), 0.0)
    n_clamped = int(np.count_nonzero(valid & (out != depth)))
    return out, n_clamped


@dataclass
class PointCloud:
    points: np.ndarray
    pixels: np.ndarray | None = None

    def __len__(self):
        return len(self.points)


def backproject_pixels(u, v, z, k: CameraIntrinsics) -> np.ndarray:
    """Lift pixel coordinates with depth ``z`` to camera-frame points."""
    u = np.asarray(u, dtype=float)
    v = np.asarray(v, dtype=float)
    z = np.asarray(z, dtype=float)
    return np.stack([z * (u - k.cx) / k.fx, z * (v - k.cy) / k.fy, z], axis=-1)


def backproject(depth, k: CameraIntrinsics, mask=None) -> PointCloud:
    depth = np.asarray(depth, dtype=float)
    if depth.ndim != 2:
        raise InvalidInputError(f"depth must be 2D, got shape {depth.shape}")
    k.check_shape(depth.shape)
    valid = depth > 0
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != depth.shape:
            raise InvalidInputError(f"mask shape {mask.shape} does not match depth {depth.shape}")
        valid &= mask
    v, u = np.nonzero(valid)
    points = backproject_pixels(u, v, depth[v, u], k)
    return PointCloud(points.reshape(-1, 3), np.stack([u, v], axis=-1).astype(float).reshape(-1, 2))


def project(points, k: CameraIntrinsics) -> np.ndarray:
    """Pinhole projection of ``(N, 3)`` points to ``(N, 2)`` pixel coordinates."""
    p = np.asarray(points.points if isinstance(points, PointCloud) else points, dtype=float)
    p = p.reshape(-1, 3)
    if np.any(p[:, 2] <= 0):
        raise ProjectionDomainError("cannot project points with z <= 0")
    return np.stack([k.fx * p[:, 0] / p[:, 2] + k.cx, k.fy * p[:, 1] / p[:, 2] + k.cy], axis=-1)


# ---------------------------------------------------------------------------
# gradients

@dataclass
class GradientMap:
    du: np.ndarray
    dv: np.ndarray
    valid: np.ndarray

    @property
    def magnitude(self) -> np.ndarray:
        return np.sqrt(self.du * self.du + self.dv * self.dv)


def _stencil_masks(valid):
    mu = np.zeros_like(valid)
    mv = np.zeros_like(valid)
    mu[:, :-1] = valid[:, :-1] & valid[:, 1:]
    mv[:-1, :] = valid[:-1, :] & valid[1:, :]
    return mu, mv


def scalar_gradient(field, valid=None) -> GradientMap:
    """Forward differences ``f(u+1, v) - f(u, v)`` and ``f(u, v+1) - f(u, v)``.

    The last column (row) has zero ``du`` (``dv``), as does any difference
    whose stencil touches an invalid pixel.
    """
    f = np.asarray(field, dtype=float)
    if f.size == 0:
        raise InvalidInputError("empty field")
    if f.ndim == 1:
        f = f[None, :]
    valid = np.ones(f.shape, dtype=bool) if valid is None else np.asarray(valid, dtype=bool).reshape(f.shape)
    mu, mv = _stencil_masks(valid)
    du = np.zeros_like(f)
    dv = np.zeros_like(f)
    du[:, :-1] = f[:, 1:] - f[:, :-1]
    dv[:-1, :] = f[1:, :] - f[:-1, :]
    du *= mu
    dv *= mv
    return GradientMap(du, dv, valid)


def scalar_gradient_adjoint(gu, gv, valid) -> np.ndarray:
    """Transpose of :func:`scalar_gradient` applied to cotangents ``(gu, gv)``."""
    valid = np.asarray(valid, dtype=bool)
    mu, mv = _stencil_masks(valid)
    gu = gu * mu
    gv = gv * mv
    out = np.zeros(valid.shape, dtype=float)
    out[:, 1:] += gu[:, :-1]
    out[:, :-1] -= gu[:, :-1]
    out[1:, :] += gv[:-1, :]
    out[:-1, :] -= gv[:-1, :]
    return out


# ---------------------------------------------------------------------------
# normals

@dataclass
class NormalMap:
    normals: np.ndarray
    valid: np.ndarray


@lru_cache(maxsize=32)
def pixel_rays(k: CameraIntrinsics) -> np.ndarray:
    """``(H, W, 3)`` rays ``((u-cx)/fx, (v-cy)/fy, 1)`` so that ``P = z * ray``.

    The returned array is cached and read-only.
    """
    v, u = np.mgrid[0 : k.height, 0 : k.width].astype(float)
    rays = np.stack([(u - k.cx) / k.fx, (v - k.cy) / k.fy, np.ones_like(u)], axis=-1)
    rays.flags.writeable = False
    return rays


def cross3(a, b) -> np.ndarray:
    """Cross product over the last axis (faster than ``np.cross`` for images)."""
    out = np.empty(np.broadcast_shapes(a.shape, b.shape))
    out[..., 0] = a[..., 1] * b[..., 2] - a[..., 2] * b[..., 1]
    out[..., 1] = a[..., 2] * b[..., 0] - a[..., 0] * b[..., 2]
    out[..., 2] = a[..., 0] * b[..., 1] - a[..., 1] * b[..., 0]
    return out


def normal_stencil(depth, k: CameraIntrinsics, valid=None):
    """Raw cross products ``P_u x P_v`` with their differences and validity.

    Returns ``(cross, pu, pv, valid_normal)``; normals are not yet normalized
    or oriented.
    """
    depth = np.asarray(depth, dtype=float)
    k.check_shape(depth.shape)
    ok = depth > 0 if valid is None else (np.asarray(valid, dtype=bool) & (depth > 0))
    P = depth[..., None] * pixel_rays(k)
    pu = np.zeros_like(P)
    pv = np.zeros_like(P)
    pu[:, :-1] = P[:, 1:] - P[:, :-1]
    pv[:-1, :] = P[1:, :] - P[:-1, :]
    cross = cross3(pu, pv)
    vn = np.zeros_like(ok)
    vn[:-1, :-1] = ok[:-1, :-1] & ok[:-1, 1:] & ok[1:, :-1]
    vn &= np.sqrt(np.sum(cross * cross, axis=-1)) >= 1e-12
    return cross, pu, pv, vn


def normals_from_depth(depth, k: CameraIntrinsics, valid=None) -> NormalMap:
    """Unit normals from the cross product of forward point differences.

    Normals face the camera (``z <= 0``). Pixels lacking a valid right and
    lower neighbour, or with a degenerate cross product, get a zero normal
    and ``valid == False``.
    """
    cross, _, _, vn = normal_stencil(depth, k, valid)
    sign = np.where(cross[..., 2] > 0, -1.0, 1.0)
    norm = np.linalg.norm(cross, axis=-1)
    n = np.where(vn[..., None], sign[..., None] * cross / np.where(vn, norm, 1.0)[..., None], 0.0)
    return NormalMap(n, vn)


# ---------------------------------------------------------------------------
# SE(3)

@dataclass(frozen=True)
class RigidTransform:
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        R = np.asarray(self.rotation, dtype=float).reshape(3, 3)
        t = np.asarray(self.translation, dtype=float).reshape(3)
        if not (np.all(np.isfinite(R)) and np.all(np.isfinite(t))):
            raise InvalidInputError("non-finite rigid transform")
        if np.abs(R.T @ R - np.eye(3)).max() > 1e-6 or abs(np.linalg.det(R) - 1.0) > 1e-6:
            raise InvalidInputError("rotation is not orthonormal with det +1")
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, m) -> "RigidTransform":
        m = np.asarray(m, dtype=float).reshape(4, 4)
        return cls(m[:3, :3], m[:3, 3])

    @property
    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def inverse(self) -> "RigidTransform":
        Rt = self.rotation.T
        return RigidTransform(Rt, -Rt @ self.translation)

    def __matmul__(self, other: "RigidTransform") -> "RigidTransform":
        # (self @ other)(p) == self(other(p))
        return RigidTransform(
            self.rotation @ other.rotation, self.rotation @ other.translation + self.translation
        )

    def apply(self, points) -> np.ndarray:
        # elementwise on purpose: results are reproducible by a scalar loop
        p = np.asarray(points, dtype=float)
        R = self.rotation
        return p[..., 0:1] * R[:, 0] + p[..., 1:2] * R[:, 1] + p[..., 2:3] * R[:, 2] + self.translation

    def to_dict(self) -> dict:
        return {"R": self.rotation.reshape(-1).tolist(), "t": self.translation.tolist()}

    @classmethod
    def from_dict(cls, d) -> "RigidTransform":
        return cls(np.asarray(d["R"], dtype=float).reshape(3, 3), np.asarray(d["t"], dtype=float))


def compose(a: RigidTransform, b: RigidTransform) -> RigidTransform:
    """Transform applying ``b`` first, then ``a``."""
    return a @ b


def inverse(t: RigidTransform) -> RigidTransform:
    return t.inverse()


def apply(t: RigidTransform, cloud):
    if isinstance(cloud, PointCloud):
        return PointCloud(t.apply(cloud.points), cloud.pixels)
    return t.apply(cloud)


def axis_rotation(axis: str, degrees: float) -> np.ndarray:
    a = np.deg2rad(degrees)
    c, s = np.cos(a), np.sin(a)
    if axis == "x":
        return np.array([[1, 0, 0], [0, c, -s], [0, s, c]])
    if axis == "y":
        return np.array([[c, 0, s], [0, 1, 0], [-s, 0, c]])
    if axis == "z":
        return np.array([[c, -s, 0], [s, c, 0], [0, 0, 1]])
    raise InvalidInputError(f"unknown axis {axis!r}")


def rotation_error_deg(Ra, Rb) -> float:
    """Geodesic angle between two rotations in degrees."""
    D = np.asarray(Ra).T @ np.asarray(Rb)
    # atan2 form stays accurate near 0 and 180 degrees, unlike arccos of the trace
    sin = 0.5 * np.linalg.norm([D[2, 1] - D[1, 2], D[0, 2] - D[2, 0], D[1, 0] - D[0, 1]])
    cos = 0.5 * (np.trace(D) - 1.0)
    return float(np.degrees(np.arctan2(sin, cos)))


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    q = rng.normal(size=4)
    q /= np.linalg.norm(q)
    w, x, y, z = q
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
            [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
            [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
        ]
    )

