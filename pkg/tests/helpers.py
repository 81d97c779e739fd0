"""Shared builders for the test suite."""

import numpy as np
from scipy import ndimage

from refpose.geometry import CameraIntrinsics, RigidTransform, random_rotation


def textured_image(h, w, seed):
    """Band-limited noise texture in [0, 1]."""
    r = np.random.default_rng(seed)
    img = sum(ndimage.gaussian_filter(r.normal(size=(h, w)), s) * s for s in (1, 2, 4))
    return (img - img.min()) / (img.max() - img.min())


def small_camera(h=16, w=16, f=20.0):
    return CameraIntrinsics(f, f, (w - 1) / 2, (h - 1) / 2, w, h)


def random_depth_pair(rng, h=16, w=16, invalid=0.05):
    """Smooth random ground truth plus an affinely distorted, noisy prediction."""
    gt = 1.0 + 2.0 * ndimage.gaussian_filter(rng.random((h, w)), 1.5)
    gt = gt + 0.2 * rng.random((h, w))
    pred = rng.uniform(0.7, 1.3) * gt + rng.uniform(-0.2, 0.2) + 0.05 * rng.normal(size=(h, w))
    pred = np.abs(pred) + 0.3
    gt[rng.random((h, w)) < invalid] = 0.0
    return pred, gt


def random_transform(rng, scale=0.5):
    return RigidTransform(random_rotation(rng), rng.uniform(-scale, scale, 3))


def plane_depth(k, normal, offset):
    """Depth of the plane ``n . p = offset`` seen through camera ``k``."""
    v, u = np.mgrid[0:k.height, 0:k.width].astype(float)
    rays = np.stack([(u - k.cx) / k.fx, (v - k.cy) / k.fy, np.ones_like(u)], axis=-1)
    return offset / (rays @ np.asarray(normal, dtype=float))
