"""Composite metric-depth loss with exact gradients.

Every loss takes ``(pred, gt, ..., mask=None)`` depth maps and returns a float;
with ``grad=True`` it returns ``(value, dvalue/dpred)`` where the gradient is
an array shaped like ``pred`` (zero outside the valid set).

The valid set is ``mask & (gt > 0) & (pred > 0)`` and ``M`` is its size.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .errors import DegenerateFitError, DegeneratePriorError, InvalidInputError
from .geometry import (
    DEPTH_MAX,
    DEPTH_MIN,
    CameraIntrinsics,
    cross3,
    normal_stencil,
    normals_from_depth,
    pixel_rays,
    scalar_gradient,
    scalar_gradient_adjoint,
)


@dataclass
class LossWeights:
    alpha: float = 0.9  # BerHu weight
    eta: float = 0.2  # robustness of the scale-alignment term
    sigma: float = 1.0  # edge-weight decay
    lam: float = 1.0  # normal-weight decay
    w_scale: float = 1.0
    w_edge: float = 0.7
    w_norm: float = 0.6
    w_reg: float = 0.5

    def __post_init__(self):
        for name, value in asdict(self).items():
            if not value >= 0:
                raise InvalidInputError(f"loss weight {name} must be >= 0, got {value}")


@dataclass
class ScaleShift:
    s: float
    t: float


@dataclass
class LossReport:
    ssi: float
    reg: float
    berhu: float
    scale: float
    edge: float
    norm: float
    total: float
    m: int

    def to_dict(self) -> dict:
        return asdict(self)


def valid_set(pred, gt, mask=None) -> np.ndarray:
    pred = np.asarray(pred, dtype=float)
    gt = np.asarray(gt, dtype=float)
    if pred.shape != gt.shape:
        raise InvalidInputError(f"pred shape {pred.shape} != gt shape {gt.shape}")
    valid = (gt > 0) & (pred > 0)
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != gt.shape:
            raise InvalidInputError(f"mask shape {mask.shape} != depth shape {gt.shape}")
        valid &= mask
    return valid


def _setup(pred, gt, mask):
    pred = np.asarray(pred, dtype=float)
    gt = np.asarray(gt, dtype=float)
    valid = valid_set(pred, gt, mask)
    m = int(np.count_nonzero(valid))
    if m == 0:
        raise InvalidInputError("no valid pixels")
    return pred, gt, valid, m


# ---------------------------------------------------------------------------
# global terms

def fit_scale_shift(pred, gt, mask=None) -> ScaleShift:
    """Least-squares ``(s, t)`` minimizing ``sum (s * pred + t - gt)^2``."""
    pred, gt, valid, m = _setup(pred, gt, mask)
    p = pred[valid]
    d = gt[valid]
    if m < 2 or np.ptp(p) == 0:
        raise DegenerateFitError("scale/shift fit needs >= 2 pixels with non-constant prediction")
    # normal equations [[sum p^2, sum p], [sum p, M]] g = [sum p d, sum d]
    spp, sp, spd, sd = float(np.dot(p, p)), float(p.sum()), float(np.dot(p, d)), float(d.sum())
    det = spp * m - sp * sp
    if not det > 1e-14 * spp * m:
        raise DegenerateFitError("scale/shift normal equations are singular")
    s = (m * spd - sp * sd) / det
    t = (spp * sd - sp * spd) / det
    return ScaleShift(s, t)


def ssi_loss(pred, gt, mask=None, grad=False):
    pred, gt, valid, m = _setup(pred, gt, mask)
    st = fit_scale_shift(pred, gt, valid)
    r = np.where(valid, st.s * pred + st.t - gt, 0.0)
    value = 0.5 * float(np.sum(r * r)) / m
    if not grad:
        return value
    # (s, t) is stationary, so only the explicit dependence survives
    return value, st.s * r / m


def _downsample(e, valid):
    h, w = e.shape[0] // 2 * 2, e.shape[1] // 2 * 2
    blocks = e[:h, :w].reshape(h // 2, 2, w // 2, 2)
    vblocks = valid[:h, :w].reshape(h // 2, 2, w // 2, 2)
    return 0.25 * blocks.sum(axis=(1, 3)), vblocks.all(axis=(1, 3))


def gradient_matching_loss(pred, gt, mask=None, levels: int = 4, grad=False):
    """Multi-scale L1 of the forward-difference gradients of ``pred - gt``."""
    pred, gt, valid, m = _setup(pred, gt, mask)
    if min(pred.shape) < 2 ** (levels - 1):
        raise InvalidInputError(f"image {pred.shape} too small for {levels} pyramid levels")
    e = np.where(valid, pred - gt, 0.0)
    pyramid = [(e, valid)]
    for _ in range(levels - 1):
        pyramid.append(_downsample(*pyramid[-1]))
    total = 0.0
    cots = []
    for ek, vk in pyramid:
        g = scalar_gradient(ek, vk)
        total += float(np.sum(np.abs(g.du)) + np.sum(np.abs(g.dv)))
        if grad:
            cots.append(scalar_gradient_adjoint(np.sign(g.du), np.sign(g.dv), vk))
    value = total / m
    if not grad:
        return value
    back = cots[-1]
    for k in range(levels - 2, -1, -1):
        up = np.zeros(pyramid[k][0].shape)
        h, w = back.shape
        up[: 2 * h, : 2 * w] = 0.25 * np.repeat(np.repeat(back, 2, axis=0), 2, axis=1)
        back = cots[k] + up
    return value, np.where(valid, back, 0.0) / m


def berhu(pred, gt, mask=None, grad=False):
    """Reverse Huber with threshold ``c = 0.1 * max|e|``, averaged over pixels."""
    pred, gt, valid, m = _setup(pred, gt, mask)
    e = np.where(valid, pred - gt, 0.0)
    a = np.abs(e)
    c = 0.1 * float(a.max())
    if c == 0.0:
        return (0.0, np.zeros_like(e)) if grad else 0.0
    quad = a > c
    term = np.where(quad, (e * e + c * c) / (2 * c), a)
    value = float(np.sum(term[valid])) / m
    if not grad:
        return value
    g = np.where(quad, e / c, np.sign(e))
    # c itself moves with the largest residual
    dc = float(np.sum(np.where(quad, 0.5 - e * e / (2 * c * c), 0.0)))
    k = np.unravel_index(np.argmax(a), a.shape)
    g[k] += dc * 0.1 * np.sign(e[k])
    return value, np.where(valid, g, 0.0) / m


# ---------------------------------------------------------------------------
# local terms

def scale_alignment_loss(pred, gt, mask=None, eta: float = 0.2, grad=False):
    pred, gt, valid, m = _setup(pred, gt, mask)
    e = np.where(valid, pred - gt, 0.0)
    a = np.abs(e)
    value = float(np.sum(e * e / (1 + eta * a))) / m
    if not grad:
        return value
    return value, (2 * e + eta * e * a) / (1 + eta * a) ** 2 / m


def edge_emphasize_loss(pred, gt, image, mask=None, sigma: float = 1.0, grad=False):
    """Depth-gradient mismatch, down-weighted where the image has edges."""
    pred, gt, valid, m = _setup(pred, gt, mask)
    image = np.asarray(image, dtype=float)
    if image.shape != gt.shape:
        raise InvalidInputError(f"image shape {image.shape} != depth shape {gt.shape}")
    w = np.exp(-sigma * scalar_gradient(image).magnitude)
    gp = scalar_gradient(pred, valid)
    gg = scalar_gradient(gt, valid)
    du = gp.du - gg.du
    dv = gp.dv - gg.dv
    value = float(np.sum((w * (du * du + dv * dv))[valid])) / m
    if not grad:
        return value
    g = scalar_gradient_adjoint(2 * w * du, 2 * w * dv, valid)
    return value, np.where(valid, g, 0.0) / m


def normal_weight(gt, valid, lam: float) -> np.ndarray:
    """Per-pixel ``exp(-lam * |grad d|)`` from the ground-truth depth."""
    return np.exp(-lam * scalar_gradient(gt, valid).magnitude)


def normal_consistency_loss(pred, gt, k: CameraIntrinsics, mask=None, lam: float = 1.0, grad=False):
    """Weighted ``1 - cos`` between predicted and ground-truth normals.

    Averaged over pixels where both normals are defined.
    """
    pred, gt, valid, _ = _setup(pred, gt, mask)
    cross, pu, pv, vn = normal_stencil(pred, k, valid)
    ng = normals_from_depth(gt, k, valid)
    use = vn & ng.valid
    mn = int(np.count_nonzero(use))
    if mn == 0:
        raise InvalidInputError("no pixel has a valid normal in both maps")
    w = normal_weight(gt, valid, lam)
    sign = np.where(cross[..., 2] > 0, -1.0, 1.0)
    c = sign[..., None] * cross
    norm = np.where(use, np.linalg.norm(c, axis=-1), 1.0)
    cos = np.sum(c * ng.normals, axis=-1) / norm
    value = float(np.sum((w * (1 - cos))[use])) / mn
    if not grad:
        return value
    dc = -(w / mn)[..., None] * (ng.normals - cos[..., None] * c / norm[..., None]) / norm[..., None]
    g = np.where(use[..., None], sign[..., None] * dc, 0.0)
    dA = cross3(pv, g)
    dB = cross3(g, pu)
    dP = np.zeros_like(g)
    dP[:, 1:] += dA[:, :-1]
    dP[:, :-1] -= dA[:, :-1]
    dP[1:, :] += dB[:-1, :]
    dP[:-1, :] -= dB[:-1, :]
    dz = np.sum(dP * pixel_rays(k), axis=-1)
    return value, np.where(valid, dz, 0.0)


# ---------------------------------------------------------------------------

def total_depth_loss(pred, gt, image, k: CameraIntrinsics, mask=None, weights: LossWeights | None = None,
                     grad=False):
    w = weights or LossWeights()
    terms = {
        "ssi": ssi_loss(pred, gt, mask, grad=grad),
        "reg": gradient_matching_loss(pred, gt, mask, grad=grad),
        "berhu": berhu(pred, gt, mask, grad=grad),
        "scale": scale_alignment_loss(pred, gt, mask, eta=w.eta, grad=grad),
        "edge": edge_emphasize_loss(pred, gt, image, mask, sigma=w.sigma, grad=grad),
        "norm": normal_consistency_loss(pred, gt, k, mask, lam=w.lam, grad=grad),
    }
    coef = {"ssi": 1.0, "reg": w.w_reg, "berhu": w.alpha, "scale": w.w_scale, "edge": w.w_edge, "norm": w.w_norm}
    values = {name: (t[0] if grad else t) for name, t in terms.items()}
    total = sum(coef[name] * values[name] for name in coef)
    report = LossReport(**values, total=total, m=int(np.count_nonzero(valid_set(pred, gt, mask))))
    if not grad:
        return report
    return report, sum(coef[name] * terms[name][1] for name in coef)


def rescale_with_prior(pred, raw, d_min: float = DEPTH_MIN, d_max: float = DEPTH_MAX) -> np.ndarray:
    """Rescale a prediction into the depth range observed by a raw sensor map.

    The prediction is min-max normalized to ``n`` in [0, 1] and mapped by
    ``1 / (n / raw_min + (1 - n) / raw_max)``, so ``n = 0`` lands on the
    farthest raw depth and ``n = 1`` on the nearest. Zeros in ``raw`` are
    ignored; invalid prediction pixels stay 0.
    """
    pred = np.asarray(pred, dtype=float)
    raw = np.asarray(raw, dtype=float)
    r = raw[raw > 0]
    if r.size < 2 or r.min() == r.max():
        raise DegeneratePriorError("raw depth prior needs >= 2 valid pixels with distinct values")
    lo, hi = float(r.min()), float(r.max())
    pv = pred > 0
    if not pv.any() or np.ptp(pred[pv]) == 0:
        raise DegeneratePriorError("prediction is constant; cannot normalize")
    pmin, pmax = pred[pv].min(), pred[pv].max()
    n = np.where(pv, (pred - pmin) / (pmax - pmin), 0.0)
    # the same expression anchored at the nearer endpoint, so both ends are exact
    near_far = hi / (1.0 + n * (hi / lo - 1.0))
    near_near = lo / (1.0 - (1.0 - n) * (1.0 - lo / hi))
    ds = np.where(n < 0.5, near_far, near_near)
    return np.where(pv, np.clip(ds, d_min, d_max), 0.0)


LOSSES = {
    "ssi": ssi_loss,
    "reg": gradient_matching_loss,
    "berhu": berhu,
    "scale": scale_alignment_loss,
    "edge": edge_emphasize_loss,
    "norm": normal_consistency_loss,
}


def finite_difference_gradient(loss, pred, *args, step: float = 1e-6, pixels=None, **kwargs) -> np.ndarray:
    """Central-difference gradient of a scalar loss w.r.t. valid pixels.

    ``loss`` is a callable ``f(pred, *args, **kwargs)`` or a name from
    :data:`LOSSES`. A pixel is perturbed iff ``pred > 0`` and it is inside
    ``kwargs["mask"]`` when one is given; ``pixels`` (``(rows, cols)``)
    restricts the evaluation to a subset, leaving other entries 0.
    """
    if step <= 0:
        raise InvalidInputError("step must be positive")
    fn = LOSSES[loss] if isinstance(loss, str) else loss
    pred = np.array(pred, dtype=float)
    out = np.zeros_like(pred)
    perturb = pred > 0
    if kwargs.get("mask") is not None:
        perturb &= np.asarray(kwargs["mask"], dtype=bool)
    if pixels is not None:
        subset = np.zeros_like(perturb)
        subset[pixels] = True
        perturb &= subset
    for idx in zip(*np.nonzero(perturb)):
        x0 = pred[idx]
        pred[idx] = x0 + step
        fp = fn(pred, *args, **kwargs)
        pred[idx] = x0 - step
        fm = fn(pred, *args, **kwargs)
        pred[idx] = x0
        out[idx] = (fp - fm) / (2 * step)
    return out
