"""Depth-aware coarse-to-fine matching.

Feature maps are ``(h, w, C)`` grids whose cell ``(r, c)`` sits at source
pixel ``(stride * c, stride * r)``; coarse maps use stride 8, fine maps
stride 2. Cells are flattened row-major when forming similarity matrices.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage
from scipy.special import logsumexp

from .errors import InvalidInputError

COARSE_STRIDE = 8
FINE_STRIDE = 2


@dataclass
class FeatureMap:
    data: np.ndarray
    stride: int

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=float)
        if self.data.ndim != 3:
            raise InvalidInputError(f"feature map must be (h, w, C), got {self.data.shape}")
        if not np.all(np.isfinite(self.data)):
            raise InvalidInputError("feature map has non-finite descriptors")

    @property
    def grid(self) -> tuple[int, int]:
        return self.data.shape[:2]

    @property
    def channels(self) -> int:
        return self.data.shape[2]

    def flat(self) -> np.ndarray:
        return self.data.reshape(-1, self.channels)


@dataclass
class MatchConfig:
    tau: float = 0.1
    theta_c: float = 0.2
    window: int = 5
    fine_tau: float = 0.05

    def __post_init__(self):
        if not self.tau > 0 or not self.fine_tau > 0:
            raise InvalidInputError("temperatures must be positive")
        if not 0 < self.theta_c < 1:
            raise InvalidInputError("theta_c must lie in (0, 1)")
        if self.window < 3 or self.window % 2 == 0:
            raise InvalidInputError("window must be odd and >= 3")


@dataclass
class MatchSet:
    """Matches ``query cell i -> reference cell j`` with confidence ``P(i, j)``.

    ``query_xy``/``ref_xy`` are source-image pixel coordinates; ``stats``
    tallies ties and dropped matches.
    """

    query_idx: np.ndarray
    ref_idx: np.ndarray
    conf: np.ndarray
    query_xy: np.ndarray | None = None
    ref_xy: np.ndarray | None = None
    level: str = "coarse"
    stats: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.query_idx)

    def to_dict(self) -> dict:
        d = {
            "level": self.level,
            "query_idx": self.query_idx.tolist(),
            "ref_idx": self.ref_idx.tolist(),
            "conf": self.conf.tolist(),
            "stats": self.stats,
        }
        if self.query_xy is not None:
            d["query_xy"] = self.query_xy.tolist()
            d["ref_xy"] = self.ref_xy.tolist()
        return d

    @classmethod
    def from_dict(cls, d) -> "MatchSet":
        xy = lambda key: np.asarray(d[key], dtype=float).reshape(-1, 2) if key in d else None
        return cls(
            np.asarray(d["query_idx"], dtype=int),
            np.asarray(d["ref_idx"], dtype=int),
            np.asarray(d["conf"], dtype=float),
            xy("query_xy"),
            xy("ref_xy"),
            d.get("level", "coarse"),
            dict(d.get("stats", {})),
        )


def fuse_features(rgb_feat: FeatureMap, depth_feat: FeatureMap) -> FeatureMap:
    """Add depth features to RGB features as an auxiliary signal.

    Depth channels are standardized over the grid, then scaled by
    ``min(1, std_rgb)`` per channel so they never out-vary the RGB channel.
    Constant depth channels contribute nothing; RGB channels without any
    variation leave the standardized depth channel unscaled.
    """
    if rgb_feat.data.shape != depth_feat.data.shape or rgb_feat.stride != depth_feat.stride:
        raise InvalidInputError(
            f"feature shapes differ: {rgb_feat.data.shape}/{rgb_feat.stride} vs "
            f"{depth_feat.data.shape}/{depth_feat.stride}"
        )
    d = depth_feat.flat()
    mean = d.mean(axis=0)
    std = d.std(axis=0)
    z = np.where(std > 0, (d - mean) / np.where(std > 0, std, 1.0), 0.0)
    rgb_std = rgb_feat.flat().std(axis=0)
    gain = np.where(rgb_std > 0, np.minimum(1.0, rgb_std), 1.0)
    fused = rgb_feat.data + (z * gain).reshape(depth_feat.data.shape)
    return FeatureMap(fused, rgb_feat.stride)


def similarity_matrix(fq: FeatureMap, fr: FeatureMap, tau: float, decoder=None) -> np.ndarray:
    """``S(i, j) = <dec(fq)_i, dec(fr)_j> / tau``; ``decoder`` defaults to identity."""
    if decoder is not None:
        fq, fr = decoder(fq), decoder(fr)
    if fq.channels != fr.channels:
        raise InvalidInputError(f"channel counts differ: {fq.channels} vs {fr.channels}")
    return fq.flat() @ fr.flat().T / tau


def dual_softmax(S) -> np.ndarray:
    """Row softmax times column softmax, computed in log space."""
    S = np.asarray(S, dtype=float)
    log_row = S - logsumexp(S, axis=1, keepdims=True)
    log_col = S - logsumexp(S, axis=0, keepdims=True)
    return np.exp(log_row + log_col)


def _cell_xy(idx, grid, stride):
    r, c = np.divmod(idx, grid[1])
    return np.stack([c * stride, r * stride], axis=-1).astype(float)


def mutual_nn_filter(P, theta_c: float, grid_q=None, grid_r=None, stride: int = COARSE_STRIDE) -> MatchSet:
    """Mutual nearest neighbours of ``P`` with ``P(i, j) >= theta_c``.

    Ties go to the lowest index (and are counted in ``stats["ties"]``).
    With grid shapes given, cell indices are also converted to pixels.
    """
    P = np.asarray(P, dtype=float)
    if P.size == 0:
        return MatchSet(np.zeros(0, int), np.zeros(0, int), np.zeros(0), level="coarse", stats={"ties": 0})
    row_best = np.argmax(P, axis=1)
    col_best = np.argmax(P, axis=0)
    row_max = P[np.arange(P.shape[0]), row_best]
    col_max = P[col_best, np.arange(P.shape[1])]
    ties = int(np.count_nonzero((P == row_max[:, None]).sum(axis=1) > 1))
    ties += int(np.count_nonzero((P == col_max[None, :]).sum(axis=0) > 1))
    i = np.arange(P.shape[0])
    keep = (col_best[row_best] == i) & (row_max >= theta_c)
    qi = i[keep]
    rj = row_best[keep]
    ms = MatchSet(qi, rj, P[qi, rj], level="coarse", stats={"ties": ties})
    if grid_q is not None and grid_r is not None:
        ms.query_xy = _cell_xy(qi, grid_q, stride)
        ms.ref_xy = _cell_xy(rj, grid_r, stride)
    return ms


def coarse_match(cq: FeatureMap, cr: FeatureMap, cfg: MatchConfig, decoder=None) -> MatchSet:
    P = dual_softmax(similarity_matrix(cq, cr, cfg.tau, decoder))
    return mutual_nn_filter(P, cfg.theta_c, cq.grid, cr.grid, cq.stride)


def fine_refine(coarse: MatchSet, fine_q: FeatureMap, fine_r: FeatureMap, cfg: MatchConfig,
                decoder=None) -> MatchSet:
    """Refine coarse matches to sub-pixel reference positions.

    The query descriptor at the window center is correlated with every
    reference descriptor in a ``window x window`` neighbourhood; the softmax
    of those correlations (temperature ``cfg.fine_tau``) is a heatmap whose
    expectation gives the reference position. Matches whose reference window
    leaves the fine grid are dropped and counted.
    """
    if coarse.query_xy is None:
        raise InvalidInputError("coarse matches carry no pixel coordinates")
    if decoder is not None:
        fine_q, fine_r = decoder(fine_q), decoder(fine_r)
    half = cfg.window // 2
    cq = np.rint(coarse.query_xy / fine_q.stride).astype(int)
    cr = np.rint(coarse.ref_xy / fine_r.stride).astype(int)
    hq, wq = fine_q.grid
    hr, wr = fine_r.grid
    inside = (
        (cq[:, 0] >= 0) & (cq[:, 0] < wq) & (cq[:, 1] >= 0) & (cq[:, 1] < hq)
        & (cr[:, 0] >= half) & (cr[:, 0] < wr - half) & (cr[:, 1] >= half) & (cr[:, 1] < hr - half)
    )
    stats = dict(coarse.stats)
    stats["dropped_boundary"] = int(np.count_nonzero(~inside))
    cq, cr = cq[inside], cr[inside]
    n = len(cq)
    offs = np.arange(-half, half + 1)
    oy, ox = np.meshgrid(offs, offs, indexing="ij")
    ox, oy = ox.reshape(-1), oy.reshape(-1)
    centers = fine_q.data[cq[:, 1], cq[:, 0]]
    windows = fine_r.data[cr[:, 1, None] + oy[None], cr[:, 0, None] + ox[None]]
    logits = np.einsum("nc,nkc->nk", centers, windows) / cfg.fine_tau
    heat = np.exp(logits - logsumexp(logits, axis=1, keepdims=True))
    expected = np.stack([heat @ ox, heat @ oy], axis=-1) if n else np.zeros((0, 2))
    return MatchSet(
        coarse.query_idx[inside],
        coarse.ref_idx[inside],
        coarse.conf[inside],
        (cq * fine_q.stride).astype(float),
        (cr + expected) * fine_r.stride,
        level="fine",
        stats=stats,
    )


# ---------------------------------------------------------------------------
# built-in descriptor pyramid

_ORIENTATIONS = 8


def _orientation_channels(img, blur):
    g = ndimage.gaussian_filter(img, blur, mode="nearest") if blur > 0 else img
    gy = ndimage.sobel(g, axis=0, mode="nearest") / 8.0
    gx = ndimage.sobel(g, axis=1, mode="nearest") / 8.0
    mag = np.hypot(gx, gy)
    pos = (np.arctan2(gy, gx) % (2 * np.pi)) / (2 * np.pi) * _ORIENTATIONS
    lo = np.floor(pos).astype(int) % _ORIENTATIONS
    frac = pos - np.floor(pos)
    chans = np.zeros(img.shape + (_ORIENTATIONS,))
    rows, cols = np.indices(img.shape)
    chans[rows, cols, lo] += mag * (1 - frac)
    chans[rows, cols, (lo + 1) % _ORIENTATIONS] += mag * frac
    return chans, g


def _describe(img, stride, pool, offset, blur, grid=3, intensity_weight=0.25):
    h, w = img.shape
    hog, smooth = _orientation_channels(img, blur)
    hog = ndimage.gaussian_filter(hog, (pool, pool, 0), mode="nearest")
    mean = ndimage.gaussian_filter(smooth, pool, mode="nearest")
    rows = np.arange(0, h, stride)
    cols = np.arange(0, w, stride)
    offs = np.linspace(-offset, offset, grid).round().astype(int)
    hist, level = [], []
    for dy in offs:
        for dx in offs:
            rr = np.clip(rows + dy, 0, h - 1)[:, None]
            cc = np.clip(cols + dx, 0, w - 1)[None, :]
            hist.append(np.sqrt(hog[rr, cc]))
            level.append(mean[rr, cc])
    # both blocks are centered on their own: a shared offset kills contrast
    hist = np.concatenate(hist, axis=-1)
    hist -= hist.mean(axis=-1, keepdims=True)
    level = np.stack(level, axis=-1)
    level -= level.mean(axis=-1, keepdims=True)
    desc = np.concatenate([hist, intensity_weight * level], axis=-1)
    norm = np.linalg.norm(desc, axis=-1, keepdims=True)
    return desc / np.maximum(norm, 0.05)


def image_pyramid(image) -> tuple[FeatureMap, FeatureMap]:
    img = np.asarray(image, dtype=float)
    if img.ndim != 2:
        raise InvalidInputError(f"expected a 2D grayscale image, got {img.shape}")
    h, w = img.shape
    if h % COARSE_STRIDE or w % COARSE_STRIDE:
        raise InvalidInputError(f"image size {w}x{h} is not divisible by {COARSE_STRIDE}")
    coarse = FeatureMap(_describe(img, COARSE_STRIDE, pool=2.0, offset=4, blur=0.5), COARSE_STRIDE)
    fine = FeatureMap(_describe(img, FINE_STRIDE, pool=1.0, offset=2, blur=0.5), FINE_STRIDE)
    return coarse, fine


def normalize_depth(depth) -> np.ndarray:
    """Min-max normalize valid depths to [0, 1]; invalid pixels take the mean."""
    d = np.asarray(depth, dtype=float)
    valid = d > 0
    if not valid.any():
        return np.zeros_like(d)
    lo, hi = d[valid].min(), d[valid].max()
    n = (d - lo) / (hi - lo) if hi > lo else np.zeros_like(d)
    return np.where(valid, n, n[valid].mean())


def builtin_features(image, depth=None) -> tuple[FeatureMap, FeatureMap]:
    """Deterministic (coarse, fine) descriptors from a grayscale image.

    Descriptors are square-rooted, magnitude-weighted orientation histograms
    pooled on a 3x3 offset grid around each cell, plus a mean-removed pattern
    of local intensity levels at the same offsets. When ``depth`` is given, the same pyramid is computed on the
    normalized depth map and fused with :func:`fuse_features`.
    """
    coarse, fine = image_pyramid(image)
    if depth is None:
        return coarse, fine
    depth = np.asarray(depth, dtype=float)
    if depth.shape != np.shape(image):
        raise InvalidInputError(f"depth shape {depth.shape} != image shape {np.shape(image)}")
    dc, df = image_pyramid(normalize_depth(depth))
    return fuse_features(coarse, dc), fuse_features(fine, df)


def match_images(image_q, image_r, depth_q=None, depth_r=None, cfg: MatchConfig | None = None,
                 provider=builtin_features, decoder=None) -> MatchSet:
    """Full coarse-to-fine matching of a query/reference image pair."""
    cfg = cfg or MatchConfig()
    cq, fq = provider(image_q, depth_q)
    cr, fr = provider(image_r, depth_r)
    return fine_refine(coarse_match(cq, cr, cfg, decoder), fq, fr, cfg, decoder)
