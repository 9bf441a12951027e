"""Test-time instance optimisation.

Per pyramid level (coarse to fine): discrete displacement assignment from a
feature cost volume, Gaussian regularisation, then Adam refinement of the
dense field under the LNCC + soft-CMIF fidelity. The final dense field is
sampled at bright fixed-image pixels and reduced to an affine transform by
intensity-weighted least squares.

Displacement fields are (H, W, 2) arrays of (dx, dy): fixed pixel ``p``
corresponds to moving pixel ``p + d(p)``.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import binary_erosion, correlate1d, minimum_filter

from . import kernels
from .contrastive import encode, normalize_features, split_encoders
from .core import (AffineTransform2D, RegistrationError, _sample_grid, build_pyramid,
                   compose, invert, pyramid_depth, upsample_field, warp_affine)
from .similarity import (FidelityConfig, SoftMI, effective_window, kmeans_levels,
                         lncc_value_and_grad)

log = logging.getLogger(__name__)


class NoForegroundError(RegistrationError):
    pass


class RankDeficientFitError(RegistrationError):
    pass


@dataclass
class InstOptConfig:
    levels: int = 5
    search_radius: int = 4
    patch_radius: int = 1
    gaussian_sigma: float = 2.0
    adam_iters: int = 30
    adam_lr: float = 0.05
    diffusion_weight: float = 0.1
    intensity_threshold: float = 0.05
    min_samples: int = 64
    min_level_size: int = 8
    # hand each finer level the SHG-weighted affine projection of the field
    # rather than the raw dense field, so background noise is not propagated
    carry_affine: bool = True
    # discrete assign/smooth/project rounds per coarse level before refinement
    discrete_passes: int = 3
    # encode the moving image after each warp instead of warping its features
    reencode: bool = True
    fidelity: FidelityConfig = field(default_factory=FidelityConfig)

    def validate(self):
        if self.levels < 1 or self.search_radius < 1 or self.patch_radius < 0:
            raise ValueError("invalid levels / search_radius / patch_radius")
        if self.gaussian_sigma <= 0 or self.adam_iters < 0 or self.adam_lr <= 0:
            raise ValueError("invalid gaussian_sigma / adam_iters / adam_lr")
        if self.discrete_passes < 1:
            raise ValueError("discrete_passes must be >= 1")
        if self.diffusion_weight < 0:
            raise ValueError("diffusion_weight must be >= 0")
        if not 0 <= self.intensity_threshold < 1 or self.min_samples < 3:
            raise ValueError("invalid intensity_threshold / min_samples")
        self.fidelity.validate()
        return self


# ---------------------------------------------------------------- discrete stage

@dataclass
class CostVolume:
    costs: np.ndarray  # (H, W, 2r+1, 2r+1), indexed [y, x, dy+r, dx+r]
    radius: int

    @property
    def height(self):
        return self.costs.shape[0]

    @property
    def width(self):
        return self.costs.shape[1]


def _hwc(a):
    a = np.asarray(a, dtype=np.float64)
    return a[:, :, None] if a.ndim == 2 else a


def build_cost_volume(feat_fixed, feat_moving, r, patch_radius=1):
    ff, fm = _hwc(feat_fixed), _hwc(feat_moving)
    if ff.shape != fm.shape:
        raise ValueError(f"feature shape mismatch: {ff.shape} vs {fm.shape}")
    if r < 1:
        raise ValueError("search radius must be >= 1")
    return CostVolume(kernels.cost_volume(ff, fm, int(r), int(patch_radius)), int(r))


def candidate_order(r):
    """Candidate (dy, dx) offsets sorted by norm, then dy, then dx."""
    cands = [(dy, dx) for dy in range(-r, r + 1) for dx in range(-r, r + 1)]
    return sorted(cands, key=lambda c: (c[0] ** 2 + c[1] ** 2, c[0], c[1]))


def convex_assign(cv):
    """Per-pixel argmin displacement; ties go to the smallest (|d|, dy, dx)."""
    r = cv.radius
    order = candidate_order(r)
    side = 2 * r + 1
    flat_idx = np.array([(dy + r) * side + (dx + r) for dy, dx in order])
    costs = cv.costs.reshape(cv.height, cv.width, side * side)[:, :, flat_idx]
    best = np.argmin(costs, axis=2)
    off = np.array(order, dtype=np.float64)  # (K, 2) as (dy, dx)
    return np.stack([off[best, 1], off[best, 0]], axis=-1)


def gaussian_kernel1d(sigma):
    rad = max(int(math.floor(3.0 * sigma)), 0)
    x = np.arange(-rad, rad + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def gaussian_smooth(df, sigma):
    """Separable 3-sigma-truncated normalised Gaussian per component; edges replicate."""
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    k = gaussian_kernel1d(sigma)
    out = correlate1d(np.asarray(df, dtype=np.float64), k, axis=0, mode="nearest")
    return correlate1d(out, k, axis=1, mode="nearest")


# ---------------------------------------------------------------- continuous stage

def _diffusion(df):
    gx = df[:, 1:] - df[:, :-1]
    gy = df[1:, :] - df[:-1, :]
    n = df.shape[0] * df.shape[1]
    val = ((gx * gx).sum() + (gy * gy).sum()) / n
    g = np.zeros_like(df)
    g[:, 1:] += 2 * gx
    g[:, :-1] -= 2 * gx
    g[1:, :] += 2 * gy
    g[:-1, :] -= 2 * gy
    return val, g / n


class RefineObjective:
    """Fidelity + diffusion loss of a dense field, with analytic gradient."""

    def __init__(self, feat_fixed, feat_moving, img_fixed, img_moving, cfg):
        self.ff = _hwc(feat_fixed)
        self.fm = np.ascontiguousarray(_hwc(feat_moving))
        self.im = np.ascontiguousarray(_hwc(img_moving))
        fc = cfg.fidelity
        self.wl, self.wc, self.lam = fc.lncc_weight, fc.cmif_weight, cfg.diffusion_weight
        self.eps = fc.epsilon
        self.window = effective_window(fc.lncc_window, self.ff.shape)
        h, w = self.ff.shape[:2]
        self.xs, self.ys = _sample_grid((h, w))
        self.mi = None
        if self.wc > 0:
            fixed = np.asarray(img_fixed, dtype=np.float64).reshape(h, w)
            k = fc.k_levels
            try:
                ca = kmeans_levels(fixed, k, fc.seed).centroids
                cb = kmeans_levels(self.im[:, :, 0], k, fc.seed).centroids
            except ValueError:
                ca = cb = None
            if ca is not None:
                self.mi = SoftMI(fixed, ca, cb)

    def __call__(self, df, with_grad=True):
        sx = self.xs + df[..., 0]
        sy = self.ys + df[..., 1]
        total = 0.0
        grad = np.zeros_like(df)
        if self.wl > 0:
            wf, gx, gy = kernels.warp_bilinear(self.fm, sx, sy, with_grad=True)
            c = wf.shape[2]
            acc_l = 0.0
            for ch in range(c):
                v, g = lncc_value_and_grad(self.ff[:, :, ch], wf[:, :, ch], self.window, self.eps)
                acc_l += v
                grad[..., 0] -= self.wl * g * gx[:, :, ch] / c
                grad[..., 1] -= self.wl * g * gy[:, :, ch] / c
            total += self.wl * (1.0 - acc_l / c)
        if self.wc > 0 and self.mi is not None:
            wi, gx, gy = kernels.warp_bilinear(self.im, sx, sy, with_grad=True)
            v, g = self.mi.value_and_grad(wi[:, :, 0])
            total -= self.wc * v
            grad[..., 0] -= self.wc * g * gx[:, :, 0]
            grad[..., 1] -= self.wc * g * gy[:, :, 0]
        if self.lam > 0:
            v, g = _diffusion(df)
            total += self.lam * v
            grad += self.lam * g
        return total, grad


def adam_refine(feat_fixed, feat_moving, img_fixed, img_moving, df, cfg, history=None):
    """Adam on the dense field; ``adam_iters == 0`` returns ``df`` unchanged."""
    if cfg.adam_iters == 0:
        return df
    obj = RefineObjective(feat_fixed, feat_moving, img_fixed, img_moving, cfg)
    d = np.array(df, dtype=np.float64)
    m = np.zeros_like(d)
    v = np.zeros_like(d)
    b1, b2, eps = 0.9, 0.999, 1e-8
    for t in range(1, cfg.adam_iters + 1):
        loss, g = obj(d)
        if history is not None:
            history.append(loss)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        d -= cfg.adam_lr * (m / (1 - b1 ** t)) / (np.sqrt(v / (1 - b2 ** t)) + eps)
    if history is not None:
        history.append(obj(d)[0])
    return d


# ---------------------------------------------------------------- affine extraction

@dataclass
class SparseDisplacements:
    x: np.ndarray
    y: np.ndarray
    dx: np.ndarray
    dy: np.ndarray
    weight: np.ndarray

    def __len__(self):
        return len(self.x)


def sample_sparse(df, shg, threshold=0.05, min_samples=64):
    """Displacements at pixels brighter than ``threshold`` in the SHG image, weighted
    by intensity. Too few such pixels lowers the threshold to the
    ``min_samples``-th brightest value."""
    s = np.asarray(shg, dtype=np.float64)
    if s.ndim == 3:
        s = s.mean(axis=2)
    if s.shape != df.shape[:2]:
        raise ValueError("field and SHG image dimensions differ")
    if not np.any(s > 0):
        raise NoForegroundError("no foreground")
    mask = s > threshold
    if mask.sum() < min_samples:
        flat = s.ravel()
        k = min(min_samples, int((flat > 0).sum()))
        order = np.argsort(-flat, kind="stable")[:k]
        mask = np.zeros(flat.size, dtype=bool)
        mask[order] = True
        mask = mask.reshape(s.shape)
    ys, xs = np.nonzero(mask)
    return SparseDisplacements(xs.astype(np.float64), ys.astype(np.float64),
                               df[ys, xs, 0], df[ys, xs, 1], s[ys, xs])


def fit_affine_lsq(sd, damping=1e-9):
    """Weighted least-squares affine taking (x, y) to (x + dx, y + dy).

    Solved through the 3x3 normal equations (shared by both output rows) with
    Tikhonov damping on the Gram matrix, followed by one step of iterative
    refinement so exact data is reproduced to rounding error. Coordinates are
    centred first.
    """
    if len(sd) < 3:
        raise RankDeficientFitError("rank-deficient fit: fewer than 3 samples")
    w = np.asarray(sd.weight, dtype=np.float64)
    x, y = np.asarray(sd.x, dtype=np.float64), np.asarray(sd.y, dtype=np.float64)
    cx = (w * x).sum() / w.sum()
    cy = (w * y).sum() / w.sum()
    a = np.column_stack([x - cx, y - cy, np.ones_like(x)])
    gram = a.T @ (w[:, None] * a)
    scale = max(np.abs(gram).max(), 1.0)
    if np.linalg.matrix_rank(gram / scale, tol=1e-10) < 3:
        raise RankDeficientFitError("rank-deficient fit: collinear sample locations")
    damped = gram + damping * np.eye(3)
    tx = x + sd.dx
    ty = y + sd.dy
    rhs = a.T @ (w[:, None] * np.column_stack([tx, ty]))
    sol = np.linalg.solve(damped, rhs)  # (3, 2)
    # one refinement step against the undamped system removes the damping bias
    sol = sol + np.linalg.solve(damped, rhs - gram @ sol)
    lin = sol[:2].T
    off = sol[2] - lin @ np.array([cx, cy])
    return AffineTransform2D(np.column_stack([lin, off]))


def robust_affine(sd, iters=5, scale=1.0):
    """Huber-reweighted :func:`fit_affine_lsq`; residuals beyond ``scale`` pixels
    are down-weighted in proportion to their size."""
    t = fit_affine_lsq(sd)
    base = np.asarray(sd.weight, dtype=np.float64)
    src = np.column_stack([sd.x, sd.y])
    dst = src + np.column_stack([sd.dx, sd.dy])
    for _ in range(iters):
        r = np.linalg.norm(t.apply(src) - dst, axis=1)
        w = base * np.minimum(1.0, scale / np.maximum(r, 1e-12))
        t = fit_affine_lsq(SparseDisplacements(sd.x, sd.y, sd.dx, sd.dy, w))
    return t


def level_affine_to_full(t, level):
    """Express an affine on level-``level`` grid coordinates in full-resolution pixels."""
    f = 2.0 ** level
    c = (f - 1.0) / 2.0
    to_full = AffineTransform2D(np.array([[f, 0.0, c], [0.0, f, c]]))
    return compose(to_full, compose(t, invert(to_full)))


def _matrix_list(t):
    return [[float(v) for v in row] for row in t.matrix]


def affine_field(t, shape):
    """Dense (dx, dy) field of the affine map ``t`` on an (H, W) grid."""
    xs, ys = _sample_grid(shape)
    m = t.matrix
    return np.stack([m[0, 0] * xs + m[0, 1] * ys + m[0, 2] - xs,
                     m[1, 0] * xs + m[1, 1] * ys + m[1, 2] - ys], axis=-1)


# ---------------------------------------------------------------- driver

def _moving_support(shape_moving, t_init, out_shape, margin):
    """1 where the t_init-warped moving image has content at least ``margin``
    pixels from its edge, else 0."""
    cover = warp_affine(np.ones(shape_moving[:2]), t_init, out_shape=out_shape) > 1.0 - 1e-9
    if margin > 0:
        cover = binary_erosion(cover, iterations=margin, border_value=0)
    return cover.astype(np.float64)


def _fit_weights(shg, support, df, patch_radius):
    """SHG intensity, zeroed where ``p + d(p)`` leaves the moving support."""
    h, w = shg.shape[:2]
    xs, ys = _sample_grid((h, w))
    inside = kernels.warp_bilinear(np.ascontiguousarray(support[:, :, None]),
                                   xs + df[..., 0], ys + df[..., 1])[:, :, 0]
    inside = inside > 1.0 - 1e-9
    if patch_radius > 0:
        inside = minimum_filter(inside, size=2 * patch_radius + 1, mode="constant", cval=0)
    s = shg if shg.ndim == 2 else shg.mean(axis=2)
    return s * inside


@dataclass
class InstOptResult:
    transform: AffineTransform2D
    fitted: AffineTransform2D  # fixed -> t_init-warped-moving, from the sparse fit
    field: np.ndarray
    n_samples: int
    levels: list


def instance_optimize_details(img_fixed, img_moving, enc, t_init, cfg=None):
    """Coarse-to-fine optimisation starting from ``t_init`` (moving -> fixed).

    With ``carry_affine`` the running estimate is an affine transform: every
    discrete pass warps the moving image by it, re-encodes, assigns and smooths
    a residual field, and folds the field's SHG-weighted affine projection
    back into the estimate. Otherwise the dense field itself is upsampled from
    level to level. Either way the last full-resolution field is reduced to
    the returned affine by :func:`fit_affine_lsq`.
    """
    cfg = (cfg or InstOptConfig()).validate()
    enc_f, enc_m = split_encoders(enc)
    fixed = np.asarray(img_fixed, dtype=np.float64)
    shape = fixed.shape[:2]
    nlev = min(cfg.levels, pyramid_depth(shape, cfg.levels, cfg.min_level_size))
    pf = build_pyramid(normalize_features(encode(enc_f, fixed)), nlev)
    pif = build_pyramid(fixed, nlev)
    margin = len(enc_m.layers)

    feat_m = normalize_features(encode(enc_m, img_moving)) if not cfg.reencode else None

    def moving_pyramids(t):
        mw = warp_affine(img_moving, t, out_shape=shape)
        if cfg.reencode:
            fm = normalize_features(encode(enc_m, mw))
        else:
            fm = warp_affine(feat_m, t, out_shape=shape)
        pm = build_pyramid(fm, nlev)
        pim = build_pyramid(mw, nlev)
        sup = _moving_support(np.shape(img_moving), t, shape, margin)
        # a coarse pixel counts as covered when most of its footprint is
        psup = [(lvl > 0.5).astype(np.float64) for lvl in build_pyramid(sup, nlev)]
        return pm, pim, psup

    def project(df, lev, psup):
        """SHG-weighted robust affine of ``df`` in full-resolution pixels, or None."""
        try:
            shg = _fit_weights(pif[lev], psup[lev], df, cfg.patch_radius)
            sd = sample_sparse(df, shg, cfg.intensity_threshold, cfg.min_samples)
            return level_affine_to_full(robust_affine(sd), lev)
        except RegistrationError:
            return None

    def agreement(pm, psup, lev):
        # coarse features alone can prefer a wrong alignment, so finer levels vote too
        total = 0.0
        for k in range(lev + 1):
            w = pif[k] * psup[k]
            tot = w.sum()
            if tot <= 0:
                return -np.inf
            total += float(np.sum(w * np.sum(pf[k] * pm[k], axis=-1)) / tot)
        return total / (lev + 1)

    def try_fold(t_cur, pm, pim, psup, df, lev):
        """Adopt the projected update only when it improves feature agreement."""
        a = project(df, lev, psup)
        if a is None:
            return t_cur, pm, pim, psup, False
        t_new = _fold(t_cur, a)
        cand = moving_pyramids(t_new)
        if agreement(cand[0], cand[2], lev) <= agreement(pm, psup, lev):
            return t_cur, pm, pim, psup, False
        return (t_new, *cand, True)

    t_cur = t_init
    pm, pim, psup = moving_pyramids(t_cur)
    df = None
    diags = []
    for lev in range(nlev - 1, -1, -1):
        h, w = pf[lev].shape[:2]
        grid = _sample_grid((h, w))
        passes = cfg.discrete_passes if (cfg.carry_affine and lev > 0) else 1
        for _ in range(passes):
            if cfg.carry_affine or df is None:
                df = np.zeros((h, w, 2))
            elif df.shape[:2] != (h, w):
                df = upsample_field(df, (h, w))
            warped = kernels.warp_bilinear(np.ascontiguousarray(pm[lev]),
                                           grid[0] + df[..., 0], grid[1] + df[..., 1])
            cv = build_cost_volume(pf[lev], warped, cfg.search_radius, cfg.patch_radius)
            df = gaussian_smooth(df + convex_assign(cv), cfg.gaussian_sigma)
            if _ < passes - 1:
                # the last pass is refined by Adam before projecting
                t_cur, pm, pim, psup, moved = try_fold(t_cur, pm, pim, psup, df, lev)
                if not moved:
                    break
        hist = []
        df = adam_refine(pf[lev], pm[lev], pif[lev], pim[lev], df, cfg, history=hist)
        diags.append({"level": lev, "shape": [h, w], "passes": passes,
                      "loss_start": float(hist[0]) if hist else None,
                      "loss_end": float(hist[-1]) if hist else None})
        if cfg.carry_affine and lev > 0:
            t_cur, pm, pim, psup, _m = try_fold(t_cur, pm, pim, psup, df, lev)
            diags[-1]["affine"] = _matrix_list(t_cur)

    shg = _fit_weights(fixed, psup[0], df, cfg.patch_radius)
    if not np.any(shg > 0):
        shg = fixed  # no overlap information; fall back to plain SHG weighting
    sd = sample_sparse(df, shg, cfg.intensity_threshold, cfg.min_samples)
    fitted = fit_affine_lsq(sd)
    final = compose(invert(fitted), t_cur)
    return InstOptResult(final, fitted, df, len(sd), diags)


def _fold(t_cur, a):
    """Absorb a residual fixed -> warped-moving affine ``a`` into ``t_cur``."""
    return t_cur if a is None else compose(invert(a), t_cur)


def alignment_score(img_fixed, img_moving, enc, t, feat_fixed=None):
    """SHG-weighted mean cosine similarity of fixed features and the features of
    the moving image warped by ``t``, over the warped image's support.

    Near 1 at a correct alignment; used to choose between starting points.
    """
    enc_f, enc_m = split_encoders(enc)
    fixed = np.asarray(img_fixed, dtype=np.float64)
    shape = fixed.shape[:2]
    ff = normalize_features(encode(enc_f, fixed)) if feat_fixed is None else feat_fixed
    fm = normalize_features(encode(enc_m, warp_affine(img_moving, t, out_shape=shape)))
    shg = fixed if fixed.ndim == 2 else fixed.mean(axis=2)
    w = shg * _moving_support(np.shape(img_moving), t, shape, len(enc_m.layers))
    total = w.sum()
    if total <= 0:
        return 0.0
    return float(np.sum(w * np.sum(ff * fm, axis=-1)) / total)


def instance_optimize(img_fixed, img_moving, enc, t_init, cfg=None):
    return instance_optimize_details(img_fixed, img_moving, enc, t_init, cfg).transform
