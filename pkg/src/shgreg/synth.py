"""Synthetic SHG/BF-like pairs with known affine ground truth."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import gaussian_filter

from .core import AffineTransform2D, compose, invert, warp_affine, warp_landmarks

BEZIER_TABLE = 257


@dataclass
class SynthConfig:
    size: tuple = (256, 256)
    seed: int = 0
    rotation_range: float = 15.0
    scale_range: tuple = (0.9, 1.1)
    shear_range: float = 5.0
    translation_range: float = 10.0
    # (p1_lo, p1_hi, p2_lo, p2_hi): control-point ordinates drawn per pair
    bezier_control_points: tuple = (0.05, 0.5, 0.5, 0.95)
    foreground_density: float = 0.03
    noise_sigma: float = 0.02
    fiber_width: float = 1.2
    texture_contrast: float = 0.08
    margin: int = 96

    def validate(self):
        lo, hi = self.scale_range
        c = self.bezier_control_points
        if len(self.size) != 2 or min(self.size) < 8:
            raise ValueError("size must be (H, W) with both >= 8")
        if self.rotation_range < 0 or self.shear_range < 0 or self.translation_range < 0:
            raise ValueError("ranges must be nonnegative")
        if not 0 < lo <= hi:
            raise ValueError("scale_range must satisfy 0 < lo <= hi")
        if len(c) != 4 or not all(0.0 <= v <= 1.0 for v in c) or c[0] > c[1] or c[2] > c[3]:
            raise ValueError("bezier_control_points must be (p1_lo, p1_hi, p2_lo, p2_hi) in [0, 1]")
        if not 0.0 < self.foreground_density < 1.0:
            raise ValueError("foreground_density must be in (0, 1)")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")
        return self


@dataclass
class SynthPair:
    fixed: np.ndarray
    moving: np.ndarray
    truth: AffineTransform2D
    landmarks_fixed: np.ndarray
    landmarks_moving: np.ndarray
    structure: np.ndarray  # noise-free fibres in the fixed frame
    moving_structure: np.ndarray  # the same fibres resampled into the moving frame
    bezier: tuple


def bezier_curve(t, p1, p2):
    """Ordinate of the cubic Bezier with control points (0,0), (1/3,p1), (2/3,p2), (1,1).

    The abscissa of that curve is exactly ``t``, so this is the intensity map.
    """
    t = np.asarray(t, dtype=np.float64)
    u = 1.0 - t
    return 3.0 * u * u * t * p1 + 3.0 * u * t * t * p2 + t ** 3


def bezier_remap(img, p1, p2):
    """Remap [0, 1] intensities through a 257-entry Bezier lookup table."""
    a = np.asarray(img, dtype=np.float64)
    if a.size and (a.min() < 0.0 or a.max() > 1.0 or not np.all(np.isfinite(a))):
        raise ValueError("bezier_remap needs intensities in [0, 1]")
    grid = np.linspace(0.0, 1.0, BEZIER_TABLE)
    table = bezier_curve(grid, p1, p2)
    return np.interp(a, grid, table)


def random_affine(rng, cfg, center):
    """Draw center-anchored rotation * shear * scale plus translation."""
    th = math.radians(rng.uniform(-cfg.rotation_range, cfg.rotation_range))
    sx = rng.uniform(*cfg.scale_range)
    sy = rng.uniform(*cfg.scale_range)
    sh = math.radians(rng.uniform(-cfg.shear_range, cfg.shear_range))
    tx = rng.uniform(-cfg.translation_range, cfg.translation_range)
    ty = rng.uniform(-cfg.translation_range, cfg.translation_range)
    c, s = math.cos(th), math.sin(th)
    rot = np.array([[c, -s], [s, c]])
    shear = np.array([[1.0, math.tan(sh)], [0.0, 1.0]])
    lin = rot @ shear @ np.diag([sx, sy])
    cx, cy = center
    off = np.array([cx, cy]) - lin @ np.array([cx, cy]) + np.array([tx, ty])
    return AffineTransform2D(np.column_stack([lin, off]))


def _render_fibres(rng, shape, density, width, count_region):
    """Smooth random curves with Gaussian cross-section; stop at the target bright fraction."""
    h, w = shape
    canvas = np.zeros(shape)
    y0, y1, x0, x1 = count_region
    area = (y1 - y0) * (x1 - x0)
    rad = int(math.ceil(3 * width))
    offs = np.arange(-rad, rad + 1)
    for _ in range(10000):
        if (canvas[y0:y1, x0:x1] > 0.5).sum() >= density * area:
            break
        amp = rng.uniform(0.65, 1.0)
        length = rng.uniform(25.0, 90.0)
        x = rng.uniform(0, w - 1)
        y = rng.uniform(0, h - 1)
        ang = rng.uniform(0, 2 * math.pi)
        curv = rng.normal(0.0, 0.03)
        nstep = int(length / 0.25)
        pts = np.empty((nstep, 2))
        for i in range(nstep):
            pts[i] = (x, y)
            curv += rng.normal(0.0, 0.004)
            ang += curv * 0.25
            x += 0.25 * math.cos(ang)
            y += 0.25 * math.sin(ang)
        ix = np.floor(pts[:, 0]).astype(int)
        iy = np.floor(pts[:, 1]).astype(int)
        for dy in offs:
            for dx in offs:
                px = ix + dx
                py = iy + dy
                ok = (px >= 0) & (px < w) & (py >= 0) & (py < h)
                d2 = (px - pts[:, 0]) ** 2 + (py - pts[:, 1]) ** 2
                val = amp * np.exp(-d2 / (2 * width * width))
                np.maximum.at(canvas, (py[ok], px[ok]), val[ok])
    return canvas


def _texture(rng, shape, contrast):
    coarse = gaussian_filter(rng.normal(size=shape), 8.0, mode="wrap")
    fine = gaussian_filter(rng.normal(size=shape), 2.5, mode="wrap")
    coarse /= coarse.std() + 1e-12
    fine /= fine.std() + 1e-12
    return np.clip(0.45 + contrast * coarse + 0.5 * contrast * fine, 0.0, 1.0)


def grid_landmarks(shape, n=8):
    """n x n interior grid of (x, y) points."""
    h, w = shape
    xs = np.linspace(w / 8.0, w - 1 - w / 8.0, n)
    ys = np.linspace(h / 8.0, h - 1 - h / 8.0, n)
    gx, gy = np.meshgrid(xs, ys)
    return np.column_stack([gx.ravel(), gy.ravel()])


def generate_pair(cfg):
    """Fixed = fibres + noise; moving = fibres over texture, warped by truth^-1,
    Bezier-remapped, plus noise. Deterministic in ``cfg.seed``."""
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    h, w = cfg.size
    m = int(cfg.margin)
    big = (h + 2 * m, w + 2 * m)
    truth = random_affine(rng, cfg, ((w - 1) / 2.0, (h - 1) / 2.0))

    fibres = _render_fibres(rng, big, cfg.foreground_density, cfg.fiber_width, (m, m + h, m, m + w))
    texture = _texture(rng, big, cfg.texture_contrast)
    composite = texture * (1.0 - fibres) + fibres

    structure = fibres[m:m + h, m:m + w].copy()
    # moving(q) = canvas(truth(q) + margin)
    shift = AffineTransform2D.translation(m, m)
    to_moving = invert(compose(shift, truth))
    moving_structure = warp_affine(fibres, to_moving, out_shape=(h, w))
    moving_clean = warp_affine(composite, to_moving, out_shape=(h, w))

    c = cfg.bezier_control_points
    p1 = rng.uniform(c[0], c[1])
    p2 = rng.uniform(c[2], c[3])
    p1, p2 = min(p1, p2), max(p1, p2)
    moving = bezier_remap(np.clip(moving_clean, 0.0, 1.0), p1, p2)

    fixed = structure.copy()
    if cfg.noise_sigma > 0:
        fixed = fixed + rng.normal(0.0, cfg.noise_sigma, fixed.shape)
        moving = moving + rng.normal(0.0, cfg.noise_sigma, moving.shape)
    fixed = np.clip(fixed, 0.0, 1.0)
    moving = np.clip(moving, 0.0, 1.0)

    lm_fixed = grid_landmarks((h, w))
    lm_moving = warp_landmarks(lm_fixed, invert(truth))
    return SynthPair(fixed, moving, truth, lm_fixed, lm_moving, structure,
                     moving_structure, (p1, p2))


def registered_pair(pair):
    """(fixed, moving resampled into the fixed frame by the ground truth)."""
    return pair.fixed, warp_affine(pair.moving, pair.truth)
