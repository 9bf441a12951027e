"""Raster, affine transform, pyramid and landmark-error primitives.

Conventions
-----------
Images are float64 numpy arrays of shape (H, W) or (H, W, C). Pixel centres
sit at integer coordinates, origin top-left, x to the right and y down.

An :class:`AffineTransform2D` ``t`` maps moving-image coordinates to
fixed-image coordinates. ``warp_affine(moving, t)`` resamples the moving
image into the fixed frame by backward warping: output pixel ``p`` takes the
moving value at ``t^-1(p)``. Landmarks follow the same direction, so
``warp_landmarks(moving_landmarks, t)`` should land on the fixed landmarks.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import kernels

SINGULAR_DET = 1e-12


class RegistrationError(Exception):
    """Base class for recoverable failures inside the registration pipeline."""


class SingularTransformError(RegistrationError, ValueError):
    pass


def as_image(data, name="image"):
    """Validate and convert to a float64 (H, W) or (H, W, C) array."""
    a = np.asarray(data, dtype=np.float64)
    if a.ndim not in (2, 3) or a.shape[0] < 1 or a.shape[1] < 1:
        raise ValueError(f"{name} must be (H, W) or (H, W, C), got shape {a.shape}")
    if a.ndim == 3 and a.shape[2] < 1:
        raise ValueError(f"{name} has zero channels")
    if not np.all(np.isfinite(a)):
        raise ValueError(f"{name} contains non-finite values")
    return a


def _as_hwc(img):
    return img[:, :, None] if img.ndim == 2 else img


@dataclass(frozen=True, eq=False)
class AffineTransform2D:
    """2x3 affine matrix ``[[a, b, tx], [c, d, ty]]`` in pixel coordinates."""

    matrix: np.ndarray

    def __post_init__(self):
        m = np.array(self.matrix, dtype=np.float64).reshape(2, 3)
        if not np.all(np.isfinite(m)):
            raise ValueError("affine matrix has non-finite entries")
        m.setflags(write=False)
        object.__setattr__(self, "matrix", m)

    @classmethod
    def identity(cls):
        return cls(np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]))

    @classmethod
    def translation(cls, tx, ty):
        return cls(np.array([[1.0, 0.0, tx], [0.0, 1.0, ty]]))

    @classmethod
    def rotation(cls, degrees, center=(0.0, 0.0)):
        """Counter-clockwise in the x-right/y-down frame as seen on a plot with y up."""
        th = math.radians(degrees)
        c, s = math.cos(th), math.sin(th)
        cx, cy = center
        lin = np.array([[c, -s], [s, c]])
        off = np.array([cx, cy]) - lin @ np.array([cx, cy])
        return cls(np.column_stack([lin, off]))

    @classmethod
    def from_homogeneous(cls, h):
        return cls(np.asarray(h, dtype=np.float64)[:2, :])

    @property
    def linear(self):
        return self.matrix[:, :2]

    @property
    def offset(self):
        return self.matrix[:, 2]

    @property
    def det(self):
        m = self.matrix
        return m[0, 0] * m[1, 1] - m[0, 1] * m[1, 0]

    def homogeneous(self):
        h = np.eye(3)
        h[:2, :] = self.matrix
        return h

    def apply(self, points):
        """Map an (N, 2) array of (x, y) points."""
        p = np.asarray(points, dtype=np.float64).reshape(-1, 2)
        m = self.matrix
        x = m[0, 0] * p[:, 0] + m[0, 1] * p[:, 1] + m[0, 2]
        y = m[1, 0] * p[:, 0] + m[1, 1] * p[:, 1] + m[1, 2]
        return np.column_stack([x, y])

    def to_dict(self):
        return {"matrix": [[float(v) for v in row] for row in self.matrix]}

    @classmethod
    def from_dict(cls, d):
        return cls(np.asarray(d["matrix"], dtype=np.float64))

    def allclose(self, other, atol=1e-9):
        return bool(np.allclose(self.matrix, other.matrix, rtol=0.0, atol=atol))

    def __repr__(self):
        rows = ", ".join("[" + ", ".join(f"{v:.6g}" for v in r) + "]" for r in self.matrix)
        return f"AffineTransform2D([{rows}])"


def compose(t1, t2):
    """Transform applying ``t2`` first, then ``t1``."""
    a = t1.matrix
    b = t2.matrix
    lin = a[:, :2] @ b[:, :2]
    off = a[:, :2] @ b[:, 2] + a[:, 2]
    return AffineTransform2D(np.column_stack([lin, off]))


def invert(t):
    det = t.det
    if abs(det) < SINGULAR_DET:
        raise SingularTransformError("singular affine transform (|det| < 1e-12)")
    a, b, tx = t.matrix[0]
    c, d, ty = t.matrix[1]
    inv_lin = np.array([[d, -b], [-c, a]]) / det
    inv_off = -inv_lin @ np.array([tx, ty])
    return AffineTransform2D(np.column_stack([inv_lin, inv_off]))


def _sample_grid(shape):
    h, w = shape
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    return xs, ys


def sample_image(img, sx, sy, interp="bilinear"):
    """Sample ``img`` at coordinates ``(sx, sy)`` with zero fill outside."""
    hwc = _as_hwc(img)
    if interp == "bilinear":
        out = kernels.warp_bilinear(hwc, sx, sy)
    elif interp == "nearest":
        xi = np.floor(sx + 0.5).astype(np.int64)
        yi = np.floor(sy + 0.5).astype(np.int64)
        h, w = hwc.shape[:2]
        ok = (xi >= 0) & (xi < w) & (yi >= 0) & (yi < h)
        out = np.where(ok[..., None], hwc[np.clip(yi, 0, h - 1), np.clip(xi, 0, w - 1)], 0.0)
    else:
        raise ValueError(f"unknown interpolation {interp!r}")
    return out[:, :, 0] if img.ndim == 2 else out


def warp_affine(img, t, interp="bilinear", out_shape=None):
    """Backward-warp ``img`` by ``t`` (output pixel p samples ``t^-1(p)``).

    ``out_shape`` defaults to the input height and width.
    """
    img = as_image(img)
    try:
        inv = invert(t)
    except SingularTransformError:
        raise SingularTransformError("non-invertible affine") from None
    shape = img.shape[:2] if out_shape is None else tuple(out_shape)
    xs, ys = _sample_grid(shape)
    m = inv.matrix
    sx = m[0, 0] * xs + m[0, 1] * ys + m[0, 2]
    sy = m[1, 0] * xs + m[1, 1] * ys + m[1, 2]
    return sample_image(img, sx, sy, interp)


def warp_field(img, df):
    """Bilinear resample ``img`` at ``p + df(p)`` for every pixel ``p``."""
    xs, ys = _sample_grid(df.shape[:2])
    return sample_image(img, xs + df[..., 0], ys + df[..., 1])


def warp_landmarks(lms, t):
    """Forward-map landmark points by ``t``."""
    return t.apply(lms)


def downsample2(img):
    """2x2 box average then stride 2; odd trailing rows/columns average what exists."""
    hwc = _as_hwc(img)
    h, w, c = hwc.shape
    h2, w2 = -(-h // 2), -(-w // 2)
    pad = np.zeros((2 * h2, 2 * w2, c))
    cnt = np.zeros((2 * h2, 2 * w2, 1))
    pad[:h, :w] = hwc
    cnt[:h, :w] = 1.0
    s = pad.reshape(h2, 2, w2, 2, c).sum(axis=(1, 3))
    n = cnt.reshape(h2, 2, w2, 2, 1).sum(axis=(1, 3))
    out = s / n
    return out[:, :, 0] if img.ndim == 2 else out


def build_pyramid(img, levels):
    """Levels 0..levels-1 at scales 1, 1/2, 1/4, ...; level k is ceil(H/2^k) x ceil(W/2^k)."""
    if levels < 1:
        raise ValueError("levels must be >= 1")
    pyr = [as_image(img)]
    for _ in range(levels - 1):
        pyr.append(downsample2(pyr[-1]))
    return pyr


def pyramid_depth(shape, max_levels=5, min_size=8):
    """Number of pyramid levels (<= max_levels) whose coarsest side stays >= min_size."""
    h, w = shape[:2]
    n = 1
    while n < max_levels:
        k = n
        if min(-(-h // 2 ** k), -(-w // 2 ** k)) < min_size:
            break
        n += 1
    return n


def level_to_full(coords, level):
    """Map pixel coordinates at pyramid ``level`` to full-resolution coordinates."""
    s = 2.0 ** level
    return np.asarray(coords, dtype=np.float64) * s + (s - 1.0) / 2.0


def upsample_field(df, shape):
    """Resample a displacement field one pyramid level finer and double it."""
    h, w = shape
    xs, ys = _sample_grid((h, w))
    # level-k pixel u sits at u/2 - 1/4 in level-(k+1) coordinates
    sx = np.clip(xs / 2.0 - 0.25, 0.0, df.shape[1] - 1.0)
    sy = np.clip(ys / 2.0 - 0.25, 0.0, df.shape[0] - 1.0)
    return 2.0 * kernels.warp_bilinear(np.ascontiguousarray(df), sx, sy)


@dataclass
class TREResult:
    mean: float
    std: float
    per_point: list

    def to_dict(self):
        return {"mean": self.mean, "std": self.std, "per_point": list(self.per_point)}


def tre(fixed_lms, warped_lms, spacing=1.0):
    """Target registration error between corresponding landmark sets.

    Distances are Euclidean, scaled by ``spacing`` (1.0 reports pixels); the
    standard deviation is the population one.
    """
    a = np.asarray(fixed_lms, dtype=np.float64).reshape(-1, 2)
    b = np.asarray(warped_lms, dtype=np.float64).reshape(-1, 2)
    if len(a) != len(b):
        raise ValueError(f"landmark count mismatch: {len(a)} vs {len(b)}")
    if len(a) == 0:
        raise ValueError("need at least one landmark pair")
    d = np.hypot(a[:, 0] - b[:, 0], a[:, 1] - b[:, 1]) * spacing
    return TREResult(float(d.mean()), float(d.std()), [float(v) for v in d])
