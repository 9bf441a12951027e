"""Pure numpy implementations of the hot kernels.

These are the reference fallbacks; ``_ckernels`` (Cython) mirrors them and is
preferred when it has been compiled.
"""

import numpy as np


def warp_bilinear(img, sx, sy, with_grad=False):
    """Sample ``img`` (H, W, C) at real coordinates ``(sx, sy)`` of shape (h, w).

    Neighbours outside the image contribute zero. When ``with_grad`` is set,
    also return the derivatives of the sampled values with respect to the
    x and y sample coordinates.
    """
    img = np.ascontiguousarray(img, dtype=np.float64)
    h_img, w_img, _ = img.shape
    sx = np.asarray(sx, dtype=np.float64)
    sy = np.asarray(sy, dtype=np.float64)

    x0f = np.floor(sx)
    y0f = np.floor(sy)
    fx = (sx - x0f)[..., None]
    fy = (sy - y0f)[..., None]
    x0 = x0f.astype(np.int64)
    y0 = y0f.astype(np.int64)
    x1 = x0 + 1
    y1 = y0 + 1

    def tap(yy, xx):
        ok = (xx >= 0) & (xx < w_img) & (yy >= 0) & (yy < h_img)
        v = img[np.clip(yy, 0, h_img - 1), np.clip(xx, 0, w_img - 1)]
        return np.where(ok[..., None], v, 0.0)

    v00 = tap(y0, x0)
    v10 = tap(y0, x1)
    v01 = tap(y1, x0)
    v11 = tap(y1, x1)

    gx_ = 1.0 - fx
    gy_ = 1.0 - fy
    out = v00 * gx_ * gy_ + v10 * fx * gy_ + v01 * gx_ * fy + v11 * fx * fy
    if not with_grad:
        return out
    dx = (v10 - v00) * gy_ + (v11 - v01) * fy
    dy = (v01 - v00) * gx_ + (v11 - v10) * fx
    return out, dx, dy


def cost_volume(fixed, moving, radius, patch_radius):
    """Patch mean-squared feature difference for every candidate displacement.

    Returns an array (H, W, 2r+1, 2r+1) indexed ``[y, x, dy + r, dx + r]``.
    Both maps are zero outside their bounds. Squared differences are summed
    in (patch row, patch column, channel) order, so results are bit-identical
    to a scalar loop with the same order.
    """
    fixed = np.ascontiguousarray(fixed, dtype=np.float64)
    moving = np.ascontiguousarray(moving, dtype=np.float64)
    h, w, c = fixed.shape
    r = int(radius)
    pr = int(patch_radius)
    side = 2 * r + 1
    k = 2 * pr + 1
    denom = float(k * k * c)

    fpad = np.zeros((h + 2 * pr, w + 2 * pr, c))
    fpad[pr:pr + h, pr:pr + w] = fixed
    m = pr + r
    mpad = np.zeros((h + 2 * m, w + 2 * m, c))
    mpad[m:m + h, m:m + w] = moving

    out = np.empty((h, w, side, side))
    for iy in range(side):
        for ix in range(side):
            acc = np.zeros((h, w))
            for v in range(k):
                for u in range(k):
                    fs = fpad[v:v + h, u:u + w]
                    ms = mpad[iy + v:iy + v + h, ix + u:ix + u + w]
                    for ch in range(c):
                        d = fs[:, :, ch] - ms[:, :, ch]
                        acc += d * d
            out[:, :, iy, ix] = acc / denom
    return out
