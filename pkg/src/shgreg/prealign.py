"""Feature-based prealignment: keypoints and descriptors on learned feature
maps, mutual nearest-neighbour matching and RANSAC affine estimation."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import maximum_filter, minimum_filter
from scipy.spatial.distance import cdist

from .contrastive import encode, split_encoders
from .core import AffineTransform2D, RegistrationError, build_pyramid, level_to_full
from .instopt import SparseDisplacements, fit_affine_lsq
from .kernels import warp_bilinear

log = logging.getLogger(__name__)


class InsufficientMatchesError(RegistrationError):
    pass


class DegenerateConfigurationError(RegistrationError):
    pass


class BorderKeypointError(ValueError):
    pass


@dataclass(frozen=True)
class Keypoint:
    x: float
    y: float
    response: float


@dataclass
class Match:
    index_a: int
    index_b: int
    distance: float


@dataclass
class PrealignConfig:
    level: int = 1
    max_kp: int = 600
    nms_radius: int = 3
    patch: int = 8
    ratio: float = 0.9
    ransac_iters: int = 2000
    inlier_px: float = 3.0
    seed: int = 0
    # acceptance of the RANSAC model: enough inliers and a near-rigid linear part
    min_inliers: int = 6
    max_scale: float = 2.0
    # rotations (degrees, about the image centre) tried as starting points
    # for instance optimisation when prealignment fails
    fallback_angles: tuple = (0.0, -10.0, 10.0)

    def validate(self):
        if self.level < 0 or self.max_kp < 1 or self.nms_radius < 0:
            raise ValueError("invalid prealign level / max_kp / nms_radius")
        if self.patch < 2 or self.patch % 2:
            raise ValueError("descriptor patch must be even and >= 2")
        if not 0 < self.ratio <= 1:
            raise ValueError("ratio must be in (0, 1]")
        if self.ransac_iters < 1 or self.inlier_px <= 0:
            raise ValueError("invalid RANSAC settings")
        if self.min_inliers < 3 or self.max_scale <= 1.0:
            raise ValueError("min_inliers must be >= 3 and max_scale > 1")
        if len(self.fallback_angles) < 1:
            raise ValueError("fallback_angles needs at least one angle")
        return self


def response_map(fm):
    """Per-pixel L2 norm of per-channel standardised features."""
    f = np.asarray(fm, dtype=np.float64)
    if f.ndim == 2:
        f = f[:, :, None]
    mu = f.mean(axis=(0, 1), keepdims=True)
    sd = f.std(axis=(0, 1), keepdims=True)
    z = np.where(sd > 0, (f - mu) / np.where(sd > 0, sd, 1.0), 0.0)
    return np.sqrt((z * z).sum(axis=2))


def _subpixel(resp, x, y):
    """Stationary point of a least-squares quadratic on the 3x3 neighbourhood."""
    patch = resp[y - 1:y + 2, x - 1:x + 2].ravel()
    # f = c0 + c1 u + c2 v + c3 u^2 + c4 uv + c5 v^2 over u, v in {-1, 0, 1}
    coef = _QUAD_PINV @ patch
    hxx, hxy, hyy = 2 * coef[3], coef[4], 2 * coef[5]
    det = hxx * hyy - hxy * hxy
    if det <= 0 or hxx >= 0:
        return 0.0, 0.0
    dx = -(hyy * coef[1] - hxy * coef[2]) / det
    dy = -(hxx * coef[2] - hxy * coef[1]) / det
    return float(np.clip(dx, -0.5, 0.5)), float(np.clip(dy, -0.5, 0.5))


def _quad_design():
    rows = []
    for v in (-1, 0, 1):
        for u in (-1, 0, 1):
            rows.append([1, u, v, u * u, u * v, v * v])
    return np.linalg.pinv(np.array(rows, dtype=np.float64))


_QUAD_PINV = _quad_design()


def detect_keypoints(fm, max_kp=600, nms_radius=3, min_response=1e-6):
    """Greedy radius NMS over local maxima of the response map, strongest first."""
    resp = response_map(fm)
    h, w = resp.shape
    if h < 3 or w < 3:
        return []
    size = 2 * nms_radius + 1
    peaks = resp >= maximum_filter(resp, size=size, mode="nearest")
    # a flat window is not a peak
    peaks &= resp > minimum_filter(resp, size=size, mode="nearest")
    peaks &= resp > min_response
    peaks[0, :] = peaks[-1, :] = False
    peaks[:, 0] = peaks[:, -1] = False
    ys, xs = np.nonzero(peaks)
    vals = resp[ys, xs]
    order = np.lexsort((ys * w + xs, -vals))
    kept = []
    r2 = nms_radius * nms_radius
    for i in order:
        x, y = int(xs[i]), int(ys[i])
        if any((x - kx) ** 2 + (y - ky) ** 2 <= r2 for kx, ky in kept):
            continue
        kept.append((x, y))
        if len(kept) >= max_kp:
            break
    out = []
    for x, y in kept:
        dx, dy = _subpixel(resp, x, y)
        out.append(Keypoint(x + dx, y + dy, float(resp[y, x])))
    return out


def _offsets(patch):
    return np.arange(patch, dtype=np.float64) - (patch - 1) / 2.0


def fits_descriptor(fm, kp, patch):
    h, w = fm.shape[:2]
    r = (patch - 1) / 2.0
    return r <= kp.x <= w - 1 - r and r <= kp.y <= h - 1 - r


def describe_all(fm, kps, patch=8):
    """Bilinear patch x patch block, 2x2 average-pooled and L2-normalised; (K, D)."""
    f = np.asarray(fm, dtype=np.float64)
    if f.ndim == 2:
        f = f[:, :, None]
    for kp in kps:
        if not fits_descriptor(f, kp, patch):
            raise BorderKeypointError(f"border keypoint at ({kp.x:.2f}, {kp.y:.2f})")
    if not kps:
        return np.zeros((0, (patch // 2) ** 2 * f.shape[2]))
    o = _offsets(patch)
    ox, oy = np.meshgrid(o, o)
    kx = np.array([k.x for k in kps])[:, None, None]
    ky = np.array([k.y for k in kps])[:, None, None]
    sx = (kx + ox).reshape(len(kps), -1)
    sy = (ky + oy).reshape(len(kps), -1)
    block = warp_bilinear(np.ascontiguousarray(f), sx, sy)  # (K, patch*patch, C)
    c = f.shape[2]
    block = block.reshape(len(kps), patch // 2, 2, patch // 2, 2, c).mean(axis=(2, 4))
    vec = block.reshape(len(kps), -1)
    norm = np.linalg.norm(vec, axis=1, keepdims=True)
    return vec / np.where(norm > 0, norm, 1.0)


def describe(fm, kp, patch=8):
    return describe_all(fm, [kp], patch)[0]


def match(desc_a, desc_b, ratio=0.9):
    """Mutual nearest neighbours passing the ratio test in both directions.

    The two-sided ratio test keeps ``match(a, b)`` and ``match(b, a)`` mirror
    images of each other.
    """
    a = np.asarray(desc_a, dtype=np.float64)
    b = np.asarray(desc_b, dtype=np.float64)
    if len(a) == 0 or len(b) == 0:
        return []
    d = cdist(a, b)
    nn_ab = np.argmin(d, axis=1)
    nn_ba = np.argmin(d, axis=0)

    def second(dm, nn):
        if dm.shape[1] < 2:
            return np.full(dm.shape[0], np.inf)
        s = dm.copy()
        s[np.arange(len(nn)), nn] = np.inf
        return s.min(axis=1)

    d2_a = second(d, nn_ab)
    d2_b = second(d.T, nn_ba)
    out = []
    for i, j in enumerate(nn_ab):
        if nn_ba[j] != i:
            continue
        d1 = d[i, j]
        if d1 < ratio * d2_a[i] and d1 < ratio * d2_b[j]:
            out.append(Match(int(i), int(j), float(d1)))
    return out


@dataclass
class RansacResult:
    t: object
    inliers: list = field(default_factory=list)


def _exact_affines(src, dst):
    """Batched exact affines from (B, 3, 2) point triples; returns (B, 2, 3) and det."""
    ones = np.ones(src.shape[:2] + (1,))
    a = np.concatenate([src, ones], axis=2)  # (B, 3, 3)
    det = np.linalg.det(a)
    ok = np.abs(det) > 1e-9
    sol = np.zeros((len(src), 3, 2))
    if ok.any():
        sol[ok] = np.linalg.solve(a[ok], dst[ok])
    return sol.transpose(0, 2, 1), ok


def ransac_affine(matches, kps_a, kps_b, iters=2000, inlier_px=3.0, seed=0):
    """Affine mapping side-a keypoints onto their matched side-b keypoints.

    Hypotheses are drawn up front from ``seed``, so results do not depend on
    evaluation order. The winner is refit by least squares over its inliers.
    """
    if len(matches) < 3:
        raise InsufficientMatchesError("insufficient matches")
    src = np.array([[kps_a[m.index_a].x, kps_a[m.index_a].y] for m in matches])
    dst = np.array([[kps_b[m.index_b].x, kps_b[m.index_b].y] for m in matches])
    n = len(matches)
    rng = np.random.default_rng(seed)
    picks = np.argsort(rng.random((iters, n)), axis=1)[:, :3]
    models, ok = _exact_affines(src[picks], dst[picks])
    if not ok.any():
        raise DegenerateConfigurationError("degenerate configuration: all samples collinear")
    pred = np.einsum("bij,nj->bni", models[:, :, :2], src) + models[:, None, :, 2]
    err = np.linalg.norm(pred - dst[None], axis=2)
    counts = np.where(ok, (err < inlier_px).sum(axis=1), -1)
    best = int(np.argmax(counts))
    inl = np.nonzero(err[best] < inlier_px)[0]
    sd = SparseDisplacements(src[inl, 0], src[inl, 1], dst[inl, 0] - src[inl, 0],
                             dst[inl, 1] - src[inl, 1], np.ones(len(inl)))
    try:
        t = fit_affine_lsq(sd)
    except RegistrationError:
        t = AffineTransform2D(models[best])
    return RansacResult(t, [int(i) for i in inl])


@dataclass
class PrealignResult:
    transform: object
    keypoints_fixed: list
    keypoints_moving: list
    matches: list
    inliers: list


def _level_keypoints(kps, level):
    if level == 0:
        return list(kps)
    out = []
    for k in kps:
        x, y = level_to_full([k.x, k.y], level)
        out.append(Keypoint(float(x), float(y), k.response))
    return out


def prealign_details(img_fixed, img_moving, enc, cfg=None):
    """Run detection/description/matching/RANSAC; the transform maps moving -> fixed."""
    cfg = (cfg or PrealignConfig()).validate()
    enc_f, enc_m = split_encoders(enc)
    ff = encode(enc_f, img_fixed)
    fm = encode(enc_m, img_moving)
    ff_l = build_pyramid(ff, cfg.level + 1)[-1]
    fm_l = build_pyramid(fm, cfg.level + 1)[-1]

    def keypoints(f):
        kps = detect_keypoints(f, cfg.max_kp * 2, cfg.nms_radius)
        kps = [k for k in kps if fits_descriptor(f, k, cfg.patch)]
        return kps[:cfg.max_kp]

    kf = keypoints(ff_l)
    km = keypoints(fm_l)
    if len(kf) < 3 or len(km) < 3:
        raise InsufficientMatchesError("insufficient matches: too few keypoints")
    ms = match(describe_all(fm_l, km, cfg.patch), describe_all(ff_l, kf, cfg.patch), cfg.ratio)
    km_full = _level_keypoints(km, cfg.level)
    kf_full = _level_keypoints(kf, cfg.level)
    res = ransac_affine(ms, km_full, kf_full, cfg.ransac_iters, cfg.inlier_px, cfg.seed)
    log.debug("prealign: %d/%d keypoints, %d matches, %d inliers",
              len(kf), len(km), len(ms), len(res.inliers))
    if len(res.inliers) < cfg.min_inliers:
        raise InsufficientMatchesError(
            f"insufficient matches: {len(res.inliers)} RANSAC inliers, need {cfg.min_inliers}")
    sv = np.linalg.svd(res.t.linear, compute_uv=False)
    if res.t.det <= 0 or sv[0] > cfg.max_scale or sv[-1] < 1.0 / cfg.max_scale:
        raise DegenerateConfigurationError(
            f"degenerate configuration: implausible affine (singular values {sv[0]:.3g}, {sv[-1]:.3g})")
    return PrealignResult(res.t, kf_full, km_full, ms, res.inliers)


def prealign(img_fixed, img_moving, enc, cfg=None):
    return prealign_details(img_fixed, img_moving, enc, cfg).transform
