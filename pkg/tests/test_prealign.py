import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from shgreg.core import AffineTransform2D, tre, warp_affine, warp_landmarks
from shgreg.prealign import (BorderKeypointError, DegenerateConfigurationError,
                             InsufficientMatchesError, Keypoint, Match, PrealignConfig,
                             describe, describe_all, detect_keypoints, match, ransac_affine,
                             response_map)
from shgreg.synth import grid_landmarks

from conftest import naive_bilinear


def _peaks(shape, points, sigma=1.0):
    ys, xs = np.mgrid[0:shape[0], 0:shape[1]].astype(float)
    f = np.zeros(shape)
    for x, y in points:
        f += np.exp(-((xs - x) ** 2 + (ys - y) ** 2) / (2 * sigma ** 2))
    return f[..., None]


def test_constant_map_has_no_keypoints():
    assert detect_keypoints(np.ones((20, 20, 3))) == []


def test_single_peak_found():
    kps = detect_keypoints(_peaks((20, 20), [(5, 7)]), max_kp=5, nms_radius=2)
    assert len(kps) >= 1
    assert abs(kps[0].x - 5) <= 0.5 and abs(kps[0].y - 7) <= 0.5


def test_subpixel_peak_location():
    kps = detect_keypoints(_peaks((20, 20), [(8.3, 10.6)], sigma=1.5), max_kp=1)
    assert abs(kps[0].x - 8.3) < 0.15 and abs(kps[0].y - 10.6) < 0.15


def test_nms_suppresses_close_equal_peaks():
    kps = detect_keypoints(_peaks((30, 30), [(10, 12), (13, 12)], sigma=0.7), 10, nms_radius=5)
    near = [k for k in kps if 8 <= k.x <= 15 and 10 <= k.y <= 14]
    assert len(near) == 1


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 10_000))
def test_keypoints_spaced_sorted_and_bounded(seed):
    g = np.random.default_rng(seed)
    fm = g.random((24, 26, 3))
    kps = detect_keypoints(fm, max_kp=15, nms_radius=3)
    assert len(kps) <= 15
    resp = [k.response for k in kps]
    assert resp == sorted(resp, reverse=True)
    for i, a in enumerate(kps):
        assert 0 <= a.x <= 25 and 0 <= a.y <= 23
        for b in kps[i + 1:]:
            # integer peaks are > nms_radius apart; sub-pixel shifts are <= 0.5 each
            assert np.hypot(a.x - b.x, a.y - b.y) > 3 - 1


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 10_000), st.floats(-5, 5))
def test_keypoints_invariant_to_channel_offset(seed, c):
    fm = np.random.default_rng(seed).random((20, 20, 2))
    a = detect_keypoints(fm, 20, 2)
    b = detect_keypoints(fm + c, 20, 2)
    assert len(a) == len(b)
    for p, q in zip(a, b):
        assert abs(p.x - q.x) < 1e-9 and abs(p.y - q.y) < 1e-9


def test_response_map_standardises(rng):
    fm = rng.random((6, 6, 2))
    np.testing.assert_allclose(response_map(fm * 3 + 1), response_map(fm), atol=1e-12)


# ---------------------------------------------------------------- descriptors

def test_descriptor_constant_map():
    d = describe(np.ones((20, 20, 4)), Keypoint(10.0, 10.0, 1.0), patch=8)
    assert d.shape == (64,)
    np.testing.assert_allclose(d, 1.0 / 8.0)


def test_descriptor_translation_of_content(rng):
    base = rng.random((12, 12, 2))
    fm = np.zeros((30, 40, 2))
    fm[2:14, 3:15] = base
    fm[15:27, 20:32] = base
    a = describe(fm, Keypoint(8.5, 7.5, 1.0))
    b = describe(fm, Keypoint(25.5, 20.5, 1.0))
    np.testing.assert_allclose(a, b, atol=1e-9)


def test_descriptor_matches_sampling_oracle(rng):
    fm = rng.random((20, 20, 2))
    kp = Keypoint(9.3, 8.7, 1.0)
    patch = 4
    offs = np.arange(patch) - (patch - 1) / 2.0
    block = np.array([[[naive_bilinear(fm[..., c], kp.x + ox, kp.y + oy) for c in range(2)]
                       for ox in offs] for oy in offs])
    pooled = block.reshape(2, 2, 2, 2, 2).mean(axis=(1, 3)).ravel()
    np.testing.assert_allclose(describe(fm, kp, patch), pooled / np.linalg.norm(pooled),
                               atol=1e-12)


def test_border_keypoint_rejected():
    with pytest.raises(BorderKeypointError, match="border keypoint"):
        describe(np.ones((20, 20, 1)), Keypoint(2.0, 10.0, 1.0), patch=8)
    assert describe_all(np.ones((20, 20, 3)), [], 8).shape == (0, 48)


# ---------------------------------------------------------------- matching

def brute_force_matches(a, b, ratio):
    out = []
    for i in range(len(a)):
        d = [np.linalg.norm(a[i] - b[j]) for j in range(len(b))]
        j = int(np.argmin(d))
        back = [np.linalg.norm(a[k] - b[j]) for k in range(len(a))]
        if int(np.argmin(back)) != i:
            continue
        second_a = min([d[k] for k in range(len(b)) if k != j], default=np.inf)
        second_b = min([back[k] for k in range(len(a)) if k != i], default=np.inf)
        if d[j] < ratio * second_a and d[j] < ratio * second_b:
            out.append((i, j))
    return out


def test_identity_matching():
    d = np.eye(5)
    assert [(m.index_a, m.index_b) for m in match(d, d, 1.0)] == [(i, i) for i in range(5)]


def test_swapped_basis_vectors():
    e = np.eye(2)
    assert [(m.index_a, m.index_b) for m in match(e, e[::-1], 0.9)] == [(0, 1), (1, 0)]
    assert match(e, np.zeros((0, 2))) == []


def test_planted_clusters_match_oracle(rng):
    centres = rng.normal(size=(6, 16))
    a = centres + 0.01 * rng.normal(size=centres.shape)
    perm = rng.permutation(6)
    b = centres[perm] + 0.01 * rng.normal(size=centres.shape)
    got = [(m.index_a, m.index_b) for m in match(a, b, 0.8)]
    assert got == brute_force_matches(a, b, 0.8)
    assert sorted(got) == sorted((int(perm[j]), j) for j in range(6))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.5, 1.0))
def test_matching_symmetric(seed, ratio):
    g = np.random.default_rng(seed)
    a, b = g.normal(size=(9, 4)), g.normal(size=(7, 4))
    ab = {(m.index_a, m.index_b) for m in match(a, b, ratio)}
    ba = {(m.index_b, m.index_a) for m in match(b, a, ratio)}
    assert ab == ba == set(brute_force_matches(a, b, ratio))


# ---------------------------------------------------------------- RANSAC

def _keypoints(pts):
    return [Keypoint(float(x), float(y), 1.0) for x, y in pts]


def _planted(g, t, n=30, outlier_frac=0.0):
    src = g.uniform(0, 200, (n, 2))
    dst = t.apply(src)
    n_out = int(round(outlier_frac * n))
    dst[:n_out] = g.uniform(0, 200, (n_out, 2))
    matches = [Match(i, i, 0.0) for i in range(n)]
    return matches, _keypoints(src), _keypoints(dst), n_out


T_STAR = AffineTransform2D([[0.97, -0.2, 12.0], [0.18, 1.04, -7.0]])


def test_ransac_noise_free_recovery(rng):
    matches, ka, kb, _ = _planted(rng, T_STAR)
    res = ransac_affine(matches, ka, kb)
    assert np.abs(res.t.matrix - T_STAR.matrix).max() < 1e-9
    assert res.inliers == list(range(30))


def test_ransac_planted_outliers():
    ok = 0
    for seed in range(20):
        g = np.random.default_rng(seed)
        matches, ka, kb, _ = _planted(g, T_STAR, 30, 0.4)
        res = ransac_affine(matches, ka, kb, iters=1000, inlier_px=2.0, seed=seed)
        ok += (np.abs(res.t.linear - T_STAR.linear).max() < 1e-3
               and np.abs(res.t.offset - T_STAR.offset).max() < 0.1)
    assert ok >= 19


def test_ransac_deterministic(rng):
    matches, ka, kb, _ = _planted(rng, T_STAR, 25, 0.3)
    a = ransac_affine(matches, ka, kb, seed=4)
    b = ransac_affine(matches, ka, kb, seed=4)
    assert np.array_equal(a.t.matrix, b.t.matrix) and a.inliers == b.inliers


def test_ransac_errors():
    kps = _keypoints([[0, 0], [1, 1], [2, 2]])
    with pytest.raises(InsufficientMatchesError, match="insufficient matches"):
        ransac_affine([Match(0, 0, 0.0)], kps, kps)
    with pytest.raises(DegenerateConfigurationError, match="degenerate configuration"):
        ransac_affine([Match(i, i, 0.0) for i in range(3)], kps, kps)


def test_prealign_config_validation():
    with pytest.raises(ValueError):
        PrealignConfig(patch=7).validate()
    with pytest.raises(ValueError):
        PrealignConfig(ratio=0.0).validate()
    with pytest.raises(ValueError):
        PrealignConfig(fallback_angles=()).validate()
