import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from shgreg.core import AffineTransform2D, compose, invert, warp_affine
from shgreg.instopt import (CostVolume, InstOptConfig, NoForegroundError, RankDeficientFitError,
                            RefineObjective, SparseDisplacements, _diffusion, adam_refine,
                            affine_field, build_cost_volume, candidate_order, convex_assign,
                            fit_affine_lsq, gaussian_kernel1d, gaussian_smooth,
                            instance_optimize, level_affine_to_full, robust_affine,
                            sample_sparse)
from shgreg.similarity import FidelityConfig


def cost_volume_oracle(f, m, r, pr):
    h, w, c = f.shape
    k = 2 * pr + 1

    def at(img, y, x, ch):
        return img[y, x, ch] if 0 <= y < h and 0 <= x < w else 0.0

    out = np.empty((h, w, 2 * r + 1, 2 * r + 1))
    for y in range(h):
        for x in range(w):
            for dy in range(-r, r + 1):
                for dx in range(-r, r + 1):
                    acc = 0.0
                    for v in range(-pr, pr + 1):
                        for u in range(-pr, pr + 1):
                            for ch in range(c):
                                d = at(f, y + v, x + u, ch) - at(m, y + v + dy, x + u + dx, ch)
                                acc += d * d
                    out[y, x, dy + r, dx + r] = acc / (k * k * c)
    return out


def argmin_oracle(costs, r):
    h, w = costs.shape[:2]
    out = np.zeros((h, w, 2))
    for y in range(h):
        for x in range(w):
            best = None
            for dy in range(-r, r + 1):
                for dx in range(-r, r + 1):
                    key = (costs[y, x, dy + r, dx + r], dx * dx + dy * dy, dy, dx)
                    if best is None or key < best:
                        best = key
            out[y, x] = (best[3], best[2])
    return out


@pytest.mark.parametrize("pr", [0, 1])
def test_cost_volume_equals_brute_force(rng, pr):
    f, m = rng.random((12, 12, 2)), rng.random((12, 12, 2))
    cv = build_cost_volume(f, m, 2, pr)
    np.testing.assert_array_equal(cv.costs, cost_volume_oracle(f, m, 2, pr))


def test_argmin_equals_brute_force_with_ties(rng):
    # quantised costs force many ties through the tie-break rule
    costs = rng.integers(0, 3, (12, 12, 5, 5)).astype(float)
    np.testing.assert_array_equal(convex_assign(CostVolume(costs, 2)), argmin_oracle(costs, 2))


def test_candidate_order_starts_at_zero():
    order = candidate_order(1)
    assert order[0] == (0, 0) and order[1:5] == [(-1, 0), (0, -1), (0, 1), (1, 0)]


def test_assignment_recovers_integer_shift(rng):
    f = rng.random((16, 16, 3))
    m = np.roll(f, shift=(1, -2), axis=(0, 1))  # m(p + (dx=-2, dy=1)) = f(p)
    d = convex_assign(build_cost_volume(f, m, 3, 1))
    np.testing.assert_array_equal(d[4:-4, 4:-4, 0], -2)
    np.testing.assert_array_equal(d[4:-4, 4:-4, 1], 1)


def test_zero_displacement_has_zero_cost_on_identical_maps(rng):
    f = rng.random((6, 6, 2))
    cv = build_cost_volume(f, f, 1, 1)
    np.testing.assert_array_equal(cv.costs[:, :, 1, 1], 0.0)


def test_cost_volume_errors():
    with pytest.raises(ValueError, match="mismatch"):
        build_cost_volume(np.zeros((4, 4, 1)), np.zeros((4, 5, 1)), 1)
    with pytest.raises(ValueError):
        build_cost_volume(np.zeros((4, 4, 1)), np.zeros((4, 4, 1)), 0)


def test_gaussian_kernel_and_smoothing(rng):
    k = gaussian_kernel1d(2.0)
    assert len(k) == 13 and k.sum() == pytest.approx(1.0) and np.allclose(k, k[::-1])
    const = np.full((10, 11, 2), 3.25)
    np.testing.assert_allclose(gaussian_smooth(const, 2.0), const)
    df = rng.random((9, 9, 2))
    out = gaussian_smooth(df, 1.0)
    # direct separable sum with replicated edges
    kk = gaussian_kernel1d(1.0)
    rad = len(kk) // 2
    pad = np.pad(df, ((rad, rad), (rad, rad), (0, 0)), mode="edge")
    y, x = 4, 0
    expect = sum(kk[i] * kk[j] * pad[y + i, x + j] for i in range(len(kk)) for j in range(len(kk)))
    np.testing.assert_allclose(out[y, x], expect, rtol=1e-12)
    with pytest.raises(ValueError):
        gaussian_smooth(df, 0.0)


def test_diffusion_gradient(rng):
    df = rng.normal(size=(5, 6, 2))
    _, g = _diffusion(df)
    h = 1e-6
    for idx in [(0, 0, 0), (2, 3, 1), (4, 5, 0)]:
        p, q = df.copy(), df.copy()
        p[idx] += h
        q[idx] -= h
        assert g[idx] == pytest.approx((_diffusion(p)[0] - _diffusion(q)[0]) / (2 * h), rel=1e-6)


@pytest.mark.parametrize("weights", [(1.0, 0.0), (0.0, 1.0), (1.0, 0.1)])
def test_refine_objective_gradient(rng, weights):
    ff = rng.random((14, 15, 2))
    ys, xs = np.mgrid[0:14, 0:15]
    img_f = 0.5 + 0.4 * np.sin(xs / 2.0) * np.cos(ys / 3.0)
    img_m = 0.5 + 0.4 * np.sin(xs / 2.1 + 0.3) * np.cos(ys / 3.0)
    fm = ff + 0.3 * rng.random((14, 15, 2))
    cfg = InstOptConfig(fidelity=FidelityConfig(lncc_window=5, lncc_weight=weights[0],
                                                cmif_weight=weights[1], k_levels=4))
    obj = RefineObjective(ff, fm, img_f, img_m, cfg)
    df = rng.uniform(-0.8, 0.8, (14, 15, 2)) + 0.013  # keep samples off the integer grid
    _, g = obj(df)
    h = 1e-6
    for _ in range(12):
        idx = (rng.integers(2, 12), rng.integers(2, 13), rng.integers(2))
        p, q = df.copy(), df.copy()
        p[idx] += h
        q[idx] -= h
        fd = (obj(p)[0] - obj(q)[0]) / (2 * h)
        assert g[idx] == pytest.approx(fd, rel=1e-4, abs=1e-8)


def test_adam_refine_zero_iterations_is_identity(rng):
    df = rng.random((6, 6, 2))
    out = adam_refine(rng.random((6, 6, 1)), rng.random((6, 6, 1)), rng.random((6, 6)),
                      rng.random((6, 6)), df, InstOptConfig(adam_iters=0))
    assert out is df


def test_adam_refine_lowers_objective(rng):
    ys, xs = np.mgrid[0:24, 0:24].astype(float)
    base = np.sin(xs / 3.0) + np.cos(ys / 4.0)
    moved = np.sin((xs + 0.6) / 3.0) + np.cos(ys / 4.0)
    history = []
    cfg = InstOptConfig(adam_iters=20, fidelity=FidelityConfig(cmif_weight=0.0, lncc_window=5))
    adam_refine(base, moved, base, moved, np.zeros((24, 24, 2)), cfg, history)
    assert len(history) == 21 and history[-1] < history[0]


# ---------------------------------------------------------------- affine extraction

def _displacements(t, pts, weights=None):
    moved = t.apply(pts)
    w = np.ones(len(pts)) if weights is None else weights
    return SparseDisplacements(pts[:, 0], pts[:, 1], moved[:, 0] - pts[:, 0],
                               moved[:, 1] - pts[:, 1], w)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000))
def test_fit_affine_exact_recovery(seed):
    g = np.random.default_rng(seed)
    t = AffineTransform2D(np.column_stack([np.eye(2) + g.uniform(-0.3, 0.3, (2, 2)),
                                           g.uniform(-20, 20, 2)]))
    pts = g.uniform(0, 256, (50, 2))
    fit = fit_affine_lsq(_displacements(t, pts, g.uniform(0.1, 1.0, 50)))
    assert np.abs(fit.matrix - t.matrix).max() < 1e-9


def test_fit_affine_rank_deficient():
    with pytest.raises(RankDeficientFitError):
        fit_affine_lsq(_displacements(AffineTransform2D.identity(), np.zeros((2, 2))))
    line = np.column_stack([np.arange(10.0), 2 * np.arange(10.0)])
    with pytest.raises(RankDeficientFitError, match="collinear"):
        fit_affine_lsq(_displacements(AffineTransform2D.identity(), line))


def test_fit_affine_weights_matter(rng):
    pts = rng.uniform(0, 50, (40, 2))
    good = AffineTransform2D.translation(2.0, -1.0)
    sd = _displacements(good, pts)
    sd.dx[:5] += 30.0
    sd.weight[:5] = 1e-9
    assert fit_affine_lsq(sd).allclose(good, atol=1e-6)


def test_robust_fit_ignores_gross_outliers(rng):
    pts = rng.uniform(0, 100, (200, 2))
    t = AffineTransform2D([[1.02, 0.05, 3.0], [-0.04, 0.98, -2.0]])
    sd = _displacements(t, pts)
    sd.dx[:20] += rng.uniform(10, 20, 20)
    plain = fit_affine_lsq(sd)
    robust = robust_affine(sd, iters=20)
    err = lambda a: np.abs(a.apply(pts) - t.apply(pts)).max()
    assert err(robust) < 0.25 * err(plain)


def test_sample_sparse_threshold_and_fallback():
    df = np.zeros((10, 10, 2))
    df[..., 0] = np.arange(10)[None, :]
    shg = np.zeros((10, 10))
    shg[2, 3] = 0.9
    shg[5, 7] = 0.04
    shg[8, 1] = 0.5
    sd = sample_sparse(df, shg, threshold=0.05, min_samples=2)
    assert len(sd) == 2 and set(sd.dx) == {3.0, 1.0}
    sd = sample_sparse(df, shg, threshold=0.05, min_samples=3)
    assert len(sd) == 3 and sorted(sd.weight) == [0.04, 0.5, 0.9]
    with pytest.raises(NoForegroundError, match="no foreground"):
        sample_sparse(df, np.zeros((10, 10)))
    with pytest.raises(ValueError):
        sample_sparse(df, np.ones((5, 5)))


def test_level_affine_to_full_commutes_with_level_coordinates():
    t = AffineTransform2D([[1.05, 0.1, 1.5], [-0.08, 0.95, -0.5]])
    full = level_affine_to_full(t, 2)
    u = np.array([[3.0, 4.0], [10.0, 1.0]])
    to_full = lambda p: 4.0 * p + 1.5
    np.testing.assert_allclose(full.apply(to_full(u)), to_full(t.apply(u)), atol=1e-12)


def test_affine_field_round_trips_through_fit():
    t = AffineTransform2D([[1.01, -0.02, 0.7], [0.03, 0.99, -1.2]])
    df = affine_field(t, (20, 24))
    sd = sample_sparse(df, np.ones((20, 24)), 0.5, 3)
    assert fit_affine_lsq(sd).allclose(t, atol=1e-9)


def test_config_validation():
    with pytest.raises(ValueError):
        InstOptConfig(levels=0).validate()
    with pytest.raises(ValueError):
        InstOptConfig(discrete_passes=0).validate()
    with pytest.raises(ValueError):
        InstOptConfig(intensity_threshold=1.5).validate()


# ---------------------------------------------------------------- driver

def test_identical_images_stay_near_identity(untrained_encoder):
    from shgreg.synth import SynthConfig, generate_pair

    img = generate_pair(SynthConfig(seed=11, size=(64, 64))).fixed
    cfg = InstOptConfig(levels=3, adam_iters=5)
    t = instance_optimize(img, img, untrained_encoder, AffineTransform2D.identity(), cfg)
    grid = np.array([[x, y] for x in range(0, 64, 8) for y in range(0, 64, 8)], float)
    assert np.linalg.norm(t.apply(grid) - grid, axis=1).mean() < 0.5


def test_initial_transform_is_composed(untrained_encoder):
    from shgreg.synth import SynthConfig, generate_pair

    img = generate_pair(SynthConfig(seed=12, size=(64, 64))).fixed
    t0 = AffineTransform2D.translation(3.0, -2.0)
    moving = warp_affine(img, invert(t0))
    cfg = InstOptConfig(levels=3, adam_iters=5)
    # the initial guess is already exact, so the result should stay there
    t = instance_optimize(img, moving, untrained_encoder, t0, cfg)
    assert np.abs(t.apply([[32.0, 32.0]]) - t0.apply([[32.0, 32.0]])).max() < 0.5


def test_planted_shift_plus_two_in_x(rng):
    f = rng.random((14, 14, 2))
    m = np.zeros_like(f)
    m[:, 2:] = f[:, :-2]  # m(x + 2, y) = f(x, y)
    cv = build_cost_volume(f, m, 3, 1)
    d = convex_assign(cv)
    np.testing.assert_array_equal(d[4:-4, 4:-4], np.broadcast_to([2.0, 0.0], (6, 6, 2)))


def test_spike_smoothing_centre_value():
    df = np.zeros((15, 15, 2))
    df[7, 7] = (1.0, -2.0)
    k = gaussian_kernel1d(1.0)
    centre = k[len(k) // 2] ** 2
    np.testing.assert_allclose(gaussian_smooth(df, 1.0)[7, 7], [centre, -2.0 * centre], rtol=1e-12)


def test_ramp_field_preserved_in_interior():
    ys, xs = np.mgrid[0:30, 0:30].astype(float)
    df = np.stack([0.1 * xs - 0.05 * ys, 0.02 * ys + 1.0], axis=-1)
    out = gaussian_smooth(df, 2.0)
    np.testing.assert_allclose(out[6:-6, 6:-6], df[6:-6, 6:-6], atol=1e-9)


def test_sample_sparse_binary_mask_and_order_statistics():
    df = np.zeros((10, 10, 2))
    mask = np.zeros((10, 10))
    mask[2:4, 5:9] = 1.0
    sd = sample_sparse(df, mask, 0.5, 3)
    assert len(sd) == 8 and np.all(sd.weight == 1.0)
    ramp = np.linspace(0.0, 1.0, 100).reshape(10, 10)
    assert (ramp > 0.9).sum() == 10
    sd = sample_sparse(df, ramp, 0.9, 50)
    assert len(sd) == 50 and sd.weight.min() == pytest.approx(np.sort(ramp.ravel())[-50])


def test_zero_displacements_fit_identity(rng):
    pts = rng.uniform(0, 30, (10, 2))
    sd = _displacements(AffineTransform2D.identity(), pts)
    assert fit_affine_lsq(sd).allclose(AffineTransform2D.identity(), atol=1e-12)


def test_noisy_fit_matches_design_matrix_oracle(rng):
    t = AffineTransform2D([[1.03, -0.07, 4.0], [0.05, 0.96, -6.0]])
    pts = rng.uniform(0, 256, (500, 2))
    sd = _displacements(t, pts, rng.uniform(0.2, 1.0, 500))
    sd.dx += rng.normal(0, 0.1, 500)
    sd.dy += rng.normal(0, 0.1, 500)
    fit = fit_affine_lsq(sd)
    assert np.abs(fit.linear - t.linear).max() < 5e-3
    assert np.abs(fit.offset - t.offset).max() < 0.05
    # independent weighted solve on the uncentred full design matrix
    sw = np.sqrt(sd.weight)[:, None]
    design = np.column_stack([sd.x, sd.y, np.ones(500)])
    target = np.column_stack([sd.x + sd.dx, sd.y + sd.dy])
    sol, *_ = np.linalg.lstsq(design * sw, target * sw, rcond=None)
    resid = lambda m: np.sum(sd.weight[:, None] * (design @ m - target) ** 2)
    assert abs(resid(fit.matrix.T) - resid(sol)) < 1e-8 * max(resid(sol), 1.0)
    np.testing.assert_allclose(fit.matrix, sol.T, atol=1e-8)


def test_refinement_never_increases_loss_on_synthetic_pairs():
    from shgreg.contrastive import TinyEncoder, encode, normalize_features
    from shgreg.synth import SynthConfig, generate_pair

    enc = TinyEncoder.init(seed=0)
    cfg = InstOptConfig(adam_iters=10)
    for seed in range(3):
        p = generate_pair(SynthConfig(seed=seed, size=(48, 48)))
        mw = warp_affine(p.moving, p.truth)
        ff = normalize_features(encode(enc, p.fixed))
        fm = normalize_features(encode(enc, mw))
        history = []
        adam_refine(ff, fm, p.fixed, mw, np.zeros((48, 48, 2)), cfg, history)
        assert history[-1] <= history[0]


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.5, 4.0))
def test_smoothing_never_increases_max_norm(seed, sigma):
    df = np.random.default_rng(seed).normal(size=(15, 12, 2)) * 3
    norm = lambda f: np.sqrt((f ** 2).sum(-1)).max()
    assert norm(gaussian_smooth(df, sigma)) <= norm(df) + 1e-12


def test_fit_is_locally_optimal(rng):
    pts = rng.uniform(0, 100, (80, 2))
    sd = SparseDisplacements(pts[:, 0], pts[:, 1], rng.normal(size=80) + 1.0,
                             rng.normal(size=80) - 2.0, rng.uniform(0.2, 1.0, 80))

    def residual(t):
        moved = t.apply(pts)
        err = moved - pts - np.column_stack([sd.dx, sd.dy])
        return float((sd.weight * (err ** 2).sum(1)).sum())

    best = fit_affine_lsq(sd)
    base = residual(best)
    for _ in range(100):
        cand = AffineTransform2D(best.matrix + rng.normal(scale=1e-3, size=(2, 3)))
        assert base <= residual(cand)
