"""Similarity metrics: windowed LNCC, K-means level-set mutual information (CMIF)
and the combined fidelity score.

Entropies are in nats.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class DegenerateClusteringError(ValueError):
    pass


@dataclass
class FidelityConfig:
    lncc_window: int = 9
    lncc_weight: float = 1.0
    cmif_weight: float = 0.1
    k_levels: int = 8
    epsilon: float = 1e-5
    seed: int = 42

    def validate(self):
        if self.lncc_window < 1 or self.lncc_window % 2 == 0:
            raise ValueError("lncc_window must be an odd positive integer")
        if self.lncc_weight < 0 or self.cmif_weight < 0:
            raise ValueError("fidelity weights must be >= 0")
        if self.lncc_weight + self.cmif_weight <= 0:
            raise ValueError("lncc_weight and cmif_weight are both zero")
        if self.k_levels < 1:
            raise ValueError("k_levels must be positive")
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")
        return self


# ---------------------------------------------------------------- LNCC

def _box_valid(a, k):
    """Sums over every k x k window fully inside ``a``."""
    h, w = a.shape
    ii = np.zeros((h + 1, w + 1))
    ii[1:, 1:] = a.cumsum(0).cumsum(1)
    return ii[k:, k:] - ii[:-k, k:] - ii[k:, :-k] + ii[:-k, :-k]


def _box_valid_adjoint(m, k):
    """Adjoint of :func:`_box_valid`: spread window values back onto pixels."""
    pad = np.zeros((m.shape[0] + 2 * (k - 1), m.shape[1] + 2 * (k - 1)))
    pad[k - 1:k - 1 + m.shape[0], k - 1:k - 1 + m.shape[1]] = m
    return _box_valid(pad, k)


def _check_pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"dimension mismatch: {a.shape} vs {b.shape}")
    return a, b


def _lncc_stats(a, b, window):
    n = float(window * window)
    sa = _box_valid(a, window)
    sb = _box_valid(b, window)
    ma, mb = sa / n, sb / n
    va = np.maximum(_box_valid(a * a, window) / n - ma * ma, 0.0)
    vb = np.maximum(_box_valid(b * b, window) / n - mb * mb, 0.0)
    cov = _box_valid(a * b, window) / n - ma * mb
    return n, ma, mb, va, vb, cov


def lncc_map(a, b, window=9, epsilon=1e-5):
    """Pearson correlation of every fully-inside ``window`` x ``window`` patch pair.

    The denominator is ``max(sigma_a * sigma_b, epsilon)``.
    """
    a, b = _check_pair(a, b)
    if a.ndim != 2:
        raise ValueError("lncc expects single-channel images")
    if window % 2 == 0 or window < 1 or window > min(a.shape):
        raise ValueError(f"window {window} must be odd and <= {min(a.shape)}")
    _, _, _, va, vb, cov = _lncc_stats(a, b, window)
    return cov / np.maximum(np.sqrt(va * vb), epsilon)


def lncc(a, b, window=9, epsilon=1e-5):
    """Mean windowed correlation, clamped to [-1, 1]."""
    return float(np.clip(lncc_map(a, b, window, epsilon).mean(), -1.0, 1.0))


def lncc_value_and_grad(a, b, window=9, epsilon=1e-5):
    """Mean windowed correlation of ``a`` and ``b`` and its gradient w.r.t. ``b``."""
    n, ma, mb, va, vb, cov = _lncc_stats(a, b, window)
    raw = np.sqrt(va * vb)
    flat = raw <= epsilon
    den = np.where(flat, epsilon, raw)
    r = cov / den
    npos = r.size
    # d r / d b_i = alpha (a_i - mu_a) - beta (b_i - mu_b), per window
    alpha = 1.0 / (n * den)
    beta = np.where(flat, 0.0, cov / (n * np.where(vb > 0, vb, 1.0) * den))
    beta = np.where(vb > 0, beta, 0.0)
    alpha /= npos
    beta /= npos
    grad = (a * _box_valid_adjoint(alpha, window)
            - _box_valid_adjoint(alpha * ma, window)
            - b * _box_valid_adjoint(beta, window)
            + _box_valid_adjoint(beta * mb, window))
    return float(r.mean()), grad


def effective_window(window, shape):
    """Largest odd window <= ``window`` that fits in ``shape``."""
    m = min(shape[:2])
    w = min(window, m if m % 2 else m - 1)
    return max(w, 1)


# ---------------------------------------------------------------- level sets

@dataclass
class LevelSetLabeling:
    labels: np.ndarray
    centroids: np.ndarray
    k: int


def kmeans_levels(img, k=8, seed=42, max_iter=100):
    """1-D Lloyd clustering of intensities with k-means++ seeding.

    Centroids come back sorted ascending and labels index into them.
    """
    x = np.asarray(img, dtype=np.float64)
    if x.ndim == 3:
        if x.shape[2] != 1:
            raise ValueError("kmeans_levels expects a single-channel image")
        x = x[:, :, 0]
    if k < 2:
        raise ValueError("k must be >= 2")
    flat = x.ravel()
    if np.unique(flat).size < k:
        raise DegenerateClusteringError("degenerate clustering: fewer distinct intensities than k")

    rng = np.random.default_rng(seed)
    centers = [flat[rng.integers(flat.size)]]
    d2 = (flat - centers[0]) ** 2
    for _ in range(1, k):
        total = d2.sum()
        u = rng.random() * total
        idx = int(np.searchsorted(np.cumsum(d2), u, side="right"))
        idx = min(idx, flat.size - 1)
        while d2[idx] == 0.0:  # guard against landing on a zero-probability point
            idx = (idx + 1) % flat.size
        centers.append(flat[idx])
        d2 = np.minimum(d2, (flat - flat[idx]) ** 2)
    c = np.sort(np.array(centers))

    labels = None
    for _ in range(max_iter):
        mids = 0.5 * (c[1:] + c[:-1])
        new = np.searchsorted(mids, flat, side="left")
        if labels is not None and np.array_equal(new, labels):
            break
        labels = new
        counts = np.bincount(labels, minlength=k)
        sums = np.bincount(labels, weights=flat, minlength=k)
        c = np.where(counts > 0, sums / np.maximum(counts, 1), c)
        order = np.argsort(c, kind="stable")
        if np.any(order != np.arange(k)):
            c = c[order]
            labels = None
    mids = 0.5 * (c[1:] + c[:-1])
    labels = np.searchsorted(mids, flat, side="left")
    return LevelSetLabeling(labels.reshape(x.shape), c, k)


# ---------------------------------------------------------------- histograms / MI

@dataclass
class HistogramTable:
    joint: np.ndarray
    marginal_a: np.ndarray
    marginal_b: np.ndarray
    n_ab: int


def joint_histogram(la, lb):
    if la.labels.shape != lb.labels.shape:
        raise ValueError(f"dimension mismatch: {la.labels.shape} vs {lb.labels.shape}")
    ka, kb = la.k, lb.k
    idx = la.labels.ravel() * kb + lb.labels.ravel()
    n = idx.size
    joint = np.bincount(idx, minlength=ka * kb).reshape(ka, kb) / n
    return HistogramTable(joint, joint.sum(axis=1), joint.sum(axis=0), n)


def _entropy(p):
    p = p[p > 0]
    return float(-(p * np.log(p)).sum())


def entropies(la, lb):
    """Marginal and joint Shannon entropies (nats) of two labelings."""
    t = joint_histogram(la, lb)
    return {"h_a": _entropy(t.marginal_a), "h_b": _entropy(t.marginal_b),
            "h_ab": _entropy(t.joint.ravel())}


def cmif(a, b, k=8, seed=42):
    """Mutual information (nats) of independent K-means level sets of ``a`` and ``b``."""
    a, b = _check_pair(a, b)
    la = kmeans_levels(a, k, seed)
    lb = kmeans_levels(b, k, seed)
    h = entropies(la, lb)
    return max(h["h_a"] + h["h_b"] - h["h_ab"], 0.0)


def soft_memberships(values, centroids):
    """Triangular (linear-interpolation) membership of values in centroid bins.

    Returns bin indices (lo, hi), weights (w_lo, w_hi) and d w_hi / d value;
    ``d w_lo / d value`` is its negation. Values outside the centroid range
    belong wholly to the end bin with zero derivative.
    """
    c = np.asarray(centroids, dtype=np.float64)
    v = np.asarray(values, dtype=np.float64).ravel()
    k = c.size
    j = np.clip(np.searchsorted(c, v, side="right") - 1, 0, k - 2)
    width = c[j + 1] - c[j]
    t = (v - c[j]) / width
    inside = (t > 0.0) & (t < 1.0)
    t = np.clip(t, 0.0, 1.0)
    dt = np.where(inside, 1.0 / width, 0.0)
    return j, j + 1, 1.0 - t, t, dt


class SoftMI:
    """Parzen-style MI surrogate with triangular kernels over K-means centroids.

    The fixed image and both centroid sets are frozen at construction; only
    the moving intensities vary, so ``value_and_grad`` returns d MI / d moving.
    """

    def __init__(self, fixed, centroids_fixed, centroids_moving, tiny=1e-12):
        self.shape = np.shape(fixed)
        self.ca = centroids_fixed
        self.cb = centroids_moving
        self.ka, self.kb = len(self.ca), len(self.cb)
        self.a = soft_memberships(fixed, self.ca)
        self.tiny = tiny

    def value_and_grad(self, moving):
        alo, ahi, wa0, wa1, _ = self.a
        blo, bhi, wb0, wb1, dbt = soft_memberships(moving, self.cb)
        n = wa0.size
        kb = self.kb
        joint = np.zeros(self.ka * kb)
        for ia, wa in ((alo, wa0), (ahi, wa1)):
            for ib, wb in ((blo, wb0), (bhi, wb1)):
                joint += np.bincount(ia * kb + ib, weights=wa * wb, minlength=joint.size)
        p = joint.reshape(self.ka, kb) / n
        pa = p.sum(axis=1)
        pb = p.sum(axis=0)
        mi = _entropy(pa) + _entropy(pb) - _entropy(p.ravel())
        g = np.log(p + self.tiny) - np.log(pa + self.tiny)[:, None] - np.log(pb + self.tiny)[None, :]
        # dMI/dm = (1/n) sum_ij g_ij wa_i d wb_j / dm
        s = (wa0 * (g[alo, bhi] - g[alo, blo]) + wa1 * (g[ahi, bhi] - g[ahi, blo]))
        grad = (s * dbt / n).reshape(self.shape)
        return float(mi), grad


# ---------------------------------------------------------------- fidelity

def _channels(x):
    x = np.asarray(x, dtype=np.float64)
    return [x] if x.ndim == 2 else [x[:, :, i] for i in range(x.shape[2])]


def fidelity_terms(a, b, cfg):
    """Channel-averaged LNCC and CMIF plus the weighted fidelity (lower is better)."""
    cfg.validate()
    a, b = _check_pair(a, b)
    ca, cb = _channels(a), _channels(b)
    win = effective_window(cfg.lncc_window, a.shape)
    lv = float(np.mean([lncc(x, y, win, cfg.epsilon) for x, y in zip(ca, cb)])) \
        if cfg.lncc_weight > 0 else None
    mv = float(np.mean([cmif(x, y, cfg.k_levels, cfg.seed) for x, y in zip(ca, cb)])) \
        if cfg.cmif_weight > 0 else None
    score = 0.0
    if lv is not None:
        score += cfg.lncc_weight * (1.0 - lv)
    if mv is not None:
        score += cfg.cmif_weight * (-mv)
    return {"lncc": lv, "cmif_nats": mv, "fidelity": score}


def fidelity(a, b, cfg):
    return fidelity_terms(a, b, cfg)["fidelity"]
