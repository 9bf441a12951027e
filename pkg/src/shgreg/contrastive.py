"""Contrastive feature mapping: a small convolutional encoder trained with the
batch-wise noise-contrastive (B-NCE) loss.

B-NCE compares, at each spatial position of a p x p patch, the features of
all N patches in the batch: the anchor from one modality must pick out its
own counterpart among the N features of the other modality at that same
position. The loss is symmetrised over both anchor directions.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .core import as_image

log = logging.getLogger(__name__)

ENCODER_VERSION = "shgreg-enc-v1"
NORM_EPS = 1e-8


class ZeroFeatureError(ValueError):
    pass


# ---------------------------------------------------------------- encoder

@dataclass
class ConvLayer:
    weight: np.ndarray  # (3, 3, c_in, c_out)
    bias: np.ndarray  # (c_out,)

    @property
    def c_in(self):
        return self.weight.shape[2]

    @property
    def c_out(self):
        return self.weight.shape[3]


@dataclass
class TinyEncoder:
    """Stack of 3x3 same-padding convolutions; ReLU after every layer but the last."""

    layers: list = field(default_factory=list)

    @classmethod
    def init(cls, channels=(1, 16, 16, 8), seed=0):
        rng = np.random.default_rng(seed)
        layers = []
        for cin, cout in zip(channels[:-1], channels[1:]):
            std = np.sqrt(2.0 / (9 * cin))
            layers.append(ConvLayer(rng.normal(0.0, std, (3, 3, cin, cout)), np.zeros(cout)))
        return cls(layers)

    @property
    def in_channels(self):
        return self.layers[0].c_in

    @property
    def out_channels(self):
        return self.layers[-1].c_out

    def copy(self):
        return TinyEncoder([ConvLayer(l.weight.copy(), l.bias.copy()) for l in self.layers])

    def params(self):
        out = []
        for l in self.layers:
            out += [l.weight, l.bias]
        return out

    def to_dict(self):
        return {"layers": [{"shape": list(l.weight.shape),
                            "weight": l.weight.ravel().tolist(),
                            "bias": l.bias.tolist()} for l in self.layers]}

    @classmethod
    def from_dict(cls, d):
        layers = []
        for ld in d["layers"]:
            w = np.asarray(ld["weight"], dtype=np.float64).reshape(ld["shape"])
            layers.append(ConvLayer(w, np.asarray(ld["bias"], dtype=np.float64)))
        return cls(layers)


def save_encoder(path, enc):
    """Write a shared encoder, or a (fixed, moving) pair for per-modality weights."""
    if isinstance(enc, tuple):
        d = {"version": ENCODER_VERSION, "per_modality": True,
             "encoders": [enc[0].to_dict(), enc[1].to_dict()]}
    else:
        d = {"version": ENCODER_VERSION, "per_modality": False, "encoders": [enc.to_dict()]}
    Path(path).write_text(json.dumps(d))


def load_encoder(path):
    d = json.loads(Path(path).read_text())
    if d.get("version") != ENCODER_VERSION:
        raise ValueError(f"{path}: not a {ENCODER_VERSION} checkpoint")
    encs = [TinyEncoder.from_dict(e) for e in d["encoders"]]
    return (encs[0], encs[1]) if d.get("per_modality") else encs[0]


def split_encoders(enc):
    """(fixed-image encoder, moving-image encoder)."""
    return enc if isinstance(enc, tuple) else (enc, enc)


def _im2col(x):
    # x: (B, H, W, C) -> (B, H, W, 3, 3, C) with zero padding 1
    b, h, w, c = x.shape
    p = np.zeros((b, h + 2, w + 2, c))
    p[:, 1:-1, 1:-1] = x
    cols = np.empty((b, h, w, 3, 3, c))
    for ky in range(3):
        for kx in range(3):
            cols[:, :, :, ky, kx] = p[:, ky:ky + h, kx:kx + w]
    return cols


def _col2im(dcols):
    b, h, w, _, _, c = dcols.shape
    p = np.zeros((b, h + 2, w + 2, c))
    for ky in range(3):
        for kx in range(3):
            p[:, ky:ky + h, kx:kx + w] += dcols[:, :, :, ky, kx]
    return p[:, 1:-1, 1:-1]


def _forward(enc, x, keep=False):
    cache = []
    n = len(enc.layers)
    for i, layer in enumerate(enc.layers):
        cols = _im2col(x)
        b, h, w = x.shape[:3]
        z = cols.reshape(-1, 9 * layer.c_in) @ layer.weight.reshape(-1, layer.c_out) + layer.bias
        z = z.reshape(b, h, w, layer.c_out)
        out = np.maximum(z, 0.0) if i < n - 1 else z
        if keep:
            cache.append((cols, z))
        x = out
    return x, cache


def _backward(enc, cache, dout):
    grads = []
    n = len(enc.layers)
    for i in range(n - 1, -1, -1):
        layer = enc.layers[i]
        cols, z = cache[i]
        if i < n - 1:
            dout = dout * (z > 0)
        d2 = dout.reshape(-1, layer.c_out)
        gw = (cols.reshape(-1, 9 * layer.c_in).T @ d2).reshape(layer.weight.shape)
        gb = d2.sum(axis=0)
        grads.append((gw, gb))
        if i > 0:
            dcols = (d2 @ layer.weight.reshape(-1, layer.c_out).T).reshape(cols.shape)
            dout = _col2im(dcols)
    grads.reverse()
    flat = []
    for gw, gb in grads:
        flat += [gw, gb]
    return flat


def encode(enc, img):
    """Feature map (H, W, C_out) of an (H, W) or (H, W, C_in) image."""
    img = as_image(img)
    x = img[:, :, None] if img.ndim == 2 else img
    if x.shape[2] != enc.in_channels:
        raise ValueError(f"image has {x.shape[2]} channels, encoder expects {enc.in_channels}")
    out, _ = _forward(enc, x[None])
    return out[0]


def normalize_features(fm, eps=NORM_EPS):
    """Per-pixel L2 normalisation with ``eps`` added under the square root."""
    return fm / np.sqrt((fm * fm).sum(axis=-1, keepdims=True) + eps)


# ---------------------------------------------------------------- B-NCE

@dataclass
class BnceConfig:
    tau: float = 0.5
    patch_size: int = 16
    batch_size: int = 32
    learning_rate: float = 3e-3
    steps: int = 200
    seed: int = 0
    validation_size: int = 32

    def validate(self):
        if self.tau <= 0:
            raise ValueError("tau must be positive")
        if self.batch_size < 2:
            raise ValueError("need negatives: batch_size must be >= 2")
        if self.patch_size < 1 or self.steps < 0 or self.learning_rate <= 0:
            raise ValueError("invalid patch_size / steps / learning_rate")
        return self


@dataclass
class PatchBatch:
    """N corresponding p x p x C feature patches from the two modalities."""

    patches_a: np.ndarray
    patches_b: np.ndarray

    def __post_init__(self):
        self.patches_a = np.asarray(self.patches_a, dtype=np.float64)
        self.patches_b = np.asarray(self.patches_b, dtype=np.float64)
        if self.patches_a.shape != self.patches_b.shape or self.patches_a.ndim != 4:
            raise ValueError("patches must be matching (N, p, p, C) arrays")
        if self.patches_a.shape[1] != self.patches_a.shape[2]:
            raise ValueError("patches must be square")

    @property
    def count(self):
        return self.patches_a.shape[0]

    @property
    def patch_size(self):
        return self.patches_a.shape[1]


def gather_position_vectors(batch, i, j):
    """Features of every patch at in-patch position (i, j): two (N, C) arrays."""
    p = batch.patch_size
    if not (0 <= i < p and 0 <= j < p):
        raise IndexError(f"position ({i}, {j}) outside {p}x{p} patch")
    return batch.patches_a[:, i, j, :], batch.patches_b[:, i, j, :]


def cosine_sim(x, y):
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    nx, ny = np.linalg.norm(x), np.linalg.norm(y)
    if nx == 0 or ny == 0:
        raise ZeroFeatureError("zero feature vector")
    return float(np.clip(x @ y / (nx * ny), -1.0, 1.0))


@dataclass
class BnceResult:
    loss: float
    grad_a: np.ndarray
    grad_b: np.ndarray


def _normalize_with_jac(v):
    r = np.sqrt((v * v).sum(axis=-1, keepdims=True) + NORM_EPS)
    return v / r, r


def _normalize_backward(v, vhat, r, dvhat):
    # d(v/r): dv = dvhat / r - v (v . dvhat) / r^3
    return dvhat / r - vhat * (vhat * dvhat).sum(axis=-1, keepdims=True) / r


def _directional(s, tau):
    # rows are anchors; diagonal holds the positives
    logits = s / tau
    logits = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(logits)
    prob = e / e.sum(axis=-1, keepdims=True)
    diag = np.diagonal(prob, axis1=-2, axis2=-1)
    loss = -np.log(diag)
    return loss, prob


def bnce_loss(batch, tau=0.5):
    """Symmetrised B-NCE loss over all positions of a patch batch, with gradients."""
    n = batch.count
    if n < 2:
        raise ValueError("need negatives: at least 2 patches per batch")
    xa, xb = batch.patches_a, batch.patches_b
    _, p, _, c = xa.shape
    # (P, N, C) with P = p*p positions
    va = xa.transpose(1, 2, 0, 3).reshape(p * p, n, c)
    vb = xb.transpose(1, 2, 0, 3).reshape(p * p, n, c)
    ha, ra = _normalize_with_jac(va)
    hb, rb = _normalize_with_jac(vb)
    s = np.einsum("pnc,pmc->pnm", ha, hb)

    loss_ab, prob_ab = _directional(s, tau)
    loss_ba, prob_ba = _directional(s.transpose(0, 2, 1), tau)
    npos = p * p
    loss = 0.5 * (loss_ab.mean() + loss_ba.mean())

    eye = np.eye(n)
    scale = 0.5 / (tau * n * npos)
    ds = (prob_ab - eye) * scale + (prob_ba - eye).transpose(0, 2, 1) * scale
    dha = np.einsum("pnm,pmc->pnc", ds, hb)
    dhb = np.einsum("pnm,pnc->pmc", ds, ha)
    dva = _normalize_backward(va, ha, ra, dha)
    dvb = _normalize_backward(vb, hb, rb, dhb)
    ga = dva.reshape(p, p, n, c).transpose(2, 0, 1, 3)
    gb = dvb.reshape(p, p, n, c).transpose(2, 0, 1, 3)
    return BnceResult(float(loss), np.ascontiguousarray(ga), np.ascontiguousarray(gb))


def infonce_loss(za, zb, tau=0.5):
    """Patch-level InfoNCE on pooled (N, C) embeddings; reference baseline only."""
    ha = za / np.linalg.norm(za, axis=1, keepdims=True)
    hb = zb / np.linalg.norm(zb, axis=1, keepdims=True)
    loss, _ = _directional((ha @ hb.T)[None], tau)
    return float(loss.mean())


# ---------------------------------------------------------------- training

class Adam:
    def __init__(self, params, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.lr, self.b1, self.b2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, grads):
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def _window_sampler(pairs, p, margin, rng, n):
    """Random (pair, y, x) windows of side p + 2*margin fully inside the images."""
    out = []
    side = p + 2 * margin
    for _ in range(n):
        k = int(rng.integers(len(pairs)))
        h, w = pairs[k][0].shape[:2]
        y = int(rng.integers(0, h - side + 1))
        x = int(rng.integers(0, w - side + 1))
        out.append((k, y, x))
    return out


def _crops(pairs, windows, side, which):
    crops = []
    for k, y, x in windows:
        img = pairs[k][which]
        c = img[y:y + side, x:x + side]
        crops.append(c[:, :, None] if c.ndim == 2 else c)
    return np.stack(crops)


def _batch_features(enc_a, enc_b, pairs, windows, p, margin, keep=False):
    side = p + 2 * margin
    xa = _crops(pairs, windows, side, 0)
    xb = _crops(pairs, windows, side, 1)
    fa, ca = _forward(enc_a, xa, keep)
    fb, cb = _forward(enc_b, xb, keep)
    sl = slice(margin, margin + p)
    return fa, fb, ca, cb, PatchBatch(fa[:, sl, sl], fb[:, sl, sl])


def batch_loss(enc, pairs, windows, cfg):
    enc_a, enc_b = split_encoders(enc)
    margin = len(enc_a.layers)
    *_, batch = _batch_features(enc_a, enc_b, pairs, windows, cfg.patch_size, margin)
    return bnce_loss(batch, cfg.tau).loss


def _prepare_pairs(pairs):
    out = []
    for a, b in pairs:
        a = as_image(a)
        b = as_image(b)
        if a.shape[:2] != b.shape[:2]:
            raise ValueError(f"pair dimension mismatch: {a.shape} vs {b.shape}")
        out.append((a, b))
    return out


def train_encoder(pairs, cfg, per_modality=False, init=None, callback=None):
    """Train encoder weights with Adam on the B-NCE loss of random patch batches.

    ``pairs`` is a list of registered (fixed, moving) images. ``callback`` is
    called as ``callback(step, train_loss, validation_loss_or_None)``. The
    validation loss is evaluated on a fixed batch at step 0 and at the end.
    Returns the shared encoder, or a (fixed, moving) tuple when
    ``per_modality`` is set.
    """
    cfg.validate()
    if not pairs:
        raise ValueError("no training pairs")
    pairs = _prepare_pairs(pairs)
    rng = np.random.default_rng(cfg.seed)
    if init is None:
        base = TinyEncoder.init(seed=cfg.seed)
        enc = (base, base.copy()) if per_modality else base
    else:
        enc = tuple(e.copy() for e in init) if isinstance(init, tuple) else init.copy()
    enc_a, enc_b = split_encoders(enc)
    margin = len(enc_a.layers)
    p = cfg.patch_size
    side = p + 2 * margin
    if any(min(a.shape[:2]) < side for a, _ in pairs):
        raise ValueError(f"images must be at least {side} px for patch_size {p}")

    val_rng = np.random.default_rng(cfg.seed + 1)
    val_windows = _window_sampler(pairs, p, margin, val_rng, max(cfg.validation_size, 2))

    params = enc_a.params() + (enc_b.params() if per_modality else [])
    opt = Adam(params, cfg.learning_rate)
    v0 = batch_loss(enc, pairs, val_windows, cfg)
    if callback:
        callback(0, v0, v0)
    for step in range(1, cfg.steps + 1):
        windows = _window_sampler(pairs, p, margin, rng, cfg.batch_size)
        fa, fb, ca, cb, batch = _batch_features(enc_a, enc_b, pairs, windows, p, margin, keep=True)
        res = bnce_loss(batch, cfg.tau)
        da = np.zeros_like(fa)
        db = np.zeros_like(fb)
        sl = slice(margin, margin + p)
        da[:, sl, sl] = res.grad_a
        db[:, sl, sl] = res.grad_b
        if per_modality:
            grads = _backward(enc_a, ca, da) + _backward(enc_b, cb, db)
        else:
            ga = _backward(enc_a, ca, da)
            gb = _backward(enc_a, cb, db)
            grads = [x + y for x, y in zip(ga, gb)]
        opt.step(grads)
        val = batch_loss(enc, pairs, val_windows, cfg) if step == cfg.steps else None
        if callback:
            callback(step, res.loss, val)
        if step % 50 == 0:
            log.debug("bnce step %d loss %.4f", step, res.loss)
    return enc
