"""Convolutional encoder, dense feature grids, GeM descriptors, triplet training."""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ImageTooSmall, NoPositives
from .tensor import Adam, ParameterSet, Tensor, no_grad

log = logging.getLogger(__name__)

GRID = 15
MIN_SIDE = 64


class Encoder:
    """Stack of 3x3 stride-2 convolutions with ReLU; spatial extents shrink by 16."""

    kind = "encoder"
    final_relu = True

    def __init__(self, channels=(16, 32, 64, 64), in_channels=3, seed=0, dtype=np.float32):
        self.channels = tuple(int(c) for c in channels)
        self.dtype = np.dtype(dtype)
        self.frozen = False
        rng = np.random.default_rng(seed)
        self.params = ParameterSet()
        cin = in_channels
        for i, cout in enumerate(self.channels):
            std = np.sqrt(2.0 / (cin * 9))
            self.params.add(f"conv{i}.weight", rng.normal(0.0, std, (cout, cin, 3, 3)).astype(self.dtype))
            self.params.add(f"conv{i}.bias", np.zeros(cout, dtype=self.dtype))
            cin = cout

    @property
    def out_channels(self):
        return self.channels[-1]

    @classmethod
    def from_arrays(cls, arrays):
        n = len(arrays) // 2
        channels = [arrays[f"conv{i}.weight"].shape[0] for i in range(n)]
        in_channels = arrays["conv0.weight"].shape[1]
        dtype = arrays["conv0.weight"].dtype
        model = cls(channels, in_channels=in_channels, dtype=dtype)
        model.params.load_arrays(arrays)
        return model

    def freeze(self):
        self.params.set_requires_grad(False)
        self.frozen = True
        return self

    def unfreeze(self):
        self.params.set_requires_grad(True)
        self.frozen = False
        return self

    def __call__(self, x):
        x = T.as_tensor(x)
        if x.shape[-1] < MIN_SIDE or x.shape[-2] < MIN_SIDE:
            raise ImageTooSmall(f"image {x.shape[-2]}x{x.shape[-1]} below {MIN_SIDE} px")
        if x.dtype != self.dtype:
            x = Tensor(x.data.astype(self.dtype)) if not x.requires_grad else x
        h = x - 0.5
        for i in range(len(self.channels)):
            h = T.conv2d(h, self.params[f"conv{i}.weight"], self.params[f"conv{i}.bias"], stride=2, padding=1)
            if i < len(self.channels) - 1 or self.final_relu:
                h = T.relu(h)
        return h


def _batched(img):
    x = T.as_tensor(img)
    if x.ndim == 3:
        return T.reshape(x, (1,) + x.shape), True
    return x, False


def extract_features(model, img):
    """Dense feature grid E(I): [C, H/16, W/16] (or batched [N, C, h, w])."""
    x, single = _batched(img)
    f = model(x)
    if single:
        f = T.reshape(f, f.shape[1:])
    return f


def _interp_matrix(n_in, n_out):
    """Bilinear resampling matrix with half-pixel centres, edges clamped."""
    m = np.zeros((n_out, n_in))
    if n_in == n_out:
        return np.eye(n_in)
    scale = n_in / n_out
    for i in range(n_out):
        src = (i + 0.5) * scale - 0.5
        src = min(max(src, 0.0), n_in - 1.0)
        i0 = int(np.floor(src))
        i1 = min(i0 + 1, n_in - 1)
        frac = src - i0
        m[i, i0] += 1.0 - frac
        m[i, i1] += frac
    return m


def resize_features(f, size=GRID):
    """Bilinear resize of the two trailing spatial axes to ``size x size``."""
    f = T.as_tensor(f)
    h, w = f.shape[-2:]
    if (h, w) == (size, size):
        return f
    ry = _interp_matrix(h, size).astype(f.dtype)
    rx = _interp_matrix(w, size).astype(f.dtype)
    out = np.einsum("yh,...hw,xw->...yx", ry, f.data, rx, optimize=True)

    def bw(g):
        return (np.einsum("yh,...yx,xw->...hw", ry, g, rx, optimize=True),)

    return T._record(out, (f,), bw)


def normalize_channels(f, eps=1e-8):
    return T.l2_normalize(f, axis=-3, eps=eps)


def local_features(model, img, size=GRID):
    """Resized, per-location L2-normalized feature grid used for matching and scoring."""
    return normalize_channels(resize_features(extract_features(model, img), size))


def gem_pool(f, p=3.0, eps=1e-6, normalize=True):
    """Generalized-mean pooling over the spatial axes, then L2 over channels."""
    f = T.as_tensor(f)
    pooled = T.mean(T.power(T.clamp_min(f, eps), p), axis=(-2, -1))
    desc = T.power(pooled, 1.0 / p)
    return T.l2_normalize(desc, axis=-1) if normalize else desc


def global_descriptors(model, images, p=3.0, batch=32):
    """Unit-norm descriptors for a sequence of [3, H, W] arrays, as an [N, C] array."""
    out = []
    with no_grad():
        for start in range(0, len(images), batch):
            chunk = np.stack([np.asarray(im, dtype=model.dtype) for im in images[start:start + batch]])
            out.append(gem_pool(model(chunk), p).data)
    if not out:
        return np.zeros((0, model.out_channels), dtype=model.dtype)
    return np.concatenate(out)


# ----------------------------------------------------------------------------
# weakly supervised triplet training


def triplet_loss(d_pos, d_neg, margin=0.1):
    """Mean of max(0, margin + d_pos - d_neg)."""
    d_pos, d_neg = T.as_tensor(d_pos), T.as_tensor(d_neg)
    return T.mean(T.relu(T.add(T.sub(d_pos, d_neg), margin)))


def _descriptor_distance(a, b):
    diff = T.sub(a, b)
    return T.sqrt(T.tsum(T.mul(diff, diff), axis=-1), eps=1e-12)


@dataclass
class TripletConfig:
    iterations: int = 500
    batch: int = 8
    lr: float = 1e-3
    margin: float = 0.1
    pos_radius: float = 10.0
    neg_radius: float = 25.0
    neg_candidates: int = 10
    cache_refresh: int = 50
    gem_p: float = 3.0
    seed: int = 0


def _planar_dist(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return np.sqrt(((a[:, None, :] - b[None, :, :]) ** 2).sum(-1))


def build_triplets(q_desc, q_pos, g_desc, g_pos, cfg, rng):
    """Pick (query, positive, negative) gallery indices for every usable query.

    The positive is the descriptor-closest gallery image within
    ``pos_radius``; the negative is the hardest among ``neg_candidates``
    random gallery images beyond ``neg_radius``.
    """
    geo = _planar_dist(q_pos, g_pos)
    triplets = []
    for qi in range(len(q_desc)):
        pos = np.flatnonzero(geo[qi] <= cfg.pos_radius)
        neg = np.flatnonzero(geo[qi] > cfg.neg_radius)
        if len(pos) == 0 or len(neg) == 0:
            continue
        d = ((g_desc - q_desc[qi]) ** 2).sum(-1)
        p = pos[np.argmin(d[pos])]
        cand = rng.choice(neg, size=min(cfg.neg_candidates, len(neg)), replace=False)
        n = cand[np.argmin(d[cand])]
        triplets.append((qi, int(p), int(n)))
    return triplets


def mean_triplet_loss(model, q_imgs, g_imgs, triplets, margin=0.1, p=3.0):
    if not triplets:
        return 0.0
    qd = global_descriptors(model, q_imgs, p)
    gd = global_descriptors(model, g_imgs, p)
    qi, pi, ni = (np.array(x) for x in zip(*triplets))
    dp = np.sqrt(((qd[qi] - gd[pi]) ** 2).sum(-1))
    dn = np.sqrt(((qd[qi] - gd[ni]) ** 2).sum(-1))
    return float(np.maximum(margin + dp - dn, 0.0).mean())


def train_encoder_triplet(model, q_imgs, q_pos, g_imgs, g_pos, cfg=None, callback=None):
    """Train ``model`` in place with a margin triplet loss on GeM descriptors.

    Returns the per-iteration training losses. Queries without a gallery
    image inside ``pos_radius`` are skipped with a warning; if none remain,
    NoPositives is raised.
    """
    cfg = cfg or TripletConfig()
    rng = np.random.default_rng(cfg.seed)
    q_pos = np.asarray(q_pos, dtype=np.float64)
    g_pos = np.asarray(g_pos, dtype=np.float64)
    geo = _planar_dist(q_pos, g_pos)
    has_pos = (geo <= cfg.pos_radius).any(axis=1)
    if not has_pos.all():
        log.warning("%d queries have no gallery image within %.1f m; skipped",
                    int((~has_pos).sum()), cfg.pos_radius)
    if not has_pos.any():
        raise NoPositives(f"no query has a gallery image within {cfg.pos_radius} m")

    model.unfreeze()
    opt = Adam(model.params, lr=cfg.lr)
    losses = []
    triplets = []
    for it in range(cfg.iterations):
        if it % cfg.cache_refresh == 0:
            qd = global_descriptors(model, q_imgs, cfg.gem_p)
            gd = global_descriptors(model, g_imgs, cfg.gem_p)
            triplets = build_triplets(qd, q_pos, gd, g_pos, cfg, rng)
        pick = rng.choice(len(triplets), size=min(cfg.batch, len(triplets)), replace=False)
        chosen = [triplets[i] for i in pick]
        batch = np.stack(
            [q_imgs[t[0]] for t in chosen] + [g_imgs[t[1]] for t in chosen] + [g_imgs[t[2]] for t in chosen]
        ).astype(model.dtype)
        b = len(chosen)
        desc = gem_pool(model(batch), cfg.gem_p)
        dq, dp, dn = desc[0:b], desc[b:2 * b], desc[2 * b:3 * b]
        loss = triplet_loss(_descriptor_distance(dq, dp), _descriptor_distance(dq, dn), cfg.margin)
        model.params.zero_grads()
        T.backward(loss)
        opt.step()
        losses.append(loss.item())
        if callback is not None:
            callback(it, loss.item())
    return losses
