"""Losses and the training loop for the warp regressor.

Three signals are combined:

* a self-supervised regression loss on synthetic pairs cut from one image,
  whose shared region is known by construction;
* a feature-wise loss pulling the warped dense features of mined
  query/positive pairs together;
* a consistency loss against detached pseudo-labels averaged over image
  transformations (identity and horizontal flip) and argument order.

The encoder stays frozen throughout.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, fields

import numpy as np

from . import tensor as T
from .encoder import local_features
from .errors import DegenerateIntersection, EmptyCorpus
from .geometry import (
    apply_homography,
    frame_corners,
    homography_from_quad,
    intersect_trapezoids,
    sample_quad,
    to_normalized,
    warp_image,
)
from .regressor import predict
from .tensor import Adam, no_grad

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    k: float = 0.6
    lambda_ss: float = 1.0
    lambda_fw: float = 10.0
    lambda_cons: float = 0.1
    t_geo: float = 25.0
    t_feat: float = 1.2
    iterations: int = 50000
    batch_ss: int = 16
    batch_ws: int = 16
    n_transforms: int = 2
    lr: float = 1e-4
    seed: int = 0

    @property
    def weights(self):
        return {"ss": self.lambda_ss, "fw": self.lambda_fw, "cons": self.lambda_cons}

    @classmethod
    def field_names(cls):
        return [f.name for f in fields(cls)]


# ----------------------------------------------------------------------------
# image transformations used by the consistency loss


class Identity:
    name = "identity"

    def apply_image(self, imgs):
        return imgs

    def inverse_points(self, pred):
        return pred


class HorizontalFlip:
    """Mirror images left-right.

    On points (normalized frame) x is negated and the corners are re-paired
    TL<->TR, BR<->BL so that the quad keeps its TL/TR/BR/BL order. The map
    is an involution, so it is its own inverse.
    """

    name = "hflip"
    _perm8 = np.array([2, 3, 0, 1, 6, 7, 4, 5])
    _sign8 = np.array([-1.0, 1.0] * 4)

    def apply_image(self, imgs):
        return np.ascontiguousarray(np.asarray(imgs)[..., ::-1])

    def _index(self, n):
        blocks = n // 8
        perm = np.concatenate([self._perm8 + 8 * b for b in range(blocks)])
        sign = np.tile(self._sign8, blocks)
        return perm, sign

    def inverse_points(self, pred):
        if isinstance(pred, T.Tensor):
            perm, sign = self._index(pred.shape[-1])
            return T.mul(T.getitem(pred, (Ellipsis, perm)), sign.astype(pred.dtype))
        pred = np.asarray(pred)
        perm, sign = self._index(pred.shape[-1])
        return pred[..., perm] * sign

    point_action = inverse_points


def default_transforms(n=2):
    return [Identity(), HorizontalFlip()][:n]


def swap_halves(v):
    """[t_a, t_b] -> [t_b, t_a] along the last axis (16 entries)."""
    if isinstance(v, T.Tensor):
        return T.concat([T.getitem(v, (Ellipsis, slice(8, 16))), T.getitem(v, (Ellipsis, slice(0, 8)))], axis=-1)
    v = np.asarray(v)
    return np.concatenate([v[..., 8:], v[..., :8]], axis=-1)


# ----------------------------------------------------------------------------
# self-supervised quadruplets


@dataclass
class Quadruplet:
    img_a: np.ndarray
    img_b: np.ndarray
    t_a: np.ndarray
    t_b: np.ndarray

    def target(self):
        """Normalized 16-vector [t_a, t_b]."""
        ha, wa = self.img_a.shape[-2:]
        hb, wb = self.img_b.shape[-2:]
        return np.concatenate([to_normalized(self.t_a, wa, ha), to_normalized(self.t_b, wb, hb)])


def gen_quadruplet(img, k, rng, max_retries=10):
    """Cut two trapezoidal views of ``img`` and the quads of their shared region."""
    h, w = img.shape[-2:]
    for _ in range(max_retries):
        tx = sample_quad(rng, k, w, h)
        ty = sample_quad(rng, k, w, h)
        try:
            tz = intersect_trapezoids(tx, ty)
        except DegenerateIntersection:
            continue
        corners = frame_corners(w, h)
        t_a = apply_homography(homography_from_quad(tx, corners), tz)
        t_b = apply_homography(homography_from_quad(ty, corners), tz)
        return Quadruplet(warp_image(img, tx), warp_image(img, ty), t_a, t_b)
    raise DegenerateIntersection(f"no overlapping pair after {max_retries} draws")


def squared_error_sum(pred, target):
    """Batch mean of the per-sample summed squared error."""
    pred = T.as_tensor(pred)
    target = np.asarray(target, dtype=pred.dtype).reshape(pred.shape)
    diff = T.sub(pred, target)
    sq = T.mul(diff, diff)
    if sq.ndim == 1:
        return T.tsum(sq)
    return T.mean(T.tsum(sq, axis=-1))


def loss_ss(pred, target):
    """||W(I_a, I_b) - [t_a, t_b]||^2 in normalized coordinates, batch-averaged."""
    return squared_error_sum(pred, target)


# ----------------------------------------------------------------------------
# weak supervision


@dataclass(frozen=True)
class MinedPair:
    query: int
    gallery: int
    geo_distance: float
    feat_distance: float


def mine_pairs(q_desc, q_pos, g_desc, g_pos, t_geo=25.0, t_feat=1.2):
    """Every (query, gallery) pair closer than ``t_geo`` metres whose squared
    descriptor distance is below ``t_feat``. Queries may repeat."""
    q_desc = np.asarray(q_desc, dtype=np.float64)
    g_desc = np.asarray(g_desc, dtype=np.float64)
    q_pos = np.asarray(q_pos, dtype=np.float64).reshape(-1, 2)
    g_pos = np.asarray(g_pos, dtype=np.float64).reshape(-1, 2)
    if len(q_desc) == 0 or len(g_desc) == 0:
        return []
    geo = np.sqrt(((q_pos[:, None, :] - g_pos[None, :, :]) ** 2).sum(-1))
    feat = ((q_desc[:, None, :] - g_desc[None, :, :]) ** 2).sum(-1)
    qi, gi = np.nonzero((geo < t_geo) & (feat < t_feat))
    return [MinedPair(int(q), int(g), float(geo[q, g]), float(feat[q, g])) for q, g in zip(qi, gi)]


def _as_batch(x):
    x = np.asarray(x)
    return x[None] if x.ndim == 3 else x


def loss_fw(encoder, regressor, imgs_q, imgs_g):
    """Summed squared difference of the warped, normalized dense features.

    Batch-averaged over pairs; gradients reach the regressor through both
    warps and the frozen encoder.
    """
    imgs_q, imgs_g = _as_batch(imgs_q), _as_batch(imgs_g)
    n = len(imgs_q)
    pred = predict(encoder, regressor, imgs_q, imgs_g)
    warped = []
    for side, imgs in ((0, imgs_q), (8, imgs_g)):
        for i in range(n):
            h, w = imgs[i].shape[-2:]
            scale = np.tile([w / 2.0, h / 2.0], 4)
            quad = T.mul(T.add(T.getitem(pred, (i, slice(side, side + 8))), 1.0), scale)
            warped.append(warp_image(imgs[i], quad))
    feats = local_features(encoder, T.stack(warped), regressor.grid)
    diff = T.sub(T.getitem(feats, slice(0, n)), T.getitem(feats, slice(n, 2 * n)))
    return T.mul(T.tsum(T.mul(diff, diff)), 1.0 / n)


def _branches(warp_fn, imgs_q, imgs_g, taus):
    fwd, rev = [], []
    for tau in taus:
        a, b = tau.apply_image(imgs_q), tau.apply_image(imgs_g)
        fwd.append(tau.inverse_points(warp_fn(a, b)))
        rev.append(tau.inverse_points(warp_fn(b, a)))
    return fwd, rev


def _pseudo_from(fwd, rev):
    mean_fwd = sum(np.asarray(x.data if isinstance(x, T.Tensor) else x, dtype=np.float64) for x in fwd) / len(fwd)
    mean_rev = sum(np.asarray(x.data if isinstance(x, T.Tensor) else x, dtype=np.float64) for x in rev) / len(rev)
    return (mean_fwd + swap_halves(mean_rev)) / 2.0


def pseudo_labels(warp_fn, imgs_q, imgs_g, taus):
    """Detached [t_q*, t_g*] averaged over transforms and argument order.

    ``warp_fn(a, b)`` returns W(a, b) as an [N, 16] tensor or array.
    """
    if not taus:
        raise ValueError("need at least one transform")
    imgs_q, imgs_g = _as_batch(imgs_q), _as_batch(imgs_g)
    with no_grad():
        fwd, rev = _branches(warp_fn, imgs_q, imgs_g, taus)
    return _pseudo_from(fwd, rev)


def loss_cons(warp_fn, imgs_q, imgs_g, taus, pseudo=None):
    """Consistency of every transformed branch with the detached pseudo-labels.

    When ``pseudo`` is None it is derived from the same forward passes (the
    values are identical to :func:`pseudo_labels`, and they are used as
    constants).
    """
    imgs_q, imgs_g = _as_batch(imgs_q), _as_batch(imgs_g)
    fwd, rev = _branches(warp_fn, imgs_q, imgs_g, taus)
    if pseudo is None:
        pseudo = _pseudo_from(fwd, rev)
    pseudo = np.asarray(pseudo)
    swapped = swap_halves(pseudo)
    total = None
    for f, r in zip(fwd, rev):
        term = T.add(squared_error_sum(f, pseudo), squared_error_sum(r, swapped))
        total = term if total is None else T.add(total, term)
    return T.mul(total, 1.0 / (2 * len(taus)))


def total_loss(parts, weights):
    """Weighted sum of the loss parts; zero-weight parts are not touched."""
    total = None
    for name, lam in weights.items():
        if lam == 0 or name not in parts or parts[name] is None:
            continue
        term = T.mul(parts[name], float(lam)) if isinstance(parts[name], T.Tensor) else float(lam) * parts[name]
        if total is None:
            total = term
        else:
            total = T.add(total, term) if isinstance(total, T.Tensor) or isinstance(term, T.Tensor) else total + term
    return 0.0 if total is None else total


# ----------------------------------------------------------------------------
# training loop


class _PairSampler:
    """Draws mined pairs without replacement, reshuffling once exhausted."""

    def __init__(self, n, rng):
        self.n = n
        self.rng = rng
        self.order = []

    def take(self, count):
        out = []
        while len(out) < count:
            if not self.order:
                self.order = list(self.rng.permutation(self.n))
            out.append(self.order.pop(0))
        return out


def train_warp(regressor, encoder, corpus, pairs=(), cfg=None, callback=None):
    """Train ``regressor`` in place; returns the per-iteration loss records.

    ``corpus`` is a sequence of [3, H, W] images for self-supervised pairs,
    ``pairs`` a sequence of (query image, gallery image) mined pairs. With no
    pairs only the self-supervised term is used.
    """
    cfg = cfg or TrainConfig()
    if len(corpus) == 0:
        raise EmptyCorpus("training corpus is empty")
    encoder.freeze()
    rng = np.random.default_rng(cfg.seed)
    opt = Adam(regressor.params, lr=cfg.lr)
    taus = default_transforms(cfg.n_transforms)
    sampler = _PairSampler(len(pairs), rng) if len(pairs) else None
    weights = dict(cfg.weights)
    if sampler is None:
        weights["fw"] = weights["cons"] = 0.0

    def warp_fn(a, b):
        return predict(encoder, regressor, a, b)

    records = []
    for it in range(cfg.iterations):
        parts = {}
        if weights["ss"]:
            quads = [gen_quadruplet(corpus[i], cfg.k, rng) for i in rng.integers(0, len(corpus), cfg.batch_ss)]
            ia = np.stack([q.img_a for q in quads])
            ib = np.stack([q.img_b for q in quads])
            parts["ss"] = loss_ss(warp_fn(ia, ib), np.stack([q.target() for q in quads]))
        if weights["fw"] or weights["cons"]:
            idx = sampler.take(cfg.batch_ws)
            pq = np.stack([pairs[i][0] for i in idx])
            pg = np.stack([pairs[i][1] for i in idx])
            if weights["fw"]:
                parts["fw"] = loss_fw(encoder, regressor, pq, pg)
            if weights["cons"]:
                parts["cons"] = loss_cons(warp_fn, pq, pg, taus)
        total = total_loss(parts, weights)
        if isinstance(total, T.Tensor) and total.requires_grad:
            regressor.params.zero_grads()
            T.backward(total)
            opt.step()
        rec = {"iteration": it}
        for key in ("ss", "fw", "cons"):
            rec[f"L_{key}"] = parts[key].item() if key in parts else None
        rec["L_total"] = total.item() if isinstance(total, T.Tensor) else float(total)
        records.append(rec)
        if callback is not None:
            callback(rec)
    return records
