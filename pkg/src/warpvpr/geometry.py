"""Homography math: four-point DLT, projective warping, trapezoid sampling.

Coordinates are continuous image coordinates with y pointing down and the
frame spanning ``[0, w] x [0, h]``; pixel ``(i, j)`` has its centre at
``(j + 0.5, i + 0.5)``. A quad is a ``(4, 2)`` array ordered top-left,
top-right, bottom-right, bottom-left.
"""
from __future__ import annotations

import itertools

import numpy as np

from .errors import (
    DegenerateIntersection,
    DegenerateQuad,
    InvalidK,
    PointAtInfinity,
    SingularSystem,
)
from .tensor import Tensor, _record

_UNIT_CORNERS = np.array([[-1.0, -1.0], [1.0, -1.0], [1.0, 1.0], [-1.0, 1.0]])


def frame_corners(w, h):
    return np.array([[0.0, 0.0], [w, 0.0], [w, h], [0.0, h]], dtype=np.float64)


def as_quad(q):
    q = np.asarray(q.data if isinstance(q, Tensor) else q, dtype=np.float64)
    return q.reshape(4, 2)


def _has_collinear_triple(pts, rel_tol=1e-12):
    scale = max(np.ptp(pts[:, 0]), np.ptp(pts[:, 1]), 1e-300)
    for i, j, k in itertools.combinations(range(4), 3):
        a, b, c = pts[i], pts[j], pts[k]
        cross = (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])
        if abs(cross) <= rel_tol * scale * scale:
            return True
    return False


def _dlt_matrix(src, dst):
    a = np.zeros((8, 8))
    b = np.zeros(8)
    for i in range(4):
        x, y = src[i]
        u, v = dst[i]
        a[2 * i] = [x, y, 1.0, 0.0, 0.0, 0.0, -x * u, -y * u]
        a[2 * i + 1] = [0.0, 0.0, 0.0, x, y, 1.0, -x * v, -y * v]
        b[2 * i] = u
        b[2 * i + 1] = v
    return a, b


def _conditioner(pts):
    c = pts.mean(axis=0)
    d = np.sqrt(((pts - c) ** 2).sum(axis=1)).mean()
    s = np.sqrt(2.0) / d
    return np.array([[s, 0.0, -s * c[0]], [0.0, s, -s * c[1]], [0.0, 0.0, 1.0]])


def homography_from_quad(src, dst):
    """3x3 homography (h33 = 1) mapping the four ``src`` points onto ``dst``.

    Solved as the 8x8 DLT system on Hartley-conditioned points.
    """
    src, dst = as_quad(src), as_quad(dst)
    if not (np.all(np.isfinite(src)) and np.all(np.isfinite(dst))):
        raise SingularSystem("non-finite quad coordinates")
    if np.array_equal(src, dst):
        return np.eye(3)
    if _has_collinear_triple(src):
        raise SingularSystem("three source points are collinear")
    if _has_collinear_triple(dst):
        raise SingularSystem("three destination points are collinear")
    ts, td = _conditioner(src), _conditioner(dst)
    a, b = _dlt_matrix(apply_homography(ts, src), apply_homography(td, dst))
    try:
        h = np.linalg.solve(a, b)
    except np.linalg.LinAlgError as exc:
        raise SingularSystem(str(exc)) from exc
    hn = np.append(h, 1.0).reshape(3, 3)
    H = np.linalg.solve(td, hn @ ts)
    H = H / H[2, 2]
    if abs(np.linalg.det(H)) <= 1e-12:
        raise SingularSystem("homography is not invertible")
    return H


def apply_homography(H, pts):
    """Project ``(N, 2)`` points through ``H`` with perspective division."""
    pts = np.asarray(pts, dtype=np.float64)
    flat = pts.reshape(-1, 2)
    hom = flat @ H[:, :2].T + H[:, 2]
    w = hom[:, 2]
    if np.any(np.abs(w) <= 1e-12):
        raise PointAtInfinity("point maps to the line at infinity")
    return (hom[:, :2] / w[:, None]).reshape(pts.shape)


def to_normalized(q, w, h):
    """Pixel quad -> 8 scalars in the [-1, 1] frame, (-1, -1) = top-left."""
    q = as_quad(q)
    out = np.empty_like(q)
    out[:, 0] = 2.0 * q[:, 0] / w - 1.0
    out[:, 1] = 2.0 * q[:, 1] / h - 1.0
    return out.reshape(8)


def from_normalized(nq, w, h):
    nq = np.asarray(nq, dtype=np.float64).reshape(4, 2)
    out = np.empty_like(nq)
    out[:, 0] = (nq[:, 0] + 1.0) * w / 2.0
    out[:, 1] = (nq[:, 1] + 1.0) * h / 2.0
    return out


def quad_area(q):
    q = as_quad(q)
    x, y = q[:, 0], q[:, 1]
    return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1)))


# ----------------------------------------------------------------------------
# image warping


def _bilinear(img, sx, sy):
    """Zero-padded bilinear sampling of img[C, H, W] at array coords (sx, sy).

    Returns the sampled values plus everything the backward pass needs.
    """
    c, h, w = img.shape
    x0 = np.floor(sx)
    y0 = np.floor(sy)
    fx = (sx - x0).astype(img.dtype)
    fy = (sy - y0).astype(img.dtype)
    x0 = x0.astype(np.int64)
    y0 = y0.astype(np.int64)
    flat = img.reshape(c, h * w)
    corners = []
    for dy, dx in ((0, 0), (0, 1), (1, 0), (1, 1)):
        xi, yi = x0 + dx, y0 + dy
        valid = (xi >= 0) & (xi < w) & (yi >= 0) & (yi < h)
        idx = np.where(valid, yi * w + xi, 0)
        vals = flat[:, idx] * valid
        corners.append((idx, valid, vals))
    (_, _, v00), (_, _, v01), (_, _, v10), (_, _, v11) = corners
    wts = ((1 - fx) * (1 - fy), fx * (1 - fy), (1 - fx) * fy, fx * fy)
    out = wts[0] * v00 + wts[1] * v01 + wts[2] * v10 + wts[3] * v11
    return out, (corners, wts, fx, fy)


def warp_image(img, quad, out_size=None):
    """Crop-and-rectify: the region bounded by ``quad`` fills the output frame.

    Each output pixel centre is mapped through the homography taking the
    output frame's corners onto ``quad`` and the input is sampled bilinearly
    there; samples outside the input read 0. Differentiable w.r.t. both the
    image and the 8 quad coordinates when either is a Tensor, otherwise a
    plain ndarray is returned.
    """
    track = isinstance(img, Tensor) or isinstance(quad, Tensor)
    img_t = img if isinstance(img, Tensor) else Tensor(img)
    quad_t = quad if isinstance(quad, Tensor) else Tensor(np.asarray(quad, dtype=np.float64))
    data = img_t.data
    if data.ndim != 3:
        raise ValueError(f"warp_image expects [C, H, W], got {data.shape}")
    c, h, w = data.shape
    ho, wo = (h, w) if out_size is None else (int(out_size[0]), int(out_size[1]))

    q = as_quad(quad_t)
    if not np.all(np.isfinite(q)) or _has_collinear_triple(q):
        raise DegenerateQuad("quad is degenerate")

    # quad expressed in the input's normalized frame; output corners are +-1
    qn = np.empty_like(q)
    qn[:, 0] = 2.0 * q[:, 0] / w - 1.0
    qn[:, 1] = 2.0 * q[:, 1] / h - 1.0
    a, b = _dlt_matrix(_UNIT_CORNERS, qn)
    try:
        hv = np.linalg.solve(a, b)
    except np.linalg.LinAlgError as exc:
        raise DegenerateQuad(str(exc)) from exc
    Hn = np.append(hv, 1.0).reshape(3, 3)

    us = (2.0 * (np.arange(wo) + 0.5) / wo - 1.0)
    vs = (2.0 * (np.arange(ho) + 0.5) / ho - 1.0)
    pu, pv = np.meshgrid(us, vs)
    pu, pv = pu.ravel(), pv.ravel()
    qx = Hn[0, 0] * pu + Hn[0, 1] * pv + Hn[0, 2]
    qy = Hn[1, 0] * pu + Hn[1, 1] * pv + Hn[1, 2]
    qw = Hn[2, 0] * pu + Hn[2, 1] * pv + Hn[2, 2]
    finite = np.abs(qw) > 1e-12
    safe_w = np.where(finite, qw, 1.0)
    xn = qx / safe_w
    yn = qy / safe_w
    sx = (xn + 1.0) * w / 2.0 - 0.5
    sy = (yn + 1.0) * h / 2.0 - 0.5
    if (ho, wo) == (h, w) and np.array_equal(q, frame_corners(w, h)):
        gx, gy = np.meshgrid(np.arange(w, dtype=np.float64), np.arange(h, dtype=np.float64))
        sx, sy = gx.ravel(), gy.ravel()
    sx = np.where(finite, np.clip(sx, -2.0, w + 1.0), -2.0)
    sy = np.where(finite, np.clip(sy, -2.0, h + 1.0), -2.0)

    out, cache = _bilinear(data, sx, sy)
    out = out.reshape(c, ho, wo)
    if not track:
        return out

    def bw(g):
        corners, wts, fx, fy = cache
        g = g.reshape(c, -1)
        gimg = None
        gquad = None
        if img_t.requires_grad:
            npix = h * w
            chan = (np.arange(c) * npix)[:, None]
            acc = np.zeros(c * npix, dtype=np.float64)
            for (idx, valid, _), wt in zip(corners, wts):
                contrib = g * (wt * valid)
                acc += np.bincount((chan + idx).ravel(), weights=contrib.ravel(), minlength=c * npix)
            gimg = acc.reshape(c, h, w).astype(data.dtype)
        if quad_t.requires_grad:
            (_, _, v00), (_, _, v01), (_, _, v10), (_, _, v11) = corners
            dsx = (1 - fy) * (v01 - v00) + fy * (v11 - v10)
            dsy = (1 - fx) * (v10 - v00) + fx * (v11 - v01)
            gsx = (g * dsx).sum(axis=0).astype(np.float64)
            gsy = (g * dsy).sum(axis=0).astype(np.float64)
            inside = finite & (sx > -2.0) & (sx < w + 1.0) & (sy > -2.0) & (sy < h + 1.0)
            gsx = np.where(inside, gsx, 0.0)
            gsy = np.where(inside, gsy, 0.0)
            # d(sample coords)/d(Hn), Hn applied to p = (pu, pv, 1)
            rx = gsx * (w / 2.0) / safe_w
            ry = gsy * (h / 2.0) / safe_w
            rw = -(rx * xn + ry * yn)
            p = (pu, pv, np.ones_like(pu))
            gH = np.array([[np.dot(r, pj) for pj in p] for r in (rx, ry, rw)])
            lam = np.linalg.solve(a.T, gH.reshape(9)[:8])
            denom = 1.0 + hv[6] * _UNIT_CORNERS[:, 0] + hv[7] * _UNIT_CORNERS[:, 1]
            gqn = lam.reshape(4, 2) * denom[:, None]
            gq = gqn * np.array([2.0 / w, 2.0 / h])
            gquad = gq.reshape(quad_t.shape).astype(quad_t.dtype)
        return gimg, gquad

    return _record(out, (img_t, quad_t), bw)


# ----------------------------------------------------------------------------
# self-supervised quad sampling


def sample_quad(rng, k, w, h):
    """Random vertical-sided trapezoid whose corners sit near the frame corners.

    Six uniforms in [0, k): the left and right x offsets (shared by the two
    points on each vertical side) and four independent y offsets.
    """
    if not 0.0 <= k <= 1.0:
        raise InvalidK(f"k must be in [0, 1], got {k}")
    u = rng.uniform(0.0, k, size=6)
    xl = u[0] * w / 2.0
    xr = w - u[1] * w / 2.0
    return np.array([
        [xl, u[2] * h / 2.0],
        [xr, u[3] * h / 2.0],
        [xr, h - u[4] * h / 2.0],
        [xl, h - u[5] * h / 2.0],
    ])


def _edge_y(p, q, x):
    if q[0] == p[0]:
        return p[1]
    return p[1] + (q[1] - p[1]) * (x - p[0]) / (q[0] - p[0])


def intersect_trapezoids(tx, ty):
    """Widest vertical-sided trapezoid inside the intersection of two such trapezoids."""
    tx, ty = as_quad(tx), as_quad(ty)
    xl = max(tx[0, 0], ty[0, 0])
    xr = min(tx[1, 0], ty[1, 0])
    if not xl < xr:
        raise DegenerateIntersection(f"no horizontal overlap ({xl} >= {xr})")
    top_l = max(_edge_y(tx[0], tx[1], xl), _edge_y(ty[0], ty[1], xl))
    top_r = max(_edge_y(tx[0], tx[1], xr), _edge_y(ty[0], ty[1], xr))
    bot_l = min(_edge_y(tx[3], tx[2], xl), _edge_y(ty[3], ty[2], xl))
    bot_r = min(_edge_y(tx[3], tx[2], xr), _edge_y(ty[3], ty[2], xr))
    if not (top_l < bot_l and top_r < bot_r):
        raise DegenerateIntersection("trapezoids do not overlap vertically")
    return np.array([[xl, top_l], [xr, top_r], [xr, bot_r], [xl, bot_l]])
