"""Reference implementations used to check the library.

Everything here is written independently of ``warpvpr`` (plain loops,
closed forms, brute force) so that agreement means something.
"""
import math

import numpy as np


def central_diff(f, x, h=1e-6):
    """Numerical gradient of scalar ``f`` at array ``x`` (float64)."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = f(x.copy())
        flat[i] = old - h
        fm = f(x.copy())
        flat[i] = old
        gf[i] = (fp - fm) / (2 * h)
    return g


def fd_rel_err(f, x, g, h=1e-6):
    """Relative error of gradient ``g`` for a piecewise-smooth ``f``.

    Bilinear sampling and ReLU are only piecewise differentiable, so near a
    kink the central difference averages two slopes. Each component is
    compared against the central, forward and backward differences and the
    closest one counts; away from kinks all three agree.
    """
    x = np.array(x, dtype=np.float64)
    g = np.asarray(g, dtype=np.float64).reshape(-1)
    f0 = f(x.copy())
    flat = x.reshape(-1)
    best = np.zeros_like(g)
    scale = 0.0
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = f(x.copy())
        flat[i] = old - h
        fm = f(x.copy())
        flat[i] = old
        cands = np.array([(fp - fm) / (2 * h), (fp - f0) / h, (f0 - fm) / h])
        best[i] = np.abs(cands - g[i]).min()
        scale = max(scale, abs(cands[0]), abs(g[i]))
    return float(best.max() / max(scale, 1e-12))


def rel_err(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return float(np.abs(a - b).max() / max(np.abs(a).max(), np.abs(b).max(), 1e-12))


def conv2d_loops(x, w, b, stride, pad):
    n, c, hh, ww = x.shape
    o, _, kh, kw = w.shape
    xp = np.zeros((n, c, hh + 2 * pad, ww + 2 * pad))
    xp[:, :, pad:pad + hh, pad:pad + ww] = x
    ho = (hh + 2 * pad - kh) // stride + 1
    wo = (ww + 2 * pad - kw) // stride + 1
    out = np.zeros((n, o, ho, wo))
    for a in range(n):
        for oc in range(o):
            for i in range(ho):
                for j in range(wo):
                    patch = xp[a, :, i * stride:i * stride + kh, j * stride:j * stride + kw]
                    out[a, oc, i, j] = (patch * w[oc]).sum() + b[oc]
    return out


def correlation_loops(fq, fp):
    """c[k, i, j] = <fq[:, i, j], fp[:, i_k, j_k]>, k = i_k * w + j_k."""
    c, h, w = fq.shape
    out = np.zeros((h * w, h, w))
    for i in range(h):
        for j in range(w):
            for ik in range(h):
                for jk in range(w):
                    s = 0.0
                    for ch in range(c):
                        s += fq[ch, i, j] * fp[ch, ik, jk]
                    out[ik * w + jk, i, j] = s
    return out


def mine_loops(q_desc, q_pos, g_desc, g_pos, t_geo, t_feat):
    out = set()
    for qi in range(len(q_desc)):
        for gi in range(len(g_desc)):
            geo = math.sqrt(sum((q_pos[qi][d] - g_pos[gi][d]) ** 2 for d in range(2)))
            feat = sum((q_desc[qi][d] - g_desc[gi][d]) ** 2 for d in range(len(q_desc[qi])))
            if geo < t_geo and feat < t_feat:
                out.add((qi, gi))
    return out


def haversine(lat1, lon1, lat2, lon2, r=6371000.0):
    p1, p2 = math.radians(lat1), math.radians(lat2)
    dp = p2 - p1
    dl = math.radians(lon2 - lon1)
    a = math.sin(dp / 2) ** 2 + math.cos(p1) * math.cos(p2) * math.sin(dl / 2) ** 2
    return 2 * r * math.asin(math.sqrt(a))


def adam_step(x, g, m, v, t, lr, b1=0.9, b2=0.999, eps=1e-8):
    m = b1 * m + (1 - b1) * g
    v = b2 * v + (1 - b2) * g * g
    mhat = m / (1 - b1 ** t)
    vhat = v / (1 - b2 ** t)
    return x - lr * mhat / (math.sqrt(vhat) + eps), m, v


def bilinear_at(img, x, y):
    """Sample [C, H, W] at continuous (x, y); pixel centres at +0.5, zeros outside."""
    c, h, w = img.shape
    u, v = x - 0.5, y - 0.5
    x0, y0 = math.floor(u), math.floor(v)
    out = np.zeros(c)
    for dy in (0, 1):
        for dx in (0, 1):
            xi, yi = x0 + dx, y0 + dy
            wx = (u - x0) if dx else (1 - (u - x0))
            wy = (v - y0) if dy else (1 - (v - y0))
            if 0 <= xi < w and 0 <= yi < h:
                out += wx * wy * img[:, yi, xi]
    return out


def homography_4pt(src, dst):
    """Plain 8x8 DLT solve with h33 = 1 (no conditioning)."""
    a, b = [], []
    for (x, y), (u, v) in zip(src, dst):
        a.append([x, y, 1, 0, 0, 0, -u * x, -u * y])
        a.append([0, 0, 0, x, y, 1, -v * x, -v * y])
        b += [u, v]
    h = np.linalg.solve(np.array(a, float), np.array(b, float))
    return np.append(h, 1.0).reshape(3, 3)


def project(H, x, y):
    p = H @ np.array([x, y, 1.0])
    return p[0] / p[2], p[1] / p[2]


# ----------------------------------------------------------------------------
# trapezoid rasterization


def _inside_trapezoid(q, xs, ys):
    """Boolean mask of points inside a vertical-sided trapezoid (TL, TR, BR, BL)."""
    (x1, y1), (x2, y2), (_, y3), (_, y4) = q
    t = (xs - x1) / (x2 - x1)
    top = y1 + t * (y2 - y1)
    bot = y4 + t * (y3 - y4)
    return (xs >= x1) & (xs <= x2) & (ys >= top) & (ys <= bot)


def raster_check_tz(tx, ty, tz, w, h, n=2048):
    """Rasterize on an ``n x n`` lattice over the frame.

    Returns (contained, width_ok): every lattice point inside ``tz`` is inside
    both inputs, and the columns where the two inputs overlap span no wider
    than ``tz`` (up to one lattice step).
    """
    xs = (np.arange(n) + 0.5) * w / n
    ys = (np.arange(n) + 0.5) * h / n
    gx, gy = np.meshgrid(xs, ys)
    in_z = _inside_trapezoid(tz, gx, gy)
    both = _inside_trapezoid(tx, gx, gy) & _inside_trapezoid(ty, gx, gy)
    contained = not np.any(in_z & ~both)
    cols = np.flatnonzero(both.any(axis=0))
    if len(cols) == 0:
        return contained, True
    step = w / n
    width_ok = xs[cols[0]] >= tz[0][0] - step and xs[cols[-1]] <= tz[1][0] + step
    return contained, bool(width_ok)
