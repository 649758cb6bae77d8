"""Figures: the 2x2 warp panel (pixel-exact, Pillow) and report plots (matplotlib)."""
from __future__ import annotations

import io

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
from PIL import Image, ImageDraw  # noqa: E402

from .errors import WriteError  # noqa: E402
from .geometry import as_quad, warp_image  # noqa: E402
from .io import atomic_write_bytes, to_uint8  # noqa: E402

GUTTER = 8
QUERY_COLOR = (230, 40, 40)
PRED_COLOR = (40, 200, 60)

MODE_COLORS = {"global": "#7f7f7f", "no-warp": "#1f77b4", "warp": "#d62728"}


def panel_layout(size_q, size_p):
    """Canvas (width, height) and the four panel origins for two (h, w) inputs."""
    mh = max(size_q[0], size_p[0])
    mw = max(size_q[1], size_p[1])
    origins = [(0, 0), (mw + GUTTER, 0), (0, mh + GUTTER), (mw + GUTTER, mh + GUTTER)]
    return (2 * mw + GUTTER, 2 * mh + GUTTER), origins


def _draw_quad(draw, quad, origin, color):
    q = as_quad(quad)
    pts = [(origin[0] + float(x), origin[1] + float(y)) for x, y in q]
    draw.line(pts + [pts[0]], fill=color, width=1)


def render_warp_panel(img_q, img_p, t_q, t_p):
    """Originals with their quads on top, warped images below."""
    img_q, img_p = np.asarray(img_q), np.asarray(img_p)
    warped_q = warp_image(img_q, as_quad(t_q))
    warped_p = warp_image(img_p, as_quad(t_p))
    size, origins = panel_layout(img_q.shape[-2:], img_p.shape[-2:])
    canvas = Image.new("RGB", size, (255, 255, 255))
    for arr, origin in zip((img_q, img_p, warped_q, warped_p), origins):
        canvas.paste(Image.fromarray(to_uint8(arr), "RGB"), origin)
    draw = ImageDraw.Draw(canvas)
    _draw_quad(draw, t_q, origins[0], QUERY_COLOR)
    _draw_quad(draw, t_p, origins[1], PRED_COLOR)
    return canvas


def emit_warp_visualization(img_q, img_p, t_q, t_p, out_path):
    canvas = render_warp_panel(img_q, img_p, t_q, t_p)
    buf = io.BytesIO()
    try:
        canvas.save(buf, format="PNG")
    except OSError as exc:
        raise WriteError(str(exc)) from exc
    atomic_write_bytes(out_path, buf.getvalue())
    return out_path


def _save(fig, out_path):
    buf = io.BytesIO()
    fig.savefig(buf, format="png", dpi=120, metadata={"Software": None})
    plt.close(fig)
    atomic_write_bytes(out_path, buf.getvalue())
    return out_path


def plot_recall(rows, out_path, metric="recall@1"):
    """Grouped bars: one group per threshold, one bar per mode."""
    modes = list(dict.fromkeys(r["mode"] for r in rows))
    thresholds = sorted({r["threshold"] for r in rows})
    fig, ax = plt.subplots(figsize=(6, 3.6))
    width = 0.8 / max(len(modes), 1)
    x = np.arange(len(thresholds))
    for i, mode in enumerate(modes):
        vals = [next(r[metric] for r in rows if r["mode"] == mode and r["threshold"] == t) for t in thresholds]
        ax.bar(x + (i - (len(modes) - 1) / 2) * width, vals, width, label=mode,
               color=MODE_COLORS.get(mode))
    ax.set_xticks(x)
    ax.set_xticklabels([f"{t:g} m" for t in thresholds])
    ax.set_ylabel(f"{metric} (%)")
    ax.set_ylim(0, 100)
    ax.legend(frameon=False, fontsize=8)
    for side in ("top", "right"):
        ax.spines[side].set_visible(False)
    fig.tight_layout()
    return _save(fig, out_path)


def plot_loss_curve(records, out_path, smooth=50):
    fig, ax = plt.subplots(figsize=(6, 3.6))
    its = np.array([r["iteration"] for r in records])
    for key in ("L_ss", "L_fw", "L_cons", "L_total"):
        vals = np.array([np.nan if r.get(key) is None else r[key] for r in records], dtype=float)
        if np.all(np.isnan(vals)):
            continue
        if smooth > 1 and len(vals) >= smooth:
            kernel = np.ones(smooth) / smooth
            vals = np.convolve(np.nan_to_num(vals), kernel, mode="valid")
            ax.plot(its[smooth - 1:], vals, label=key, lw=1)
        else:
            ax.plot(its, vals, label=key, lw=1)
    ax.set_xlabel("iteration")
    ax.set_ylabel("loss")
    ax.set_yscale("log")
    ax.legend(frameon=False, fontsize=8)
    fig.tight_layout()
    return _save(fig, out_path)
