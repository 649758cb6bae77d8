"""Procedural planar-facade world with exact ground-truth geometry.

Every scene is a 2-D texture placed at a planar position. A view is a
vertical-sided trapezoid on that texture rendered to a small image, then
photometrically jittered and partially occluded. Because all views of a
scene look at the same plane, the homography between any two of them is
known exactly.
"""
from __future__ import annotations

import functools
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import gaussian_filter, zoom

from .geometry import frame_corners, homography_from_quad, sample_quad, warp_image

# shared by all scenes so that colour statistics alone do not identify a place
PALETTE = np.array([
    [0.80, 0.75, 0.65], [0.55, 0.35, 0.25], [0.30, 0.32, 0.38], [0.85, 0.85, 0.80],
    [0.20, 0.25, 0.30], [0.65, 0.55, 0.40], [0.45, 0.50, 0.55], [0.70, 0.40, 0.30],
])

MAX_OCCLUDED = 0.15


@dataclass(frozen=True)
class SynthScene:
    seed: int
    position: tuple
    size: int = 512

    def texture(self):
        return make_texture(self.seed, self.size)


@dataclass(frozen=True)
class ViewSpec:
    quad: np.ndarray = field(compare=False)
    brightness: float = 0.0
    contrast: float = 1.0
    color_shift: tuple = (0.0, 0.0, 0.0)
    occluders: tuple = ()  # (x0, y0, x1, y1, r, g, b) in output pixels
    offset: tuple = (0.0, 0.0)

    @property
    def is_photometric_identity(self):
        return self.brightness == 0.0 and self.contrast == 1.0 and not any(self.color_shift)


@dataclass(frozen=True)
class WorldEntry:
    scene: int
    spec: ViewSpec
    split: str
    position: tuple
    name: str


@dataclass
class SynthWorld:
    scenes: list
    entries: list
    image_size: int

    def render(self, i):
        e = self.entries[i]
        img, _ = render_view(self.scenes[e.scene], e.spec, (self.image_size, self.image_size))
        return img

    def split(self, tag):
        return [i for i, e in enumerate(self.entries) if e.split == tag]


@functools.lru_cache(maxsize=256)
def _texture_cached(seed, size):
    rng = np.random.default_rng([seed, 0x7E7])
    n_colors = len(PALETTE)
    tex = np.empty((3, size, size))
    tex[:] = PALETTE[rng.integers(n_colors)][:, None, None]

    # large facade blocks
    for _ in range(rng.integers(3, 6)):
        x0, y0 = rng.integers(0, size - 64, 2)
        bw, bh = rng.integers(96, 256, 2)
        tex[:, y0:y0 + bh, x0:x0 + bw] = PALETTE[rng.integers(n_colors)][:, None, None]

    # stripes
    if rng.random() < 0.7:
        period = int(rng.integers(40, 96))
        width = int(rng.integers(8, period // 2))
        col = PALETTE[rng.integers(n_colors)][:, None, None]
        y0 = int(rng.integers(0, period))
        for y in range(y0, size, period):
            if rng.random() < 0.7:
                tex[:, y:y + width, :] = 0.6 * tex[:, y:y + width, :] + 0.4 * col

    # window-like rectangles
    for _ in range(rng.integers(12, 24)):
        w, h = rng.integers(20, 70, 2)
        x0, y0 = rng.integers(0, size - 20, 2)
        tex[:, y0:y0 + h, x0:x0 + w] = PALETTE[rng.integers(n_colors)][:, None, None]

    # low-frequency noise octaves
    for cells, amp in ((4, 0.10), (8, 0.06), (16, 0.03)):
        coarse = rng.normal(0.0, amp, (3, cells, cells))
        tex += zoom(coarse, (1, size / cells, size / cells), order=1)[:, :size, :size]

    tex = gaussian_filter(tex, sigma=(0, 4.0, 4.0), mode="nearest")
    return np.clip(tex, 0.0, 1.0).astype(np.float32)


def make_texture(seed, size=512):
    """Deterministic 3 x size x size facade texture in [0, 1]."""
    tex = _texture_cached(int(seed), int(size))
    return tex.copy()


def _occluder_mask(spec, out_size):
    h, w = out_size
    mask = np.zeros((h, w), dtype=bool)
    for x0, y0, x1, y1, *_ in spec.occluders:
        mask[int(y0):int(y1), int(x0):int(x1)] = True
    return mask


def render_view(scene, spec, out_size=None):
    """Render one view; returns ``(image, ground_truth)``.

    ``ground_truth`` holds the view quad on the scene texture, from which the
    homography between any two views of the same scene follows.
    """
    base = make_texture(scene.seed, scene.size)
    out_size = out_size or base.shape[1:]
    img = warp_image(base, spec.quad, out_size)
    if not spec.is_photometric_identity:
        shift = np.asarray(spec.color_shift, dtype=img.dtype)[:, None, None]
        img = np.clip((img - 0.5) * spec.contrast + 0.5 + spec.brightness + shift, 0.0, 1.0)
    for x0, y0, x1, y1, r, g, b in spec.occluders:
        img[:, int(y0):int(y1), int(x0):int(x1)] = np.array([r, g, b], dtype=img.dtype)[:, None, None]
    img = img.astype(np.float32)
    return img, {"quad": np.array(spec.quad, dtype=np.float64), "texture_size": scene.size,
                 "occluded_fraction": float(_occluder_mask(spec, out_size).mean())}


def _random_occluders(rng, out_size, max_count=3):
    h, w = out_size
    occ = []
    budget = MAX_OCCLUDED * h * w
    for _ in range(int(rng.integers(0, max_count + 1))):
        area = rng.uniform(0.02, 0.05) * h * w
        if area > budget:
            break
        aspect = rng.uniform(0.5, 2.0)
        ow = int(min(w, max(2, round(math.sqrt(area * aspect)))))
        oh = int(min(h, max(2, round(area / ow))))
        x0 = int(rng.integers(0, w - ow + 1))
        y0 = int(rng.integers(0, h - oh + 1))
        color = rng.uniform(0.0, 1.0, 3)
        occ.append((x0, y0, x0 + ow, y0 + oh, *map(float, color)))
        budget -= ow * oh
    return tuple(occ)


def random_view_spec(rng, texture_size, out_size, k=0.6, jitter=True, occluders=True, max_offset=5.0):
    quad = sample_quad(rng, k, texture_size, texture_size)
    if jitter:
        brightness = float(rng.uniform(-0.1, 0.1))
        contrast = float(rng.uniform(0.8, 1.2))
        shift = tuple(float(v) for v in rng.uniform(-0.05, 0.05, 3))
    else:
        brightness, contrast, shift = 0.0, 1.0, (0.0, 0.0, 0.0)
    occ = _random_occluders(rng, out_size) if occluders else ()
    r = max_offset * math.sqrt(rng.uniform())
    ang = rng.uniform(0.0, 2.0 * math.pi)
    return ViewSpec(quad, brightness, contrast, shift, occ, (r * math.cos(ang), r * math.sin(ang)))


def gen_world(n_scenes, views_per_scene=4, spacing_m=100.0, seed=0, split="test",
              image_size=128, texture_size=512, k=0.6, origin=(0.0, 0.0)):
    """Scenes on a square grid, one gallery view and ``views_per_scene - 1``
    query views each; split tags are ``{split}_gallery`` / ``{split}_query``."""
    if n_scenes < 2:
        raise ValueError("need at least two scenes")
    if views_per_scene < 2:
        raise ValueError("need a gallery view and at least one query view per scene")
    ss = np.random.SeedSequence([int(seed), 0x5CE7E])
    children = ss.spawn(n_scenes)
    cols = math.ceil(math.sqrt(n_scenes))
    size = (image_size, image_size)
    scenes, entries = [], []
    for i, child in enumerate(children):
        scene_seed = int(child.generate_state(1)[0])
        pos = (origin[0] + (i % cols) * spacing_m, origin[1] + (i // cols) * spacing_m)
        scenes.append(SynthScene(scene_seed, pos, texture_size))
        rng = np.random.default_rng(child)
        for v in range(views_per_scene):
            gallery = v == 0
            spec = random_view_spec(rng, texture_size, size, k=k, jitter=True, occluders=not gallery)
            vpos = (pos[0] + spec.offset[0], pos[1] + spec.offset[1])
            tag = f"{split}_gallery" if gallery else f"{split}_query"
            entries.append(WorldEntry(i, spec, tag, vpos, f"{split}_s{i:04d}_v{v}"))
    return SynthWorld(scenes, entries, image_size)


def view_homography(spec_a, spec_b, out_size):
    """Homography mapping view-A pixel coordinates to view-B pixel coordinates."""
    h, w = out_size
    corners = frame_corners(w, h)
    to_tex = homography_from_quad(corners, spec_a.quad)
    from_tex = homography_from_quad(spec_b.quad, corners)
    return from_tex @ to_tex
