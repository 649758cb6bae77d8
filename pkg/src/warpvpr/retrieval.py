"""Gallery index, nearest-neighbour shortlist, dense re-ranking and recall@N."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, replace

import numpy as np

from .encoder import global_descriptors, local_features
from .errors import EmptyIndex, InsufficientResults, MixedCoordinateKinds, ShapeMismatch, UnreadableImage
from .regressor import warp_pair
from .tensor import no_grad

log = logging.getLogger(__name__)

EARTH_RADIUS_M = 6371000.0
MODES = ("global", "no-warp", "warp")


@dataclass(frozen=True)
class Position:
    """Planar metres (a=x, b=y) or geographic degrees (a=lat, b=lon)."""

    a: float
    b: float
    kind: str = "planar"

    def __post_init__(self):
        if self.kind not in ("planar", "geographic"):
            raise ValueError(f"unknown coordinate kind {self.kind!r}")
        if not (math.isfinite(self.a) and math.isfinite(self.b)):
            raise ValueError("position must be finite")
        if self.kind == "geographic" and not (-90.0 <= self.a <= 90.0 and -180.0 <= self.b <= 180.0):
            raise ValueError(f"lat/lon out of range: {self.a}, {self.b}")

    @classmethod
    def planar(cls, x, y):
        return cls(float(x), float(y), "planar")

    @classmethod
    def geographic(cls, lat, lon):
        return cls(float(lat), float(lon), "geographic")

    @property
    def xy(self):
        return (self.a, self.b)


@dataclass(frozen=True)
class GeoImage:
    path: str
    position: Position
    split: str = ""


def geo_distance(p, q):
    """Metres between two positions of the same kind.

    Geographic positions use the equirectangular approximation about the
    mean latitude.
    """
    if p.kind != q.kind:
        raise MixedCoordinateKinds(f"cannot compare {p.kind} with {q.kind} positions")
    if p.kind == "planar":
        return math.hypot(p.a - q.a, p.b - q.b)
    phi1, phi2 = math.radians(p.a), math.radians(q.a)
    dphi = phi2 - phi1
    dlam = math.radians(q.b - p.b)
    return EARTH_RADIUS_M * math.sqrt(dphi ** 2 + (math.cos((phi1 + phi2) / 2.0) * dlam) ** 2)


@dataclass
class GalleryIndex:
    descriptors: np.ndarray
    items: list

    def __len__(self):
        return len(self.items)


@dataclass(frozen=True)
class RankedResult:
    gallery: int
    global_similarity: float
    dense_score: float | None = None
    rank: int = 0


def build_index(gallery, encoder, loader, lenient=False, gem_p=3.0):
    """Descriptor matrix for ``gallery`` (GeoImage items) in input order.

    ``loader(path)`` returns a [3, H, W] array. Unreadable images raise,
    unless ``lenient`` in which case they are logged and left out.
    """
    images, kept = [], []
    for item in gallery:
        try:
            images.append(loader(item.path))
        except (OSError, ValueError) as exc:
            if not lenient:
                raise UnreadableImage(item.path, str(exc)) from exc
            log.warning("skipping unreadable image %s: %s", item.path, exc)
            continue
        kept.append(item)
    desc = global_descriptors(encoder, images, gem_p) if images else np.zeros((0, encoder.out_channels), encoder.dtype)
    return GalleryIndex(desc, kept)


def knn_search(index, query_desc, top=5):
    """Exact top-``top`` by inner product; ties keep gallery order."""
    if len(index) == 0:
        raise EmptyIndex("gallery index is empty")
    if top < 1:
        raise ValueError("top must be >= 1")
    sims = index.descriptors @ np.asarray(query_desc, dtype=index.descriptors.dtype)
    order = np.argsort(-sims, kind="stable")[:top]
    return [RankedResult(int(g), float(sims[g]), None, r + 1) for r, g in enumerate(order)]


def rerank_score(fq, fp):
    """Sum over the grid of per-location inner products (larger = more similar)."""
    fq = np.asarray(getattr(fq, "data", fq))
    fp = np.asarray(getattr(fp, "data", fp))
    if fq.shape != fp.shape:
        raise ShapeMismatch(f"feature grids differ: {fq.shape} vs {fp.shape}")
    return float((fq.astype(np.float64) * fp.astype(np.float64)).sum())


def _dense_features(encoder, img, grid):
    with no_grad():
        return local_features(encoder, img, grid).data


def rerank_shortlist(query_img, shortlist, gallery_image, encoder, regressor=None, mode="warp", grid=15):
    """Re-order ``shortlist`` by dense score against ``query_img``.

    ``gallery_image(i)`` loads gallery item ``i``. Modes: ``warp`` scores
    the pairwise-warped images, ``no-warp`` the raw images, ``global``
    keeps the global order. Entries whose scoring fails keep their global
    rank and sort after every scored entry.
    """
    if not shortlist:
        raise ValueError("shortlist is empty")
    if mode == "global":
        return [replace(r, rank=i + 1) for i, r in enumerate(shortlist)]
    if mode not in ("warp", "no-warp"):
        raise ValueError(f"unknown mode {mode!r}")
    if mode == "warp" and regressor is None:
        raise ValueError("warp mode needs a regressor")
    grid = regressor.grid if regressor is not None else grid

    q_feat = _dense_features(encoder, query_img, grid) if mode == "no-warp" else None
    scored, failed = [], []
    for pos, entry in enumerate(shortlist):
        try:
            g_img = gallery_image(entry.gallery)
            if mode == "warp":
                with no_grad():
                    _, _, wq, wp = warp_pair(encoder, regressor, query_img, g_img)
                score = rerank_score(_dense_features(encoder, wq.data, grid), _dense_features(encoder, wp.data, grid))
            else:
                score = rerank_score(q_feat, _dense_features(encoder, g_img, grid))
        except Exception as exc:  # noqa: BLE001 - one bad entry must not sink the query
            log.warning("re-ranking failed for gallery item %d: %s", entry.gallery, exc)
            failed.append((pos, entry))
            continue
        scored.append((-score, pos, replace(entry, dense_score=score)))
    scored.sort(key=lambda t: (t[0], t[1]))
    ordered = [e for _, _, e in scored] + [e for _, e in failed]
    return [replace(e, rank=i + 1) for i, e in enumerate(ordered)]


def recall_at_n(ranked, query_positions, gallery_positions, n, threshold):
    """Percentage of queries with a top-``n`` gallery item within ``threshold`` metres.

    ``ranked[i]`` lists gallery indices (or RankedResult) for query ``i``.
    """
    if not ranked:
        return 0.0
    hits = 0
    for qi, results in enumerate(ranked):
        if len(results) < n:
            raise InsufficientResults(f"query {qi} has {len(results)} results, need {n}")
        for r in results[:n]:
            g = r.gallery if isinstance(r, RankedResult) else int(r)
            if geo_distance(query_positions[qi], gallery_positions[g]) <= threshold:
                hits += 1
                break
    return 100.0 * hits / len(ranked)


def evaluate(query_images, query_positions, index, gallery_image, encoder, regressor,
             thresholds=(10.0, 25.0, 50.0), top=5, modes=MODES, gem_p=3.0):
    """Recall@1 and recall@top per mode and threshold.

    Returns ``(rows, rankings)`` where rows are dicts with keys mode,
    threshold, recall@1, recall@5 and rankings maps mode -> per-query lists.
    """
    gallery_positions = [item.position for item in index.items]
    q_desc = global_descriptors(encoder, query_images, gem_p)
    shortlists = [knn_search(index, d, top) for d in q_desc]
    rankings = {}
    for mode in modes:
        rankings[mode] = [
            rerank_shortlist(img, sl, gallery_image, encoder, regressor, mode)
            for img, sl in zip(query_images, shortlists)
        ]
    rows = []
    for mode in modes:
        for t in thresholds:
            rows.append({
                "mode": mode,
                "threshold": float(t),
                "recall@1": recall_at_n(rankings[mode], query_positions, gallery_positions, 1, t),
                f"recall@{top}": recall_at_n(rankings[mode], query_positions, gallery_positions, top, t),
            })
    return rows, rankings
