"""Command-line entry point: ``warpvpr <command> [options]``.

Commands chain through files: gen-synth writes images and a manifest,
train-encoder and train-warp write checkpoints, index writes the gallery
descriptors, rank and eval write CSV reports (eval also a bar chart).
Exit status is 0 on success, 1 on usage errors, 2 on runtime errors.
"""
from __future__ import annotations

import argparse
import csv
import io as _io
import logging
import sys
from pathlib import Path

import numpy as np

from .encoder import Encoder, TripletConfig, global_descriptors, train_encoder_triplet
from .errors import MissingFile, ParseError, WarpVPRError
from .io import (
    RunConfig,
    atomic_write_text,
    load_checkpoint,
    load_config,
    load_image,
    load_manifest,
    save_checkpoint,
    save_image,
    save_manifest,
)
from .regressor import Regressor, quads_from_prediction, predict
from .retrieval import GalleryIndex, GeoImage, Position, evaluate, knn_search, rerank_shortlist
from .synthworld import gen_world
from .tensor import no_grad
from .training import mine_pairs, train_warp

log = logging.getLogger("warpvpr")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


# ----------------------------------------------------------------------------
# helpers


def _ints(text):
    return tuple(int(v) for v in str(text).split(",") if v.strip())


def _floats(text):
    try:
        return tuple(float(v) for v in str(text).split(",") if v.strip())
    except ValueError as exc:
        raise UsageError(f"expected comma-separated numbers, got {text!r}") from exc


def _config(args):
    cfg = load_config(args.config) if args.config else RunConfig()
    for key, value in vars(args).items():
        if value is not None and hasattr(cfg, key) and key not in ("config",):
            setattr(cfg, key, value)
    return cfg


def _meta(kind, cfg, **extra):
    meta = {"model_kind": kind, "config_hash": cfg.digest()}
    meta.update(extra)
    return meta


def _load_encoder(path):
    arrays, meta = load_checkpoint(path)
    if meta.get("model_kind") != "encoder":
        raise ParseError(f"{path} is not an encoder checkpoint")
    enc = Encoder.from_arrays(arrays)
    enc.freeze()
    return enc


def _load_regressor(path, cfg):
    if path is None:
        return Regressor(_ints(cfg.regressor_channels), _ints(cfg.regressor_strides), seed=cfg.seed)
    arrays, meta = load_checkpoint(path)
    if meta.get("model_kind") != "regressor":
        raise ParseError(f"{path} is not a regressor checkpoint")
    return Regressor.from_arrays(arrays, _ints(meta["strides"]) if "strides" in meta else None)


def _images(ds, records):
    return [load_image(ds.resolve(r.path)) for r in records]


def _split(ds, tag):
    idx = ds.indices(tag)
    return [ds.records[i] for i in idx], [ds.positions[i] for i in idx]


def _xy(positions):
    return np.array([p.xy for p in positions], dtype=np.float64).reshape(-1, 2)


def _csv_text(header, rows):
    buf = _io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def _num(v):
    return "" if v is None else repr(float(v))


def _load_index(path):
    arrays, meta = load_checkpoint(path)
    if meta.get("model_kind") != "index":
        raise ParseError(f"{path} is not an index file")
    items = [GeoImage(p, Position.planar(x, y), "test_gallery") for p, (x, y) in zip(meta["paths"], meta["positions"])]
    return GalleryIndex(arrays["descriptors"], items), meta


# ----------------------------------------------------------------------------
# commands


def cmd_gen_synth(args, cfg):
    out = Path(args.out)
    records = []
    worlds = (("train", cfg.train_scenes, cfg.seed * 2 + 1, (0.0, 1.0e5)),
              ("test", cfg.scenes, cfg.seed * 2 + 2, (0.0, 0.0)))
    for split, n, seed, origin in worlds:
        if n == 0:
            continue
        world = gen_world(n, cfg.views_per_scene, cfg.spacing_m, seed=seed, split=split,
                          image_size=cfg.image_size, texture_size=cfg.texture_size, k=cfg.k, origin=origin)
        for i, e in enumerate(world.entries):
            rel = f"images/{e.name}.png"
            save_image(world.render(i), out / rel)
            records.append(GeoImage(rel, Position.planar(*e.position), e.split))
    save_manifest(records, out / "manifest.jsonl")
    print(f"wrote {len(records)} images and {out / 'manifest.jsonl'}")


def cmd_train_encoder(args, cfg):
    ds = load_manifest(args.manifest)
    q_rec, q_pos = _split(ds, "train_query")
    g_rec, g_pos = _split(ds, "train_gallery")
    enc = Encoder(_ints(cfg.encoder_channels), seed=cfg.seed)
    tcfg = TripletConfig(iterations=cfg.encoder_iterations, batch=cfg.encoder_batch, lr=cfg.encoder_lr,
                         margin=cfg.margin, gem_p=cfg.gem_p, seed=cfg.seed)
    losses = train_encoder_triplet(enc, _images(ds, q_rec), _xy(q_pos), _images(ds, g_rec), _xy(g_pos), tcfg)
    save_checkpoint(enc.params, _meta("encoder", cfg), args.out)
    if args.loss_csv:
        atomic_write_text(args.loss_csv, _csv_text(["iteration", "loss"], [(i, _num(v)) for i, v in enumerate(losses)]))
    print(f"encoder saved to {args.out}")


def cmd_mine_pairs(args, cfg):
    ds = load_manifest(args.manifest)
    enc = _load_encoder(args.encoder)
    q_rec, q_pos = _split(ds, "train_query")
    g_rec, g_pos = _split(ds, "train_gallery")
    qd = global_descriptors(enc, _images(ds, q_rec), cfg.gem_p)
    gd = global_descriptors(enc, _images(ds, g_rec), cfg.gem_p)
    pairs = mine_pairs(qd, _xy(q_pos), gd, _xy(g_pos), cfg.t_geo, cfg.t_feat)
    rows = [(q_rec[p.query].path, g_rec[p.gallery].path, _num(p.geo_distance), _num(p.feat_distance)) for p in pairs]
    atomic_write_text(args.out, _csv_text(["query", "gallery", "geo_distance", "feat_distance"], rows))
    print(f"{len(pairs)} pairs written to {args.out}")


def _read_pairs(path, ds):
    path = Path(path)
    if not path.is_file():
        raise MissingFile(f"pairs file not found: {path}")
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    cache = {}

    def img(p):
        if p not in cache:
            cache[p] = load_image(ds.resolve(p))
        return cache[p]

    try:
        return [(img(r["query"]), img(r["gallery"])) for r in rows]
    except KeyError as exc:
        raise ParseError(f"{path}: missing column {exc}") from exc


def cmd_train_warp(args, cfg):
    ds = load_manifest(args.manifest)
    enc = _load_encoder(args.encoder)
    corpus = _images(ds, [r for r in ds.records if r.split.startswith("train_")])
    pairs = _read_pairs(args.pairs, ds) if args.pairs else []
    reg = Regressor(_ints(cfg.regressor_channels), _ints(cfg.regressor_strides), seed=cfg.seed)
    records = train_warp(reg, enc, corpus, pairs, cfg.train_config())
    save_checkpoint(reg.params, _meta("regressor", cfg, strides=cfg.regressor_strides), args.out)
    if args.loss_csv:
        keys = ["iteration", "L_ss", "L_fw", "L_cons", "L_total"]
        rows = [[r["iteration"]] + [_num(r[k]) for k in keys[1:]] for r in records]
        atomic_write_text(args.loss_csv, _csv_text(keys, rows))
    if args.loss_plot:
        from .viz import plot_loss_curve

        plot_loss_curve(records, args.loss_plot)
    print(f"regressor saved to {args.out}")


def cmd_index(args, cfg):
    ds = load_manifest(args.manifest)
    enc = _load_encoder(args.encoder)
    rec, pos = _split(ds, args.split)
    desc = global_descriptors(enc, _images(ds, rec), cfg.gem_p)
    meta = _meta("index", cfg, paths=[r.path for r in rec], positions=[list(p.xy) for p in pos])
    save_checkpoint({"descriptors": desc}, meta, args.out)
    print(f"indexed {len(rec)} images into {args.out}")


def _query_set(ds, split):
    rec, pos = _split(ds, split)
    return rec, pos, _images(ds, rec)


def _gallery_loader(ds, index):
    cache = {}

    def get(i):
        if i not in cache:
            cache[i] = load_image(ds.resolve(index.items[i].path))
        return cache[i]

    return get


def cmd_rank(args, cfg):
    ds = load_manifest(args.manifest)
    enc = _load_encoder(args.encoder)
    reg = _load_regressor(args.regressor, cfg) if args.mode == "warp" else None
    index, _ = _load_index(args.index)
    q_rec, _, q_imgs = _query_set(ds, args.split)
    q_desc = global_descriptors(enc, q_imgs, cfg.gem_p)
    loader = _gallery_loader(ds, index)
    rows = []
    for rec, img, d in zip(q_rec, q_imgs, q_desc):
        ranked = rerank_shortlist(img, knn_search(index, d, cfg.top), loader, enc, reg, args.mode)
        rows += [(rec.path, r.rank, index.items[r.gallery].path, _num(r.global_similarity), _num(r.dense_score))
                 for r in ranked]
    atomic_write_text(args.out, _csv_text(["query", "rank", "gallery", "global_similarity", "dense_score"], rows))
    print(f"ranked {len(q_rec)} queries into {args.out}")


def cmd_eval(args, cfg):
    ds = load_manifest(args.manifest)
    enc = _load_encoder(args.encoder)
    reg = _load_regressor(args.regressor, cfg)
    index, _ = _load_index(args.index)
    _, q_pos, q_imgs = _query_set(ds, args.split)
    thresholds = _floats(cfg.thresholds)
    modes = tuple(args.modes.split(",")) if args.modes else ("global", "no-warp", "warp")
    rows, _ = evaluate(q_imgs, q_pos, index, _gallery_loader(ds, index), enc, reg, thresholds, cfg.top, modes,
                       cfg.gem_p)
    top_key = f"recall@{cfg.top}"
    table = [(r["mode"], f"{r['threshold']:g}", f"{r['recall@1']:.2f}", f"{r[top_key]:.2f}") for r in rows]
    atomic_write_text(args.out, _csv_text(["mode", "threshold", "recall@1", top_key], table))
    if args.plot:
        from .viz import plot_recall

        plot_recall(rows, args.plot)
    sys.stdout.write(_csv_text(["mode", "threshold", "recall@1", top_key], table))


def cmd_warp_viz(args, cfg):
    from .viz import emit_warp_visualization

    enc = _load_encoder(args.encoder)
    reg = _load_regressor(args.regressor, cfg)
    img_q, img_p = load_image(args.query), load_image(args.gallery)
    with no_grad():
        pred = predict(enc, reg, img_q, img_p).data[0]
    tq, tp = quads_from_prediction(pred, img_q.shape[-2:], img_p.shape[-2:])
    emit_warp_visualization(img_q, img_p, tq, tp, args.out)
    print(f"wrote {args.out}")


# ----------------------------------------------------------------------------
# argument parsing


def build_parser():
    parser = _Parser(prog="warpvpr", description="Place recognition with pairwise warping and dense re-ranking.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", metavar="command", parser_class=_Parser)
    sub.required = True

    def command(name, fn, help_text):
        p = sub.add_parser(name, help=help_text, description=help_text)
        p.add_argument("--config", help="key = value run configuration file")
        p.add_argument("--seed", type=int)
        p.set_defaults(fn=fn)
        return p

    p = command("gen-synth", cmd_gen_synth, "render the synthetic train and test worlds")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--scenes", type=int, help="test scenes")
    p.add_argument("--train-scenes", dest="train_scenes", type=int)
    p.add_argument("--views", dest="views_per_scene", type=int)
    p.add_argument("--image-size", dest="image_size", type=int)

    p = command("train-encoder", cmd_train_encoder, "train the encoder with a triplet loss on the train split")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--iterations", dest="encoder_iterations", type=int)
    p.add_argument("--loss-csv", dest="loss_csv")

    p = command("mine-pairs", cmd_mine_pairs, "mine weakly supervised query/gallery pairs")
    p.add_argument("--manifest", required=True)
    p.add_argument("--encoder", required=True)
    p.add_argument("--out", required=True)

    p = command("train-warp", cmd_train_warp, "train the warping regressor")
    p.add_argument("--manifest", required=True)
    p.add_argument("--encoder", required=True)
    p.add_argument("--pairs", help="CSV from mine-pairs; without it only the self-supervised loss is used")
    p.add_argument("--out", required=True)
    p.add_argument("--iterations", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--loss-csv", dest="loss_csv")
    p.add_argument("--loss-plot", dest="loss_plot")

    p = command("index", cmd_index, "compute gallery descriptors")
    p.add_argument("--manifest", required=True)
    p.add_argument("--encoder", required=True)
    p.add_argument("--split", default="test_gallery")
    p.add_argument("--out", required=True)

    for name, fn, text in (("rank", cmd_rank, "rank the gallery for every query"),
                           ("eval", cmd_eval, "recall@N report per re-ranking mode")):
        p = command(name, fn, text)
        p.add_argument("--manifest", required=True)
        p.add_argument("--encoder", required=True)
        p.add_argument("--regressor", help="regressor checkpoint; untrained if omitted")
        p.add_argument("--index", required=True)
        p.add_argument("--split", default="test_query")
        p.add_argument("--top", type=int)
        p.add_argument("--out", required=True)
        if name == "rank":
            p.add_argument("--mode", choices=("warp", "no-warp", "global"), default="warp")
        else:
            p.add_argument("--thresholds")
            p.add_argument("--modes", help="comma-separated subset of global,no-warp,warp")
            p.add_argument("--plot", help="PNG bar chart of recall@1")

    p = command("warp-viz", cmd_warp_viz, "draw a query/gallery pair with predicted quads and warps")
    p.add_argument("--encoder", required=True)
    p.add_argument("--regressor")
    p.add_argument("--query", required=True)
    p.add_argument("--gallery", required=True)
    p.add_argument("--out", required=True)
    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        cfg = _config(args)
        if cfg.top < 1:
            raise UsageError("--top must be >= 1")
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help
        return 0 if not exc.code else 1
    except WarpVPRError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        args.fn(args, cfg)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (WarpVPRError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
