"""Manifests, checkpoints, run configuration and image files."""
from __future__ import annotations

import hashlib
import json
import math
import os
import struct
import tempfile
from collections import OrderedDict
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import (
    BadMagic,
    CorruptOffsets,
    MissingFile,
    MixedCoordinateKinds,
    ParseError,
    TensorNameCollision,
    UnreadableImage,
    VersionUnsupported,
    WriteError,
)
from .retrieval import EARTH_RADIUS_M, GeoImage, Position
from .tensor import ParameterSet
from .training import TrainConfig

SPLITS = ("train_query", "train_gallery", "test_query", "test_gallery")


# ----------------------------------------------------------------------------
# atomic writes


def atomic_write_bytes(path, data):
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except OSError as exc:
        raise WriteError(f"cannot write {path}: {exc}") from exc


def atomic_write_text(path, text):
    atomic_write_bytes(path, text.encode("utf-8"))


# ----------------------------------------------------------------------------
# images


def load_image(path):
    """RGB file -> float32 [3, H, W] in [0, 1]."""
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.float32)
    except (OSError, ValueError) as exc:
        raise UnreadableImage(str(path), str(exc)) from exc
    return np.ascontiguousarray(arr.transpose(2, 0, 1) / 255.0)


def to_uint8(img):
    img = np.asarray(img)
    return np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8).transpose(1, 2, 0)


def save_image(img, path):
    buf = _png_bytes(Image.fromarray(to_uint8(img), "RGB"))
    atomic_write_bytes(path, buf)


def _png_bytes(image):
    import io as _io

    out = _io.BytesIO()
    image.save(out, format="PNG", optimize=False)
    return out.getvalue()


# ----------------------------------------------------------------------------
# manifests


@dataclass
class Dataset:
    """Manifest records plus their positions converted to planar metres."""

    records: list
    root: Path
    positions: list = field(default_factory=list)
    origin: tuple | None = None  # (lat, lon) the planar frame is centred on

    def resolve(self, path):
        p = Path(path)
        return p if p.is_absolute() else self.root / p

    def indices(self, split):
        return [i for i, r in enumerate(self.records) if r.split == split]

    def split(self, tag):
        return [self.records[i] for i in self.indices(tag)]

    def planar(self, tag):
        return [self.positions[i] for i in self.indices(tag)]

    def __len__(self):
        return len(self.records)


def _record_from_json(obj, line):
    if not isinstance(obj, dict):
        raise ParseError("record is not an object", line)
    unknown = set(obj) - {"path", "x_m", "y_m", "lat", "lon", "split"}
    if unknown:
        raise ParseError(f"unknown fields {sorted(unknown)}", line)
    path = obj.get("path")
    if not isinstance(path, str) or not path:
        raise ParseError("missing path", line)
    split = obj.get("split")
    if split not in SPLITS:
        raise ParseError(f"bad split {split!r}", line)

    def num(key):
        v = obj.get(key)
        if v is None:
            return None
        if isinstance(v, bool) or not isinstance(v, (int, float)) or not math.isfinite(v):
            raise ParseError(f"{key} must be a finite number", line)
        return float(v)

    x, y, lat, lon = num("x_m"), num("y_m"), num("lat"), num("lon")
    planar = x is not None or y is not None
    geo = lat is not None or lon is not None
    if planar and geo:
        raise ParseError("record has both planar and geographic coordinates", line)
    try:
        if planar:
            if x is None or y is None:
                raise ParseError("planar record needs both x_m and y_m", line)
            pos = Position.planar(x, y)
        elif geo:
            if lat is None or lon is None:
                raise ParseError("geographic record needs both lat and lon", line)
            pos = Position.geographic(lat, lon)
        else:
            raise ParseError("record has no coordinates", line)
    except ValueError as exc:
        if isinstance(exc, ParseError):
            raise
        raise ParseError(str(exc), line) from exc
    return GeoImage(path, pos, split)


def _to_planar(records):
    kinds = {r.position.kind for r in records}
    if kinds != {"geographic"}:
        return [r.position for r in records], None
    lat0 = sum(r.position.a for r in records) / len(records)
    lon0 = sum(r.position.b for r in records) / len(records)
    c = math.cos(math.radians(lat0))
    out = []
    for r in records:
        x = EARTH_RADIUS_M * c * math.radians(r.position.b - lon0)
        y = EARTH_RADIUS_M * math.radians(r.position.a - lat0)
        out.append(Position.planar(x, y))
    return out, (lat0, lon0)


def load_manifest(path, check_paths=True):
    """Parse a JSON-Lines manifest; positions are unified to planar metres."""
    path = Path(path)
    if not path.is_file():
        raise MissingFile(f"manifest not found: {path}")
    records = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(f"invalid JSON: {exc.msg}", lineno) from exc
            records.append(_record_from_json(obj, lineno))
    if len({r.position.kind for r in records}) > 1:
        raise MixedCoordinateKinds("manifest mixes planar and geographic records")
    ds = Dataset(records, path.parent)
    if check_paths:
        for r in records:
            if not ds.resolve(r.path).is_file():
                raise MissingFile(f"image listed in manifest not found: {r.path}")
    ds.positions, ds.origin = _to_planar(records) if records else ([], None)
    return ds


def record_to_json(r):
    obj = {"path": r.path, "x_m": None, "y_m": None, "lat": None, "lon": None, "split": r.split}
    if r.position.kind == "planar":
        obj["x_m"], obj["y_m"] = r.position.a, r.position.b
    else:
        obj["lat"], obj["lon"] = r.position.a, r.position.b
    return json.dumps(obj)


def save_manifest(records, path):
    atomic_write_text(path, "".join(record_to_json(r) + "\n" for r in records))


# ----------------------------------------------------------------------------
# checkpoints

MAGIC = b"GWCK"
VERSION = 1
_DTYPES = {"f32": np.dtype("<f4"), "f64": np.dtype("<f8")}
_DTYPE_NAMES = {np.dtype(np.float32): "f32", np.dtype(np.float64): "f64"}


def _named_arrays(params):
    if isinstance(params, ParameterSet):
        return list(params.arrays().items())
    if isinstance(params, dict):
        return list(params.items())
    return list(params)


def checkpoint_bytes(params, meta):
    items = _named_arrays(params)
    seen = set()
    entries, chunks = [], []
    offset = 0
    for name, arr in items:
        if name in seen:
            raise TensorNameCollision(f"duplicate tensor name {name!r}")
        seen.add(name)
        arr = np.asarray(arr)
        if arr.dtype not in _DTYPE_NAMES:
            raise ValueError(f"{name}: unsupported dtype {arr.dtype}")
        code = _DTYPE_NAMES[arr.dtype]
        raw = np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "dtype": code,
                        "offset": offset, "byte_len": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    header = json.dumps({"tensors": entries, "meta": meta}, sort_keys=True, separators=(",", ":")).encode()
    return MAGIC + struct.pack("<HI", VERSION, len(header)) + header + b"".join(chunks)


def save_checkpoint(params, meta, path):
    atomic_write_bytes(path, checkpoint_bytes(params, meta))


def parse_checkpoint(blob):
    if len(blob) < 10 or blob[:4] != MAGIC:
        raise BadMagic("not a GWCK checkpoint")
    version, hlen = struct.unpack("<HI", blob[4:10])
    if version != VERSION:
        raise VersionUnsupported(f"checkpoint version {version} unsupported")
    if 10 + hlen > len(blob):
        raise CorruptOffsets("header length runs past end of file")
    try:
        header = json.loads(blob[10:10 + hlen].decode("utf-8"))
        entries = header["tensors"]
        meta = header.get("meta", {})
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError) as exc:
        raise CorruptOffsets(f"unreadable header: {exc}") from exc
    payload = memoryview(blob)[10 + hlen:]
    arrays = OrderedDict()
    spans = []
    for e in entries:
        try:
            name, shape, code = e["name"], tuple(int(s) for s in e["shape"]), e["dtype"]
            off, blen = int(e["offset"]), int(e["byte_len"])
        except (KeyError, TypeError, ValueError) as exc:
            raise CorruptOffsets(f"bad tensor entry: {exc}") from exc
        if name in arrays:
            raise TensorNameCollision(f"duplicate tensor name {name!r}")
        if code not in _DTYPES:
            raise CorruptOffsets(f"{name}: unknown dtype {code!r}")
        dt = _DTYPES[code]
        expected = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
        if blen != expected or off < 0 or off + blen > len(payload):
            raise CorruptOffsets(f"{name}: offset/length out of bounds")
        spans.append((off, off + blen, name))
        arrays[name] = np.frombuffer(payload[off:off + blen], dtype=dt).reshape(shape).astype(dt.newbyteorder("="))
    spans.sort()
    for (s0, e0, n0), (s1, _, n1) in zip(spans, spans[1:]):
        if s1 < e0:
            raise CorruptOffsets(f"tensors {n0!r} and {n1!r} overlap")
    return arrays, meta


def load_checkpoint(path):
    """-> (OrderedDict name -> array, meta dict)."""
    path = Path(path)
    if not path.is_file():
        raise MissingFile(f"checkpoint not found: {path}")
    return parse_checkpoint(path.read_bytes())


# ----------------------------------------------------------------------------
# run configuration


def _ints(text):
    return tuple(int(v) for v in str(text).split(",") if v.strip())


PATH_KEYS = ("manifest", "workdir")


@dataclass
class RunConfig:
    # warp training (defaults follow the published settings)
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
    # retrieval
    top: int = 5
    gem_p: float = 3.0
    thresholds: str = "10,25,50"
    # models
    encoder_channels: str = "16,32,64,64"
    regressor_channels: str = "128,128,64,64,32,32"
    regressor_strides: str = "1,2,1,2,1,2"
    # encoder training
    encoder_iterations: int = 500
    encoder_batch: int = 8
    encoder_lr: float = 1e-3
    margin: float = 0.1
    # synthetic world
    scenes: int = 50
    train_scenes: int = 50
    views_per_scene: int = 4
    spacing_m: float = 100.0
    image_size: int = 128
    texture_size: int = 512
    # paths
    manifest: str = ""
    workdir: str = ""

    def train_config(self):
        return TrainConfig(**{f: getattr(self, f) for f in TrainConfig.field_names()})

    def digest(self):
        """Hash of the settings that shape a model; paths are left out."""
        text = "".join(f"{k} = {v}\n" for k, v in asdict(self).items() if k not in PATH_KEYS)
        return hashlib.sha256(text.encode()).hexdigest()[:16]


def parse_config(text, source="<config>"):
    cfg = RunConfig()
    types = {f.name: f.type for f in fields(RunConfig)}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ParseError(f"{source}: expected 'key = value'", lineno)
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in types:
            raise ParseError(f"{source}: unknown key {key!r}", lineno)
        kind = types[key]
        try:
            if kind == "int":
                parsed = int(value)
            elif kind == "float":
                parsed = float(value)
            else:
                parsed = value
        except ValueError as exc:
            raise ParseError(f"{source}: bad value for {key}: {value!r}", lineno) from exc
        setattr(cfg, key, parsed)
    return cfg


def load_config(path):
    path = Path(path)
    if not path.is_file():
        raise MissingFile(f"config not found: {path}")
    return parse_config(path.read_text(encoding="utf-8"), str(path))


def dump_config(cfg):
    return "".join(f"{k} = {v}\n" for k, v in asdict(cfg).items())
