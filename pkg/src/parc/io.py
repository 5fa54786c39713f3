"""On-disk formats: snapshot files, dataset manifests, checkpoints and raster ingestion.

All binary layouts are little-endian with fixed field widths.  Floats are
written as float32 in snapshot files and float64 in checkpoints.
"""

from __future__ import annotations

import hashlib
import io as _io
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .autodiff import AdamState
from .dataset import ChannelStats, Dataset, compute_stats
from .errors import (DimensionError, FormatError, MagicError, NonFiniteError, TruncatedError,
                     ValidationError, VersionError)
from .fields import GridSpec, Trajectory, disk_mask

SNAPSHOT_MAGIC = b"PARCFLD1"
SNAPSHOT_VERSION = 1
CHECKPOINT_MAGIC = b"PARCCKP1"
CHECKPOINT_VERSION = 1
MANIFEST_SCHEMA = 1

_SNAP_HEADER = struct.Struct("<8sIIIIIddd")


def fmt(x):
    """Locale-independent float text that round-trips exactly."""
    return format(float(x), ".17g")


class _Reader:
    def __init__(self, data: bytes, what: str):
        self.data = data
        self.pos = 0
        self.what = what

    def take(self, n):
        if self.pos + n > len(self.data):
            raise TruncatedError(f"{self.what}: need {n} bytes at offset {self.pos}, "
                                 f"file has {len(self.data)}")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt_):
        s = struct.Struct(fmt_)
        return s.unpack(self.take(s.size))

    def string(self):
        (n,) = self.unpack("<I")
        return self.take(n).decode("utf-8")

    def done(self):
        if self.pos != len(self.data):
            raise FormatError(f"{self.what}: {len(self.data) - self.pos} trailing bytes")


def _string(s: str) -> bytes:
    b = s.encode("utf-8")
    return struct.pack("<I", len(b)) + b


# --- snapshot files -------------------------------------------------------------

def payload_nbytes(height, width, channels, steps):
    return 4 * steps * channels * height * width


def encode_trajectory(traj: Trajectory) -> bytes:
    g = traj.grid
    arr = traj.to_array()
    T, C, H, W = arr.shape
    buf = _io.BytesIO()
    buf.write(_SNAP_HEADER.pack(SNAPSHOT_MAGIC, SNAPSHOT_VERSION, H, W, C, T, g.dx, traj.dt, traj.t0))
    for name in traj.channel_names:
        buf.write(_string(name))
    buf.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return buf.getvalue()


def decode_trajectory(data: bytes, origin=(0.0, 0.0), constants=None, what="snapshot file"):
    r = _Reader(data, what)
    if len(data) >= 8 and data[:8] != SNAPSHOT_MAGIC:
        raise MagicError(f"{what}: bad magic {data[:8]!r}")
    magic, version, H, W, C, T, dx, dt, t0 = r.unpack(_SNAP_HEADER.format)
    if magic != SNAPSHOT_MAGIC:
        raise MagicError(f"{what}: bad magic {magic!r}")
    if version != SNAPSHOT_VERSION:
        raise VersionError(f"{what}: version {version}, expected {SNAPSHOT_VERSION}")
    names = tuple(r.string() for _ in range(C))
    payload = r.take(payload_nbytes(H, W, C, T))
    r.done()
    arr = np.frombuffer(payload, dtype="<f4").reshape(T, C, H, W).astype(np.float64)
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"{what}: payload contains non-finite values")
    grid = GridSpec(H, W, dx, origin)
    return Trajectory.from_array(arr, grid, dt, t0, names, constants)


def write_snapshot_file(traj: Trajectory, path):
    data = encode_trajectory(traj)
    with open(path, "wb") as fh:
        fh.write(data)
    return len(data)


def read_snapshot_file(path, origin=(0.0, 0.0), constants=None) -> Trajectory:
    """Load a trajectory.  The grid origin is not part of the file and comes from the caller."""
    return decode_trajectory(Path(path).read_bytes(), origin, constants, str(path))


# --- key=value text -----------------------------------------------------------------

def parse_kv(text, what="file"):
    """Ordered ``{key: value}`` from ``key=value`` lines; ``#`` starts a comment."""
    out = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise FormatError(f"{what} line {n}: expected key=value, got {line!r}")
        k, v = line.split("=", 1)
        k = k.strip()
        if not k:
            raise FormatError(f"{what} line {n}: empty key")
        if k in out:
            raise FormatError(f"{what} line {n}: duplicate key {k!r}")
        out[k] = v.strip()
    return out


def format_kv(items):
    return "".join(f"{k}={v}\n" for k, v in items)


# --- dataset manifests -------------------------------------------------------------

@dataclass
class DatasetManifest:
    split: str
    files: list
    constants: list  # one dict of floats per file
    stats: dict  # channel name -> ChannelStats
    dt: float
    origin: tuple = (0.0, 0.0)
    schema: int = MANIFEST_SCHEMA

    def to_text(self):
        items = [("schema", str(self.schema)), ("split", self.split),
                 ("dt", fmt(self.dt)), ("origin_x", fmt(self.origin[0])),
                 ("origin_y", fmt(self.origin[1])), ("n_trajectories", str(len(self.files)))]
        for i, (f, c) in enumerate(zip(self.files, self.constants)):
            items.append((f"file.{i}", str(f)))
            items.extend((f"const.{i}.{k}", fmt(v)) for k, v in c.items())
        items.append(("channels", ",".join(self.stats)))
        for name, s in self.stats.items():
            items.extend((f"stats.{name}.{k}", fmt(getattr(s, k))) for k in ("min", "max", "mean", "std"))
        return format_kv(items)

    @classmethod
    def from_text(cls, text, what="manifest"):
        kv = parse_kv(text, what)
        try:
            schema = int(kv["schema"])
            if schema != MANIFEST_SCHEMA:
                raise VersionError(f"{what}: schema {schema}, expected {MANIFEST_SCHEMA}")
            n = int(kv["n_trajectories"])
            files = [kv[f"file.{i}"] for i in range(n)]
            consts = []
            for i in range(n):
                pre = f"const.{i}."
                consts.append({k[len(pre):]: float(v) for k, v in kv.items() if k.startswith(pre)})
            names = [c for c in kv["channels"].split(",") if c]
            stats = {c: ChannelStats(*(float(kv[f"stats.{c}.{k}"]) for k in ("min", "max", "mean", "std")))
                     for c in names}
            m = cls(kv["split"], files, consts, stats, float(kv["dt"]),
                    (float(kv["origin_x"]), float(kv["origin_y"])), schema)
        except KeyError as e:
            raise FormatError(f"{what}: missing key {e.args[0]!r}") from None
        except ValueError as e:
            if isinstance(e, FormatError):
                raise
            raise FormatError(f"{what}: {e}") from None
        for s in m.stats.values():
            if not all(np.isfinite([s.min, s.max, s.mean, s.std])):
                raise FormatError(f"{what}: non-finite channel statistics")
        return m


def write_manifest(m: DatasetManifest, path):
    Path(path).write_text(m.to_text(), encoding="utf-8")


def read_manifest(path) -> DatasetManifest:
    return DatasetManifest.from_text(Path(path).read_text(encoding="utf-8"), str(path))


def save_dataset(ds: Dataset, directory, prefix="traj") -> Path:
    """Write every trajectory plus ``manifest.txt``; returns the manifest path.

    Statistics are recomputed from the f32-quantized data so they match what
    a reader will see.
    """
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    files, loaded = [], []
    origin = ds.trajectories[0].grid.origin
    for i, t in enumerate(ds.trajectories):
        name = f"{prefix}_{i:04d}.parcfld"
        data = encode_trajectory(t)
        (d / name).write_bytes(data)
        loaded.append(decode_trajectory(data, origin))
        files.append(name)
    stats = compute_stats(loaded)
    m = DatasetManifest(ds.split, files, [dict(t.constants) for t in ds.trajectories], stats,
                        ds.dt, origin)
    write_manifest(m, d / "manifest.txt")
    ds.files = files
    return d / "manifest.txt"


def load_dataset(manifest_path) -> Dataset:
    path = Path(manifest_path)
    m = read_manifest(path)
    trajs = []
    for f, c in zip(m.files, m.constants):
        p = path.parent / f
        if not p.exists():
            raise FormatError(f"manifest lists missing file {f}")
        trajs.append(read_snapshot_file(p, m.origin, c))
    return Dataset(trajs, m.split, dict(m.stats), list(m.files))


# --- checkpoints -------------------------------------------------------------------

def _block(name, arr) -> bytes:
    a = np.asarray(arr, dtype="<f8")  # keeps 0-d shapes; tobytes is C order
    head = _string(name) + struct.pack("<I", a.ndim) + struct.pack(f"<{a.ndim}Q", *a.shape)
    return head + a.tobytes()


def _read_block(r: _Reader):
    name = r.string()
    (ndim,) = r.unpack("<I")
    shape = r.unpack(f"<{ndim}Q") if ndim else ()
    n = int(np.prod(shape, dtype=np.int64)) if ndim else 1
    arr = np.frombuffer(r.take(8 * n), dtype="<f8").astype(np.float64).reshape(shape)
    return name, arr


def _blocks(d: dict) -> bytes:
    return struct.pack("<I", len(d)) + b"".join(_block(k, d[k]) for k in d)


def _read_blocks(r: _Reader):
    (n,) = r.unpack("<I")
    return dict(_read_block(r) for _ in range(n))


def params_digest(params: dict, prefix="diff.") -> bytes:
    """SHA-256 over the name, shape and float64 bytes of every block starting with ``prefix``."""
    h = hashlib.sha256()
    for k in sorted(params):
        if k.startswith(prefix):
            a = np.asarray(params[k], dtype="<f8")
            h.update(_block(k, a))
    return h.digest()


def config_digest(text: str) -> bytes:
    return hashlib.sha256(text.encode("utf-8")).digest()


@dataclass
class Checkpoint:
    stage: int
    params: dict
    seed: int = 0
    config_text: str = ""
    stage1_digest: bytes = bytes(32)
    optimizer: Optional[AdamState] = None
    extra: dict = field(default_factory=dict)  # float64 blocks such as normalization

    @property
    def config_digest(self):
        return config_digest(self.config_text)

    def theta_digest(self):
        return params_digest(self.params, "diff.")


def encode_checkpoint(ck: Checkpoint) -> bytes:
    if ck.stage not in (0, 1, 2):
        raise ValidationError(f"bad checkpoint stage {ck.stage}")
    if len(ck.stage1_digest) != 32:
        raise ValidationError("stage-1 digest must be 32 bytes")
    out = [CHECKPOINT_MAGIC, struct.pack("<IIQ", CHECKPOINT_VERSION, ck.stage, ck.seed),
           ck.config_digest, ck.stage1_digest, _string(ck.config_text),
           _blocks(ck.params), _blocks(ck.extra)]
    opt = ck.optimizer
    if opt is None:
        out.append(struct.pack("<B", 0))
    else:
        out.append(struct.pack("<BQdddd", 1, opt.step, opt.lr, opt.beta1, opt.beta2, opt.eps))
        out.append(_blocks(opt.m))
        out.append(_blocks(opt.v))
    return b"".join(out)


def decode_checkpoint(data: bytes, what="checkpoint") -> Checkpoint:
    r = _Reader(data, what)
    if len(data) >= 8 and data[:8] != CHECKPOINT_MAGIC:
        raise MagicError(f"{what}: bad magic {data[:8]!r}")
    r.take(8)
    version, stage, seed = r.unpack("<IIQ")
    if version != CHECKPOINT_VERSION:
        raise VersionError(f"{what}: version {version}, expected {CHECKPOINT_VERSION}")
    cdig = r.take(32)
    s1 = r.take(32)
    text = r.string()
    if config_digest(text) != cdig:
        raise FormatError(f"{what}: config digest does not match embedded config")
    params = _read_blocks(r)
    extra = _read_blocks(r)
    (has_opt,) = r.unpack("<B")
    opt = None
    if has_opt:
        step, lr, b1, b2, eps = r.unpack("<Qdddd")
        m = _read_blocks(r)
        v = _read_blocks(r)
        opt = AdamState(lr, b1, b2, eps, step, m, v)
    r.done()
    return Checkpoint(stage, params, seed, text, s1, opt, extra)


def write_checkpoint(ck: Checkpoint, path):
    Path(path).write_bytes(encode_checkpoint(ck))


def read_checkpoint(path) -> Checkpoint:
    return decode_checkpoint(Path(path).read_bytes(), str(path))


# --- external raster ingestion ----------------------------------------------------------

_LAYOUTS = ("TCHW", "THWC", "CTHW")


def ingest_external(descriptor: dict, base_dir=None):
    """Convert a raw ``.npy`` raster dump into a Trajectory and an obstacle mask.

    ``descriptor`` keys: ``data`` (npy path), ``height``, ``width``, ``dx``,
    ``dt``, optional ``t0``, ``channels`` (comma list, velocity first),
    ``layout`` (one of TCHW, THWC, CTHW), optional ``origin_x``/``origin_y``
    (centre of cell (0, 0)), optional ``mask.center_x``, ``mask.center_y``,
    ``mask.diameter``, and any ``const.<name>`` PDE constants.  Values inside
    the obstacle are set to zero; non-finite values elsewhere are an error.

    Returns ``(trajectory, mask, manifest_entry)``.
    """
    d = {k: str(v) for k, v in descriptor.items()}
    try:
        H, W = int(d["height"]), int(d["width"])
        dx, dt = float(d["dx"]), float(d["dt"])
        names = tuple(c.strip() for c in d["channels"].split(",") if c.strip())
        layout = d.get("layout", "TCHW").upper()
        src = Path(d["data"])
    except KeyError as e:
        raise ValidationError(f"descriptor missing key {e.args[0]!r}") from None
    if layout not in _LAYOUTS:
        raise ValidationError(f"layout must be one of {_LAYOUTS}, got {layout!r}")
    if base_dir is not None and not src.is_absolute():
        src = Path(base_dir) / src
    raw = np.load(src) if isinstance(descriptor.get("data"), (str, Path)) else np.asarray(descriptor["data"])
    if raw.ndim != 4:
        raise DimensionError(f"raster must be 4-D ({layout}), got shape {raw.shape}")
    C = len(names)
    axes = {a: i for i, a in enumerate(layout)}
    got = {a: raw.shape[axes[a]] for a in "CHW"}
    want = {"C": C, "H": H, "W": W}
    if got != want:
        raise DimensionError(f"raster {layout} shape {raw.shape} does not match declared "
                             f"C={C} H={H} W={W}")
    arr = np.transpose(raw, [axes[a] for a in "TCHW"]).astype(np.float64)
    origin = (float(d.get("origin_x", 0.5 * dx)), float(d.get("origin_y", 0.5 * dx)))
    grid = GridSpec(H, W, dx, origin)
    mask = np.zeros(grid.shape)
    if "mask.diameter" in d:
        center = (float(d["mask.center_x"]), float(d["mask.center_y"]))
        mask = disk_mask(grid, center, 0.5 * float(d["mask.diameter"]))
    inside = mask.astype(bool)[None, None]
    bad = ~np.isfinite(arr) & ~inside
    if bad.any():
        t, c, i, j = np.argwhere(bad)[0]
        raise NonFiniteError(f"non-finite value at step {t}, channel {names[c]}, cell ({i}, {j})")
    arr = np.where(inside, 0.0, arr)
    consts = {k[6:]: float(v) for k, v in d.items() if k.startswith("const.")}
    traj = Trajectory.from_array(arr, grid, dt, float(d.get("t0", 0.0)), names, consts)
    entry = {"constants": consts, "stats": compute_stats([traj]),
             "mask_cells": int(mask.sum())}
    return traj, mask, entry


def mask_diameter_cells(mask) -> int:
    """Widest run of obstacle cells along any row or column."""
    m = np.asarray(mask, dtype=bool)
    return int(max(m.sum(axis=1).max(), m.sum(axis=0).max()))
