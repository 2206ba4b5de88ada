"""Fixed-layout binary files for pools, checkpoints, datasets, and clips.

Four single-purpose formats, all little-endian regardless of host byte
order, all headed by a four-byte magic and a version word.  Layouts are
fixed so round trips are bitwise and golden files parse identically on
every platform.
"""

import struct

import numpy as np

from .errors import (BadMagicError, DimMismatchError, DimensionError,
                     FormatError, TruncationError, VersionError)
from .memory import MemoryEntry, MemoryPool
from .synth import CLASS_NAMES, MODALITIES, GeneratorConfig, SignalSample

FORMAT_VERSION = 1
ENDIAN_MARK = 0x01020304

POOL_MAGIC = b"MOMP"
CHECKPOINT_MAGIC = b"MOMC"
DATASET_MAGIC = b"MOMD"
CLIP_MAGIC = b"MOMR"


class _Reader:
    """Cursor over a byte blob; every short read names the byte offset."""

    def __init__(self, blob, label):
        self.blob = blob
        self.off = 0
        self.label = label

    def take(self, n):
        end = self.off + n
        if end > len(self.blob):
            raise TruncationError(
                f"{self.label}: needed {n} bytes at byte {self.off}, "
                f"file ends at {len(self.blob)}")
        chunk = self.blob[self.off:end]
        self.off = end
        return chunk

    def u32(self):
        return struct.unpack("<I", self.take(4))[0]

    def u64(self):
        return struct.unpack("<Q", self.take(8))[0]

    def f64(self):
        return struct.unpack("<d", self.take(8))[0]

    def f32s(self, shape):
        n = 1
        for dim in shape:
            n *= int(dim)
        flat = np.frombuffer(self.take(4 * n), dtype="<f4")
        return flat.astype(np.float32).reshape(shape)

    def text(self):
        n = self.u32()
        return self.take(n).decode("utf-8")

    def finish(self):
        if self.off != len(self.blob):
            raise FormatError(
                f"{self.label}: {len(self.blob) - self.off} unexpected "
                f"trailing bytes at byte {self.off}")


def _u32(x):
    return struct.pack("<I", int(x))


def _u64(x):
    return struct.pack("<Q", int(x))


def _f64(x):
    return struct.pack("<d", float(x))


def _f32s(arr):
    return np.ascontiguousarray(arr, dtype="<f4").tobytes()


def _text(s):
    raw = s.encode("utf-8")
    return _u32(len(raw)) + raw


def _open(path, magic):
    with open(path, "rb") as fh:
        blob = fh.read()
    r = _Reader(blob, magic.decode("ascii"))
    got = r.take(4)
    if got != magic:
        raise BadMagicError(f"expected magic {magic!r}, got {got!r}")
    version = r.u32()
    if version != FORMAT_VERSION:
        raise VersionError(
            f"{magic.decode('ascii')} version {version} unsupported, "
            f"this build reads {FORMAT_VERSION}")
    return r


def _write(path, chunks):
    with open(path, "wb") as fh:
        for chunk in chunks:
            fh.write(chunk)


# ---------------------------------------------------------------------------
# memory pools

def save_pool(pool: MemoryPool, path):
    d_clip, d_act = pool.dims
    chunks = [POOL_MAGIC, _u32(FORMAT_VERSION), _u64(len(pool.entries)),
              _u32(d_clip), _u32(d_act), _u32(ENDIAN_MARK)]
    for e in pool.entries:
        chunks.append(_u64(e.id))
        chunks.append(_text(e.source_tag))
        chunks.append(_f32s(e.e_txt))
        chunks.append(_f32s(e.e_img))
        chunks.append(_f32s(e.e_act))
    _write(path, chunks)


def load_pool(path) -> MemoryPool:
    r = _open(path, POOL_MAGIC)
    n_entries = r.u64()
    d_clip = r.u32()
    d_act = r.u32()
    mark = r.u32()
    if mark != ENDIAN_MARK:
        raise FormatError(f"bad byte-order mark 0x{mark:08x}")
    entries = []
    for _ in range(n_entries):
        eid = r.u64()
        tag = r.text()
        e_txt = r.f32s((d_clip,))
        e_img = r.f32s((d_clip,))
        e_act = r.f32s((d_act,))
        entries.append(MemoryEntry(id=eid, e_txt=e_txt, e_img=e_img,
                                   e_act=e_act, source_tag=tag))
    r.finish()
    return MemoryPool(entries, dims=(d_clip, d_act))


# ---------------------------------------------------------------------------
# parameter checkpoints

def save_checkpoint(named_arrays, path):
    """Write name -> array blocks; arrays must already be float32."""
    chunks = [CHECKPOINT_MAGIC, _u32(FORMAT_VERSION), _u64(len(named_arrays))]
    for name, arr in named_arrays.items():
        arr = np.asarray(arr)
        if arr.dtype != np.float32:
            raise FormatError(
                f"checkpoint block {name!r} is {arr.dtype}, expected float32")
        chunks.append(_text(name))
        chunks.append(_u32(arr.ndim))
        for dim in arr.shape:
            chunks.append(_u32(dim))
        chunks.append(_f32s(arr))
    _write(path, chunks)


def load_checkpoint(path):
    r = _open(path, CHECKPOINT_MAGIC)
    n_blocks = r.u64()
    out = {}
    for _ in range(n_blocks):
        name = r.text()
        if name in out:
            raise FormatError(f"duplicate checkpoint block {name!r}")
        rank = r.u32()
        shape = tuple(r.u32() for _ in range(rank))
        out[name] = r.f32s(shape)
    r.finish()
    return out


def assign_checkpoint(named_params, loaded):
    """Copy loaded arrays into live (name, parameter) pairs, matching by name."""
    named_params = list(named_params)
    names = {name for name, _ in named_params}
    missing = names - set(loaded)
    if missing:
        raise FormatError(f"checkpoint missing blocks {sorted(missing)}")
    extra = set(loaded) - names
    if extra:
        raise FormatError(f"checkpoint has unknown blocks {sorted(extra)}")
    for name, p in named_params:
        arr = loaded[name]
        if arr.shape != p.data.shape:
            raise DimMismatchError(
                f"block {name!r} has shape {arr.shape}, "
                f"parameter expects {p.data.shape}")
        p.data = arr.astype(p.data.dtype)


# ---------------------------------------------------------------------------
# synthetic datasets

def _flags_from_modalities(modalities):
    flags = 0
    for i, name in enumerate(MODALITIES):
        if name in modalities:
            flags |= 1 << i
    return flags


def _modalities_from_flags(flags):
    known = (1 << len(MODALITIES)) - 1
    if flags & ~known:
        raise FormatError(f"unknown modality flag bits 0x{flags:x}")
    return tuple(name for i, name in enumerate(MODALITIES) if flags & (1 << i))


def save_dataset(cfg: GeneratorConfig, train, test, path):
    if len(train) != cfg.n_train or len(test) != cfg.n_test:
        raise DimensionError(
            f"dataset has {len(train)}/{len(test)} samples, "
            f"config says {cfg.n_train}/{cfg.n_test}")
    chunks = [DATASET_MAGIC, _u32(FORMAT_VERSION)]
    for name in ("latent_dim", "n_voxels", "d_clip", "d_act", "n_classes",
                 "frames", "channels", "height", "width", "n_train", "n_test"):
        chunks.append(_u32(getattr(cfg, name)))
    chunks.append(_f64(cfg.signal_noise_sigma))
    chunks.append(_f64(cfg.embed_noise_sigma))
    chunks.append(_f64(cfg.blob_sigma))
    chunks.append(_f64(cfg.pos_coupling))
    chunks.append(_u64(cfg.seed))
    chunks.append(_u32(_flags_from_modalities(cfg.uninformative_modalities)))
    for s in list(train) + list(test):
        for arr in (s.signal, s.e_txt, s.e_img, s.e_act, s.labels, s.clip,
                    s.flow_gt, s.latent):
            chunks.append(_f32s(arr))
    _write(path, chunks)


def load_dataset(path):
    r = _open(path, DATASET_MAGIC)
    fields = {name: r.u32() for name in
              ("latent_dim", "n_voxels", "d_clip", "d_act", "n_classes",
               "frames", "channels", "height", "width", "n_train", "n_test")}
    fields["signal_noise_sigma"] = r.f64()
    fields["embed_noise_sigma"] = r.f64()
    fields["blob_sigma"] = r.f64()
    fields["pos_coupling"] = r.f64()
    fields["seed"] = r.u64()
    fields["uninformative_modalities"] = _modalities_from_flags(r.u32())
    cfg = GeneratorConfig(**fields).validate()

    def read_sample():
        signal = r.f32s((cfg.n_voxels,))
        e_txt = r.f32s((cfg.d_clip,))
        e_img = r.f32s((cfg.frames, cfg.d_clip))
        e_act = r.f32s((cfg.d_act,))
        labels = r.f32s((cfg.n_classes,))
        clip = r.f32s((cfg.frames, cfg.channels, cfg.height, cfg.width))
        flow = r.f32s((cfg.frames - 1, cfg.height, cfg.width, 2))
        latent = r.f32s((cfg.latent_dim,))
        if cfg.n_classes == len(CLASS_NAMES):
            keywords = [CLASS_NAMES[i] for i in np.flatnonzero(labels)]
        else:
            keywords = []
        return SignalSample(signal=signal, e_txt=e_txt, e_img=e_img,
                            e_act=e_act, labels=labels, clip=clip,
                            flow_gt=flow, latent=latent, keywords=keywords)

    train = [read_sample() for _ in range(cfg.n_train)]
    test = [read_sample() for _ in range(cfg.n_test)]
    r.finish()
    return cfg, train, test


# ---------------------------------------------------------------------------
# raw clips

def save_clip(clip, path):
    clip = np.asarray(clip)
    if clip.ndim != 4:
        raise DimensionError(f"clip must be [frames, channels, h, w], got {clip.shape}")
    chunks = [CLIP_MAGIC, _u32(FORMAT_VERSION)]
    for dim in clip.shape:
        chunks.append(_u32(dim))
    chunks.append(_f32s(clip))
    _write(path, chunks)


def load_clip(path):
    r = _open(path, CLIP_MAGIC)
    shape = tuple(r.u32() for _ in range(4))
    clip = r.f32s(shape)
    r.finish()
    return clip
