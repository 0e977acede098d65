"""Binary checkpoint format.

Little-endian layout::

    b"MEDUSACP"  u32 version  u32 tensor_count
    per tensor:  u32 name_len  name (UTF-8)  u8 dtype  u32 rank  u32 extents[rank]  raw elements
    u32 CRC-32 of every preceding byte

Besides parameters, a checkpoint stores batch-norm statistics, optional
Adam state, and a ``meta.json`` byte tensor describing how to rebuild the
bundle.
"""
import json
import struct
import zlib

import numpy as np

from .attention import GlobalConfig
from .backbone import BackboneConfig
from .model import build_variant
from .tensor import MedusaError

MAGIC = b"MEDUSACP"
VERSION = 1
META_KEY = "meta.json"

DTYPE_CODES = {np.dtype("float32"): 1, np.dtype("float64"): 2, np.dtype("int64"): 3, np.dtype("uint8"): 4}
CODE_DTYPES = {v: k for k, v in DTYPE_CODES.items()}


class CheckpointError(MedusaError):
    """A checkpoint file is unreadable; ``field`` names the part that failed."""

    def __init__(self, field, message):
        self.field = field
        super().__init__("checkpoint %s: %s" % (field, message))


class IncompatibleCheckpointError(MedusaError):
    """A checkpoint lacks tensors a bundle needs, or shapes disagree."""

    def __init__(self, message, missing=()):
        self.missing = list(missing)
        super().__init__(message)


# ---------------------------------------------------------------------------
# raw tensor table


def encode_tensors(tensors):
    parts = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        if arr.dtype not in DTYPE_CODES:
            raise CheckpointError("tensor %r" % name, "unsupported dtype %s" % arr.dtype)
        if arr.ndim == 0:
            arr = arr.reshape(1)
        raw_name = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw_name)))
        parts.append(raw_name)
        parts.append(struct.pack("<BI", DTYPE_CODES[arr.dtype], arr.ndim))
        parts.append(struct.pack("<%dI" % arr.ndim, *arr.shape))
        parts.append(np.ascontiguousarray(arr).astype(arr.dtype.newbyteorder("<"), copy=False).tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)


class _Reader:
    def __init__(self, data):
        self.data = data
        self.pos = 0

    def take(self, n, field):
        if self.pos + n > len(self.data):
            raise CheckpointError(field, "truncated (needed %d bytes at offset %d, file has %d)" % (n, self.pos, len(self.data)))
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt, field):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), field))


def decode_tensors(data):
    r = _Reader(data)
    if r.take(len(MAGIC), "magic") != MAGIC:
        raise CheckpointError("magic", "not a MEDUSA checkpoint")
    (version,) = r.unpack("<I", "version")
    if version != VERSION:
        raise CheckpointError("version", "unsupported version %d (expected %d)" % (version, VERSION))
    (count,) = r.unpack("<I", "tensor_count")
    tensors = {}
    for i in range(count):
        field = "tensor[%d]" % i
        (name_len,) = r.unpack("<I", field + ".name_length")
        try:
            name = r.take(name_len, field + ".name").decode("utf-8")
        except UnicodeDecodeError:
            raise CheckpointError(field + ".name", "invalid UTF-8") from None
        field = "tensor %r" % name
        code, rank = r.unpack("<BI", field + ".dtype")
        if code not in CODE_DTYPES:
            raise CheckpointError(field + ".dtype", "unknown dtype code %d" % code)
        shape = r.unpack("<%dI" % rank, field + ".extents")
        dtype = CODE_DTYPES[code]
        nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
        raw = r.take(nbytes, field + ".elements")
        tensors[name] = np.frombuffer(raw, dtype=dtype.newbyteorder("<")).astype(dtype).reshape(shape)
    body_end = r.pos
    (crc,) = r.unpack("<I", "crc32")
    if r.pos != len(data):
        raise CheckpointError("crc32", "%d trailing bytes after checksum" % (len(data) - r.pos))
    if zlib.crc32(data[:body_end]) & 0xFFFFFFFF != crc:
        raise CheckpointError("crc32", "checksum mismatch")
    return tensors


# ---------------------------------------------------------------------------
# bundles


def bundle_meta(bundle):
    meta = {"variant": bundle.kind, "seed": bundle.seed, "dtype": str(bundle.dtype)}
    if bundle.backbone_config is not None:
        bc = bundle.backbone_config
        meta["backbone"] = {"stage_channels": list(bc.stage_channels), "blocks_per_stage": bc.blocks_per_stage,
                            "input_shape": list(bc.input_shape), "num_classes": bc.num_classes}
    if bundle.global_config is not None:
        meta["global"] = {"depth": bundle.global_config.depth, "base_channels": bundle.global_config.base_channels}
    if bundle.se_reduction is not None:
        meta["se_reduction"] = bundle.se_reduction
    return meta


def bundle_tensors(bundle, optimizer=None, extra_meta=None):
    tensors = {}
    for name, p in bundle.parameters().items():
        tensors[name] = p.data
    for name, s in bundle.bn_states().items():
        tensors[name + ".running_mean"] = s.running_mean
        tensors[name + ".running_var"] = s.running_var
        tensors[name + ".num_batches"] = np.array([s.num_batches], dtype=np.int64)
    if optimizer is not None:
        tensors["optim.t"] = np.array([optimizer.t], dtype=np.int64)
        for name in sorted(optimizer.m):
            tensors["optim.m." + name] = optimizer.m[name]
            tensors["optim.v." + name] = optimizer.v[name]
            tensors["optim.steps." + name] = np.array([optimizer.steps[name]], dtype=np.int64)
    meta = bundle_meta(bundle)
    meta.update(extra_meta or {})
    tensors[META_KEY] = np.frombuffer(json.dumps(meta, sort_keys=True).encode("utf-8"), dtype=np.uint8)
    return tensors


def save_checkpoint(bundle, path, optimizer=None, meta=None):
    data = encode_tensors(bundle_tensors(bundle, optimizer, meta))
    with open(path, "wb") as fh:
        fh.write(data)
    return data


def read_checkpoint(path):
    """Return the raw tensor table and decoded metadata."""
    try:
        with open(path, "rb") as fh:
            data = fh.read()
    except OSError as exc:
        raise CheckpointError("file", "cannot read %s: %s" % (path, exc.strerror)) from None
    tensors = decode_tensors(data)
    if META_KEY not in tensors:
        raise CheckpointError(META_KEY, "missing")
    try:
        meta = json.loads(tensors.pop(META_KEY).tobytes().decode("utf-8"))
    except (UnicodeDecodeError, ValueError):
        raise CheckpointError(META_KEY, "not valid JSON") from None
    return tensors, meta


def load_state(bundle, tensors, prefix=None, include_optimizer=None):
    """Copy tensors into ``bundle`` (only names starting with ``prefix``, if given).

    Every required name must be present with a matching shape; nothing is
    modified unless the whole table checks out.
    """
    params = {k: v for k, v in bundle.parameters().items() if prefix is None or k.startswith(prefix)}
    states = {k: v for k, v in bundle.bn_states().items() if prefix is None or k.startswith(prefix)}
    needed = list(params)
    for name in states:
        needed += [name + ".running_mean", name + ".running_var", name + ".num_batches"]
    missing = [n for n in needed if n not in tensors]
    if missing:
        raise IncompatibleCheckpointError(
            "checkpoint lacks %d tensor(s) required by the %s bundle: %s" % (len(missing), bundle.kind, ", ".join(missing)),
            missing,
        )
    for name, p in params.items():
        if tensors[name].shape != p.shape:
            raise IncompatibleCheckpointError("tensor %r has shape %s, bundle expects %s" % (name, tensors[name].shape, p.shape))
    for name, p in params.items():
        p.data = tensors[name].astype(p.dtype, copy=True)
    for name, s in states.items():
        s.running_mean = tensors[name + ".running_mean"].astype(s.running_mean.dtype, copy=True)
        s.running_var = tensors[name + ".running_var"].astype(s.running_var.dtype, copy=True)
        s.num_batches = int(tensors[name + ".num_batches"][0])
    if include_optimizer is not None and "optim.t" in tensors:
        opt = include_optimizer
        opt.t = int(tensors["optim.t"][0])
        for name in opt.m:
            if "optim.m." + name in tensors:
                opt.m[name] = tensors["optim.m." + name].copy()
                opt.v[name] = tensors["optim.v." + name].copy()
                opt.steps[name] = int(tensors["optim.steps." + name][0])


def bundle_from_meta(meta):
    try:
        bc = BackboneConfig(**{k: tuple(v) if isinstance(v, list) else v for k, v in meta["backbone"].items()}) if "backbone" in meta else None
        gc = GlobalConfig(**meta["global"]) if "global" in meta else None
        return build_variant(meta["variant"], bc, gc, seed=meta.get("seed", 0),
                             se_reduction=meta.get("se_reduction", 4), dtype=np.dtype(meta.get("dtype", "float32")))
    except (KeyError, TypeError) as exc:
        raise CheckpointError(META_KEY, "cannot rebuild bundle: %s" % exc) from None


def load_checkpoint(path, optimizer=None):
    """Rebuild the bundle stored at ``path``; returns ``(bundle, meta)``."""
    tensors, meta = read_checkpoint(path)
    bundle = bundle_from_meta(meta)
    load_state(bundle, tensors, include_optimizer=optimizer)
    return bundle, meta


def load_into(bundle, path, prefix=None):
    """Load matching tensors from ``path`` into an existing bundle."""
    tensors, meta = read_checkpoint(path)
    load_state(bundle, tensors, prefix=prefix)
    return meta
