"""
Binary checkpoint format.

Layout (all integers little-endian uint32)::

    b"TRSF" | version | len(kind) | kind (utf-8) | n_entries
    per entry: len(name) | name (utf-8) | rank | extents... | values (float32 LE)
    len(metadata) | metadata (utf-8 ``key = value`` lines)

Parameters are stored at 32-bit precision; loading widens them back to
float64, so ``load(save(m))`` reproduces every float32-rounded value exactly.
"""

import os
import struct
from dataclasses import dataclass, field

import numpy as np

from .data import Normalizer, format_float, read_kv, write_kv
from .diffusion import ModelConfig, Transfusor, build_schedule
from .errors import CheckpointError, FormatError

MAGIC = b"TRSF"
VERSION = 1
KINDS = ("transfusor", "cvae")


@dataclass
class Checkpoint:
    kind: str
    params: dict
    metadata: dict = field(default_factory=dict)


def _u32(n):
    return struct.pack("<I", n)


def encode(ckpt):
    if ckpt.kind not in KINDS:
        raise CheckpointError(f"unknown model kind {ckpt.kind!r}")
    kind = ckpt.kind.encode()
    parts = [MAGIC, _u32(VERSION), _u32(len(kind)), kind, _u32(len(ckpt.params))]
    for name, value in ckpt.params.items():
        value = np.asarray(value)
        raw = name.encode()
        parts += [_u32(len(raw)), raw, _u32(value.ndim)]
        parts += [_u32(n) for n in value.shape]
        parts.append(value.astype("<f4").tobytes())
    meta = write_kv(sorted(ckpt.metadata.items())).encode()
    parts += [_u32(len(meta)), meta]
    return b"".join(parts)


class _Reader:
    def __init__(self, blob):
        self.blob = blob
        self.pos = 0

    def take(self, n):
        if self.pos + n > len(self.blob):
            raise CheckpointError("checkpoint is truncated")
        chunk = self.blob[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def u32(self):
        return struct.unpack("<I", self.take(4))[0]


def decode(blob):
    r = _Reader(blob)
    if r.take(4) != MAGIC:
        raise CheckpointError("not a checkpoint: bad magic bytes")
    version = r.u32()
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} (this build reads {VERSION})")
    kind = r.take(r.u32()).decode()
    if kind not in KINDS:
        raise CheckpointError(f"unknown model kind {kind!r}")
    params = {}
    for _ in range(r.u32()):
        name = r.take(r.u32()).decode()
        rank = r.u32()
        shape = tuple(r.u32() for _ in range(rank))
        count = int(np.prod(shape)) if shape else 1
        params[name] = np.frombuffer(r.take(4 * count), dtype="<f4").reshape(shape).copy()
    try:
        metadata = read_kv(r.take(r.u32()).decode())
    except FormatError as exc:
        raise CheckpointError(f"corrupt metadata block: {exc}") from None
    if r.pos != len(blob):
        raise CheckpointError("trailing bytes after metadata")
    return Checkpoint(kind, params, metadata)


def save(ckpt, path):
    """Write atomically (temp file + rename)."""
    path = os.fspath(path)
    tmp = f"{path}.tmp{os.getpid()}"
    with open(tmp, "wb") as fh:
        fh.write(encode(ckpt))
    os.replace(tmp, path)


def load(path):
    try:
        with open(path, "rb") as fh:
            blob = fh.read()
    except OSError as exc:
        raise CheckpointError(f"{path}: {exc.strerror}") from None
    return decode(blob)


def model_checkpoint(model, **extra):
    meta = {"kind": model.kind, "seed": str(model.seed)}
    for key, value in model.config.to_dict().items():
        meta[f"config.{key}"] = repr(value)
    if model.normalizer is not None:
        for axis, name in enumerate("xy"):
            meta[f"norm.mean.{name}"] = format_float(model.normalizer.mean[axis])
            meta[f"norm.std.{name}"] = format_float(model.normalizer.std[axis])
    if model.kind == "transfusor":
        meta["schedule.K"] = str(model.schedule.K)
        meta["schedule.beta_start"] = format_float(model.schedule.betas[0])
        meta["schedule.beta_end"] = format_float(model.schedule.betas[-1])
    for key, value in extra.items():
        meta[key] = str(value)
    return Checkpoint(model.kind, model.net.state_dict(), meta)


def _config(cls, meta):
    values = {}
    for name, f in cls.__dataclass_fields__.items():
        key = f"config.{name}"
        if key in meta:
            values[name] = f.type(meta[key]) if f.type in (int, float) else type(f.default)(meta[key])
    return cls(**values)


def restore_model(ckpt):
    from .cvae import Cvae, CvaeConfig

    meta = ckpt.metadata
    normalizer = None
    if "norm.mean.x" in meta:
        normalizer = Normalizer(np.array([float(meta["norm.mean.x"]), float(meta["norm.mean.y"])]),
                                np.array([float(meta["norm.std.x"]), float(meta["norm.std.y"])]))
    seed = int(meta.get("seed", 0))
    if ckpt.kind == "transfusor":
        schedule = build_schedule(int(meta["schedule.K"]), float(meta["schedule.beta_start"]),
                                  float(meta["schedule.beta_end"]))
        model = Transfusor(_config(ModelConfig, meta), schedule, normalizer, seed)
    else:
        model = Cvae(_config(CvaeConfig, meta), normalizer, seed, trained=True)
    model.net.load_state_dict(ckpt.params)
    return model


def save_model(model, path, **extra):
    save(model_checkpoint(model, **extra), path)


def load_model(path):
    ckpt = load(path)
    return restore_model(ckpt), ckpt
