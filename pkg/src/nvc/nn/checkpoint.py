"""Binary checkpoint format ("NVC1").

Layout, little-endian::

    b"NVC1" | u32 version | u8 model_kind
    u32 config_len | config JSON (UTF-8)
    u64 training_step | u32 n_params
    n_params x ( u32 name_len | name (UTF-8) | u32 rank | u32 dims[rank] | f64 data )
    u8 has_optimizer
    [ u64 adam_step | f64 lr | f64 beta1 | f64 beta2 | f64 eps
      n_params x ( f64 m[...] | f64 v[...] ) ]   # same order and shapes as above
"""

from __future__ import annotations

import io
import json
import os
import struct

import numpy as np

from .core import AdamState, Model

MAGIC = b"NVC1"
VERSION = 1
KINDS = {"encoder": 0, "synthesizer": 1, "vocoder": 2}
_KIND_NAMES = {v: k for k, v in KINDS.items()}
_REGISTRY: dict[str, type] = {}


class CheckpointError(Exception):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CorruptCheckpointError(CheckpointError):
    pass


class UnknownModelKindError(CheckpointError):
    pass


class ModelKindMismatchError(CheckpointError):
    pass


def register_model(cls):
    _REGISTRY[cls.kind] = cls
    return cls


def save_checkpoint(model: Model, path, step: int = 0, adam: AdamState | None = None):
    if model.kind not in KINDS:
        raise UnknownModelKindError(f"unknown model kind {model.kind!r}")
    buf = io.BytesIO()
    buf.write(MAGIC + struct.pack("<IB", VERSION, KINDS[model.kind]))
    cfg = json.dumps(model.config, sort_keys=True).encode()
    buf.write(struct.pack("<I", len(cfg)) + cfg)
    names = list(model.params)
    buf.write(struct.pack("<QI", step, len(names)))
    for name in names:
        v = model.params[name].value
        nb = name.encode()
        buf.write(struct.pack("<I", len(nb)) + nb)
        buf.write(struct.pack(f"<I{v.ndim}I", v.ndim, *v.shape))
        buf.write(np.ascontiguousarray(v, dtype="<f8").tobytes())
    if adam is None:
        buf.write(b"\x00")
    else:
        adam.ensure(model.params)
        buf.write(b"\x01" + struct.pack("<Q4d", adam.step, adam.lr, adam.beta1, adam.beta2, adam.eps))
        for name in names:
            buf.write(np.ascontiguousarray(adam.m[name], dtype="<f8").tobytes())
            buf.write(np.ascontiguousarray(adam.v[name], dtype="<f8").tobytes())
    tmp = f"{os.fspath(path)}.tmp"
    with open(tmp, "wb") as f:
        f.write(buf.getvalue())
    os.replace(tmp, path)


class _Reader:
    def __init__(self, data: bytes, path):
        self.data, self.pos, self.path = data, 0, path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CorruptCheckpointError(f"{self.path}: truncated at byte {self.pos}")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_checkpoint(path, expected_kind: str | None = None, freeze_patterns=()):
    """Returns ``(model, training_step, adam_state_or_None)``."""
    with open(path, "rb") as f:
        r = _Reader(f.read(), path)
    if r.take(4) != MAGIC:
        raise CorruptCheckpointError(f"{path}: bad magic, not an NVC1 checkpoint")
    version, kind_code = r.unpack("<IB")
    if version != VERSION:
        raise CheckpointVersionError(f"{path}: checkpoint version {version}, expected {VERSION}")
    if kind_code not in _KIND_NAMES:
        raise UnknownModelKindError(f"{path}: unknown model kind code {kind_code}")
    kind = _KIND_NAMES[kind_code]
    if expected_kind is not None and kind != expected_kind:
        raise ModelKindMismatchError(f"model kind mismatch: file holds {kind}, expected {expected_kind}")
    if kind not in _REGISTRY:
        raise UnknownModelKindError(f"no model class registered for {kind!r}")
    (cfg_len,) = r.unpack("<I")
    try:
        config = json.loads(r.take(cfg_len).decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CorruptCheckpointError(f"{path}: bad config block: {e}") from e
    step, n_params = r.unpack("<QI")
    model = _REGISTRY[kind](config)
    names = []
    for _ in range(n_params):
        (nlen,) = r.unpack("<I")
        name = r.take(nlen).decode()
        (rank,) = r.unpack("<I")
        shape = r.unpack(f"<{rank}I")
        count = int(np.prod(shape)) if rank else 1
        data = np.frombuffer(r.take(8 * count), dtype="<f8").reshape(shape)
        if name not in model.params or model.params[name].value.shape != tuple(shape):
            raise CorruptCheckpointError(f"{path}: parameter {name} {tuple(shape)} does not fit the model")
        model.params[name].value[...] = data
        names.append(name)
    if set(names) != set(model.params):
        raise CorruptCheckpointError(f"{path}: missing parameters {sorted(set(model.params) - set(names))}")
    (has_opt,) = r.unpack("<B")
    adam = None
    if has_opt:
        astep, lr, b1, b2, eps = r.unpack("<Q4d")
        adam = AdamState(lr=lr, beta1=b1, beta2=b2, eps=eps, step=astep)
        for name in names:
            shape = model.params[name].value.shape
            n = model.params[name].value.size
            adam.m[name] = np.frombuffer(r.take(8 * n), dtype="<f8").reshape(shape).copy()
            adam.v[name] = np.frombuffer(r.take(8 * n), dtype="<f8").reshape(shape).copy()
    if r.pos != len(r.data):
        raise CorruptCheckpointError(f"{path}: {len(r.data) - r.pos} trailing bytes")
    if freeze_patterns:
        model.freeze(freeze_patterns)
    return model, step, adam
