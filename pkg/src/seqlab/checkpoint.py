"""Binary model checkpoints.

Layout (all integers little-endian)::

    8 bytes   magic b"SEQLABV1"
    1 byte    format version
    u32       header length, then that many bytes of UTF-8 JSON metadata
    u32       tensor count, then per tensor:
                u16 name length, name (UTF-8), u8 ndim, ndim x u32 dims,
                prod(dims) x float64 (little-endian)

Files are written to a temporary sibling and renamed into place, so the
target path only ever holds a complete checkpoint.
"""

import json
import os
import struct
import tempfile
from collections import OrderedDict
from pathlib import Path

import numpy as np

from .errors import CheckpointError
from .model import Model, ModelSpec, check_params

MAGIC = b"SEQLABV1"
VERSION = 1


def _pack_tensor(name, value):
    raw = name.encode("utf-8")
    arr = np.ascontiguousarray(value, dtype="<f8")
    head = struct.pack("<H", len(raw)) + raw + struct.pack("<B", arr.ndim)
    head += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + arr.tobytes()


def dumps(model, meta=None):
    header = dict(meta or {})
    spec = model.spec
    header.update(cell=spec.cell, mode=spec.mode, layers=spec.layers, hidden=spec.hidden,
                  n_x=spec.n_x, n_y=spec.n_y)
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    parts = [MAGIC, struct.pack("<B", VERSION), struct.pack("<I", len(hbytes)), hbytes,
             struct.pack("<I", len(model.params))]
    parts.extend(_pack_tensor(k, v) for k, v in model.params.items())
    return b"".join(parts)


class _Reader:
    def __init__(self, data, source):
        self.data = data
        self.pos = 0
        self.source = source

    def take(self, n):
        if self.pos + n > len(self.data):
            raise CheckpointError(f"{self.source}: truncated checkpoint "
                                  f"(needed {n} bytes at offset {self.pos})")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def loads(data, source="<bytes>"):
    """Parse checkpoint bytes into ``(Model, header)``."""
    r = _Reader(data, source)
    if r.take(len(MAGIC)) != MAGIC:
        raise CheckpointError(f"{source}: not a checkpoint (bad magic)")
    (version,) = r.unpack("<B")
    if version != VERSION:
        raise CheckpointError(f"{source}: unsupported checkpoint version {version}")
    (hlen,) = r.unpack("<I")
    try:
        header = json.loads(r.take(hlen).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{source}: corrupt header ({exc})") from None
    (count,) = r.unpack("<I")
    params = OrderedDict()
    for _ in range(count):
        (nlen,) = r.unpack("<H")
        name = r.take(nlen).decode("utf-8")
        (ndim,) = r.unpack("<B")
        shape = r.unpack(f"<{ndim}I")
        n = int(np.prod(shape, dtype=np.int64))
        params[name] = np.frombuffer(r.take(8 * n), dtype="<f8").astype(np.float64).reshape(shape)
    if r.pos != len(data):
        raise CheckpointError(f"{source}: {len(data) - r.pos} trailing bytes after payload")
    try:
        spec = ModelSpec(n_x=header["n_x"], n_y=header["n_y"], hidden=header["hidden"],
                         cell=header["cell"], mode=header["mode"], layers=header["layers"])
        check_params(spec, params)
    except (KeyError, ValueError) as exc:
        raise CheckpointError(f"{source}: inconsistent checkpoint ({exc})") from None
    return Model(spec, params), header


def save(path, model, meta=None):
    """Atomically write ``model`` (and JSON-serializable ``meta``) to ``path``."""
    path = Path(path)
    payload = dumps(model, meta)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", suffix=".tmp", dir=path.parent or ".")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load(path):
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from None
    return loads(data, source=str(path))
