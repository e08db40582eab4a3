"""Sectioned binary checkpoints.

Layout (little-endian)::

    b"NFCK"  uint32 version  uint32 n_sections
    per section:
        uint8 kind (0 = parameter, 1 = optimizer state, 2 = JSON metadata)
        uint16 name_len, name (utf-8)
        kind 0/1: uint8 ndim, ndim x uint32 shape, float32 data
        kind 2:   uint32 n_bytes, utf-8 JSON
"""

from __future__ import annotations

import json
import struct

import numpy as np

from ..errors import FormatError

MAGIC = b"NFCK"
VERSION = 1
PARAM, OPTIM, META = 0, 1, 2


def dumps(params, optim=None, meta=None):
    if hasattr(optim, "state_arrays"):
        optim = optim.state_arrays()
    sections = [(PARAM, k, v) for k, v in params.items()]
    sections += [(OPTIM, k, v) for k, v in (optim or {}).items()]
    if meta is not None:
        sections.append((META, "meta", meta))
    out = [MAGIC, struct.pack("<II", VERSION, len(sections))]
    for kind, name, payload in sections:
        nb = name.encode()
        out.append(struct.pack("<BH", kind, len(nb)) + nb)
        if kind == META:
            blob = json.dumps(payload, sort_keys=True).encode()
            out.append(struct.pack("<I", len(blob)) + blob)
        else:
            arr = np.ascontiguousarray(payload, dtype="<f4")
            out.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
            out.append(arr.tobytes())
    return b"".join(out)


def loads(buf):
    """Return ``(params, optim, meta)``."""
    buf = memoryview(bytes(buf))
    if bytes(buf[:4]) != MAGIC:
        raise FormatError("bad checkpoint magic", 0)
    pos = 4

    def take(n):
        nonlocal pos
        if pos + n > len(buf):
            raise FormatError("truncated checkpoint", pos)
        chunk = buf[pos:pos + n]
        pos += n
        return chunk

    version, count = struct.unpack("<II", take(8))
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", 4)
    params, optim, meta = {}, {}, None
    for _ in range(count):
        kind, nlen = struct.unpack("<BH", take(3))
        name = bytes(take(nlen)).decode()
        if kind == META:
            (n,) = struct.unpack("<I", take(4))
            meta = json.loads(bytes(take(n)).decode())
        elif kind in (PARAM, OPTIM):
            (ndim,) = struct.unpack("<B", take(1))
            shape = struct.unpack(f"<{ndim}I", take(4 * ndim))
            n = int(np.prod(shape, dtype=np.int64)) * 4
            arr = np.frombuffer(take(n), dtype="<f4").reshape(shape).astype(np.float32)
            (params if kind == PARAM else optim)[name] = arr
        else:
            raise FormatError(f"unknown section kind {kind}", pos - 3 - nlen)
    if pos != len(buf):
        raise FormatError("trailing bytes after last section", pos)
    return params, optim, meta


def save(path, params, optim=None, meta=None):
    with open(path, "wb") as f:
        f.write(dumps(params, optim, meta))


def load(path):
    with open(path, "rb") as f:
        return loads(f.read())
