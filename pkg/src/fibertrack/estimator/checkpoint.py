"""Versioned binary checkpoint for network parameters.

Layout (all integers little-endian ``u32``)::

    b"FTNN" | version | shells | patch | n_tensors
    per tensor: name_len | name (utf-8) | dtype code | ndim | dims... | payload

Payloads are row-major little-endian IEEE-754 (code 1 = float32,
2 = float64). The architecture beyond ``shells`` and ``patch`` is implied
by the tensor shapes.
"""
from __future__ import annotations

import struct

import numpy as np

from ..errors import DataError
from .network import NetworkConfig, param_shapes

MAGIC = b"FTNN"
VERSION = 1
DTYPE_CODES = {np.dtype("<f4"): 1, np.dtype("<f8"): 2}
CODE_DTYPES = {v: k for k, v in DTYPE_CODES.items()}


def _u32(*vals):
    return struct.pack("<" + "I" * len(vals), *vals)


def dumps(params, config):
    out = [MAGIC, _u32(VERSION, config.shells, config.patch, len(params))]
    for name, arr in params.items():
        dt = np.dtype(arr.dtype).newbyteorder("<")
        if dt not in DTYPE_CODES:
            raise DataError(f"unsupported checkpoint dtype {arr.dtype} for {name}")
        key = name.encode("utf-8")
        out.append(_u32(len(key)) + key + _u32(DTYPE_CODES[dt], arr.ndim, *arr.shape))
        out.append(np.ascontiguousarray(arr, dtype=dt).tobytes())
    return b"".join(out)


def save(path, params, config):
    with open(path, "wb") as fh:
        fh.write(dumps(params, config))


class _Reader:
    def __init__(self, buf):
        self.buf = buf
        self.pos = 0

    def take(self, n):
        if self.pos + n > len(self.buf):
            raise DataError("checkpoint is truncated")
        chunk = self.buf[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def u32(self, k=1):
        vals = struct.unpack("<" + "I" * k, self.take(4 * k))
        return vals if k > 1 else vals[0]


def loads(buf, config=None):
    """Parse a checkpoint; returns ``(params, shells, patch)``.

    When ``config`` is given the tensor names and shapes must match it.
    """
    r = _Reader(buf)
    if r.take(4) != MAGIC:
        raise DataError("not a FTNN checkpoint (bad magic)")
    version, shells, patch, n = r.u32(4)
    if version != VERSION:
        raise DataError(f"unsupported checkpoint version {version}")
    params = {}
    for _ in range(n):
        name = r.take(r.u32()).decode("utf-8")
        code, ndim = r.u32(2)
        if code not in CODE_DTYPES:
            raise DataError(f"unknown dtype code {code} for {name}")
        shape = tuple(r.u32(ndim)) if ndim > 1 else ((r.u32(),) if ndim == 1 else ())
        dt = CODE_DTYPES[code]
        size = int(np.prod(shape)) * dt.itemsize
        params[name] = np.frombuffer(r.take(size), dtype=dt).reshape(shape).copy()
    if r.pos != len(buf):
        raise DataError("trailing bytes after checkpoint payload")
    if config is not None:
        _check_shapes(params, config)
    return params, shells, patch


def _check_shapes(params, config):
    if {k: v.shape for k, v in params.items()} != param_shapes(config):
        raise DataError("checkpoint tensors do not match the network configuration")


def load(path, config=None):
    """Read a checkpoint written by :func:`save`.

    Returns ``(params, config)``; without an explicit ``config`` the
    reference architecture for the stored shell count is assumed.
    """
    with open(path, "rb") as fh:
        buf = fh.read()
    params, shells, patch = loads(buf)
    if config is None:
        config = NetworkConfig.table1(shells)
    if config.shells != shells or config.patch != patch:
        raise DataError(f"checkpoint is for S={shells}, patch={patch}")
    _check_shapes(params, config)
    return params, config
