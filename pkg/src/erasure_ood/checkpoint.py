"""UENC checkpoint files.

Layout (little-endian)::

    b"UENC" | u32 version | u64 body length | body | u32 CRC-32 of body

The body is a u32 JSON length, a UTF-8 JSON header (network config, layer
list, optional metadata) and then every parameter tensor as float32 in
architecture order, kernel before bias.  No timestamps are stored, so the
same weights always serialize to the same bytes.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .errors import BadMagicError, ChecksumError, DimensionError, TruncatedError, VersionError
from .tensor import ConvParams
from .uen import UenConfig, UenWeights, architecture, config_dict

MAGIC = b"UENC"
VERSION = 1
_PREFIX = struct.Struct("<4sIQ")


def encode_checkpoint(weights: UenWeights, meta: dict | None = None) -> bytes:
    header = {
        "config": config_dict(weights.config),
        "layers": [asdict(s) for s in architecture(weights.config)],
        "meta": meta or {},
    }
    js = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    payload = b"".join(np.ascontiguousarray(a, dtype="<f4").tobytes() for _, a in weights.arrays())
    body = struct.pack("<I", len(js)) + js + payload
    return _PREFIX.pack(MAGIC, VERSION, len(body)) + body + struct.pack("<I", zlib.crc32(body))


def decode_checkpoint(data: bytes) -> tuple[UenWeights, dict]:
    """Parse checkpoint bytes into float32 weights and the metadata dict."""
    if len(data) < 4:
        raise TruncatedError("checkpoint shorter than its magic")
    if data[:4] != MAGIC:
        raise BadMagicError(f"checkpoint magic is {data[:4]!r}, expected {MAGIC!r}")
    if len(data) < _PREFIX.size:
        raise TruncatedError("checkpoint header truncated")
    _, version, body_len = _PREFIX.unpack_from(data)
    if version != VERSION:
        raise VersionError(f"checkpoint version {version}, expected {VERSION}")
    end = _PREFIX.size + body_len
    if len(data) < end + 4:
        raise TruncatedError(f"checkpoint has {len(data)} bytes, header promises {end + 4}")
    if len(data) > end + 4:
        raise DimensionError(f"checkpoint has {len(data) - end - 4} trailing bytes")
    body = data[_PREFIX.size:end]
    (crc,) = struct.unpack_from("<I", data, end)
    if zlib.crc32(body) != crc:
        raise ChecksumError("checkpoint CRC-32 mismatch")

    (js_len,) = struct.unpack_from("<I", body)
    header = json.loads(body[4:4 + js_len].decode("utf-8"))
    cfg = UenConfig(**header["config"])
    specs = architecture(cfg)
    if [asdict(s) for s in specs] != header["layers"]:
        raise DimensionError("checkpoint layer list does not match its config")
    payload = np.frombuffer(body, dtype="<f4", offset=4 + js_len)
    expected = sum(s.c_out * s.c_in * s.k * s.k + s.c_out for s in specs)
    if payload.size != expected:
        raise DimensionError(f"checkpoint has {payload.size} weights, architecture needs {expected}")
    params, pos = {}, 0
    for s in specs:
        nk = s.c_out * s.c_in * s.k * s.k
        kernel = payload[pos:pos + nk].reshape(s.c_out, s.c_in, s.k, s.k).astype(np.float32)
        bias = payload[pos + nk:pos + nk + s.c_out].astype(np.float32)
        pos += nk + s.c_out
        params[s.name] = ConvParams(kernel, bias, s.stride, s.padding)
    return UenWeights(cfg, params), header["meta"]


def save_checkpoint(path, weights: UenWeights, meta: dict | None = None) -> None:
    Path(path).write_bytes(encode_checkpoint(weights, meta))


def load_checkpoint(path) -> tuple[UenWeights, dict]:
    return decode_checkpoint(Path(path).read_bytes())
