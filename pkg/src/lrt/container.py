"""Self-describing binary container shared by dataset (``LRTD``) and model (``LRTM``) files.

Layout (all integers little-endian)::

    magic      4 bytes
    version    u32
    n_sections u32
    section*   kind u8 | name_len u16 | name (utf-8) | payload_len u64 | payload | crc32 u32

Section kinds: 0 = UTF-8 JSON text, 1 = float64 tensor, 2 = int64 tensor.
Tensor payload: ndim u8 | dims u64 * ndim | raw little-endian values.
The CRC covers the whole section up to the checksum, so flipped bytes surface as
a :class:`ParseError` instead of silently altered values.
"""

import hashlib
import json
import struct
import zlib

import numpy as np

from .errors import ParseError, VersionError

FORMAT_VERSION = 1

_TEXT, _F64, _I64 = 0, 1, 2
_DTYPES = {_F64: np.dtype("<f8"), _I64: np.dtype("<i8")}


def _section(kind, name, payload):
    raw = name.encode("utf-8")
    body = struct.pack("<BH", kind, len(raw)) + raw + struct.pack("<Q", len(payload)) + payload
    return body + struct.pack("<I", zlib.crc32(body))


def _tensor_payload(arr):
    arr = np.asarray(arr)
    kind = _I64 if arr.dtype.kind in "iub" else _F64
    arr = np.asarray(arr, dtype=_DTYPES[kind], order="C")  # ascontiguousarray would lift 0-d to 1-d
    head = struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape)
    return kind, head + arr.tobytes()


def encode(magic, meta, arrays):
    """Serialise a JSON-able ``meta`` dict plus named arrays into container bytes."""
    text = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8")
    parts = [magic, struct.pack("<II", FORMAT_VERSION, 1 + len(arrays)), _section(_TEXT, "manifest", text)]
    for name, arr in arrays.items():
        kind, payload = _tensor_payload(arr)
        parts.append(_section(kind, name, payload))
    return b"".join(parts)


def write(path, magic, meta, arrays):
    blob = encode(magic, meta, arrays)
    with open(path, "wb") as fh:
        fh.write(blob)
    return hashlib.sha256(blob).hexdigest()


class _Reader:
    def __init__(self, buf):
        self.buf = buf
        self.pos = 0

    def take(self, n, what):
        if n < 0 or self.pos + n > len(self.buf):
            raise ParseError(f"truncated file while reading {what}", self.pos)
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt, what):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def decode(buf, magic):
    """Inverse of :func:`encode`; returns ``(meta, arrays)``."""
    r = _Reader(bytes(buf))
    got = r.take(4, "magic")
    if got != magic:
        raise ParseError(f"bad magic {got!r}, expected {magic!r}", 0)
    (version,) = r.unpack("<I", "version")
    if version != FORMAT_VERSION:
        raise VersionError(f"unsupported container version {version} (this build reads {FORMAT_VERSION})", 4)
    (n_sections,) = r.unpack("<I", "section count")
    meta = None
    arrays = {}
    for _ in range(n_sections):
        start = r.pos
        kind, name_len = r.unpack("<BH", "section header")
        try:
            name = r.take(name_len, "section name").decode("utf-8")
        except UnicodeDecodeError:
            raise ParseError("section name is not valid UTF-8", start) from None
        (size,) = r.unpack("<Q", "payload length")
        body_at = r.pos
        payload = r.take(size, f"payload of {name!r}")
        (crc,) = r.unpack("<I", "section checksum")
        if crc != zlib.crc32(r.buf[start:r.pos - 4]):
            raise ParseError(f"checksum mismatch in section {name!r}", start)
        if kind == _TEXT:
            try:
                meta = json.loads(payload.decode("utf-8"))
            except (UnicodeDecodeError, json.JSONDecodeError) as exc:
                raise ParseError(f"manifest text is not valid JSON ({exc})", body_at) from None
        elif kind in _DTYPES:
            arrays[name] = _decode_tensor(payload, kind, body_at)
        else:
            raise ParseError(f"unknown section kind {kind}", start)
    if r.pos != len(r.buf):
        raise ParseError("trailing bytes after last section", r.pos)
    if not isinstance(meta, dict):
        raise ParseError("container has no manifest section", r.pos)
    return meta, arrays


def _decode_tensor(payload, kind, offset):
    r = _Reader(payload)
    try:
        (ndim,) = r.unpack("<B", "tensor rank")
        dims = r.unpack(f"<{ndim}Q", "tensor dims")
    except ParseError as exc:
        raise ParseError("malformed tensor header", offset + exc.offset) from None
    dtype = _DTYPES[kind]
    count = int(np.prod(dims, dtype=np.int64)) if ndim else 1
    if len(payload) - r.pos != count * dtype.itemsize:
        raise ParseError("tensor payload size does not match its shape", offset + r.pos)
    return np.frombuffer(payload, dtype=dtype, offset=r.pos).reshape(dims).astype(dtype.newbyteorder("="))


def read(path, magic):
    with open(path, "rb") as fh:
        return decode(fh.read(), magic)


def file_sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()
