"""Single-file binary container used by every asset type.

Layout (all integers little-endian)::

    0   4   magic  b"GHSA"
    4   2   format version (uint16)
    6   2   byte-order mark, the uint16 0x0102 (bytes 02 01)
    8   8   manifest length M (uint64)
    16  M   manifest, UTF-8 JSON
    ..      zero padding up to a multiple of 16
    D   ..  blobs, each starting on a 16-byte boundary relative to D

The manifest holds ``kind``, free-form ``meta`` and a ``blobs`` list of
``{name, dtype, shape, offset, nbytes, sha256}``; ``offset`` is relative to
``D``. Blob dtypes are always little-endian.
"""

import hashlib
import json
import struct

import numpy as np

from ..errors import CorruptAsset

MAGIC = b"GHSA"
VERSION = 1
BOM = 0x0102
ALIGN = 16
_HEADER = struct.Struct("<4sHHQ")
_ALLOWED = {"<f4", "<f8", "<i4", "<i8", "|u1", "|b1"}


def _pad(n):
    return (-n) % ALIGN


def _le(arr):
    arr = np.asarray(arr)
    if arr.dtype.byteorder == ">":
        arr = arr.astype(arr.dtype.newbyteorder("<"))
    return np.asarray(arr, order="C")


def pack(kind, blobs, meta=None):
    """Serialise ``blobs`` (name -> array) into container bytes."""
    entries = []
    chunks = []
    offset = 0
    for name, arr in blobs.items():
        a = _le(arr)
        dt = a.dtype.str
        if dt not in _ALLOWED:
            raise ValueError(f"unsupported blob dtype {a.dtype} for {name!r}")
        raw = a.tobytes()
        entries.append({"name": name, "dtype": dt, "shape": list(a.shape), "offset": offset,
                        "nbytes": len(raw), "sha256": hashlib.sha256(raw).hexdigest()})
        chunks.append(raw + b"\0" * _pad(len(raw)))
        offset += len(raw) + _pad(len(raw))
    manifest = json.dumps({"kind": kind, "version": VERSION, "meta": meta or {},
                           "blobs": entries}, sort_keys=True).encode()
    head = _HEADER.pack(MAGIC, VERSION, BOM, len(manifest)) + manifest
    head += b"\0" * _pad(len(head))
    return head + b"".join(chunks)


def unpack(data, kind=None):
    """Parse container bytes. Returns ``(kind, meta, blobs)``.

    Raises :class:`CorruptAsset` naming the failing field on any problem.
    """
    if len(data) < _HEADER.size:
        raise CorruptAsset("file shorter than header", "header")
    magic, version, bom, mlen = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise CorruptAsset(f"bad magic {magic!r}", "magic")
    if bom != BOM:
        raise CorruptAsset("byte-order mark mismatch (not little-endian)", "byte_order")
    if version != VERSION:
        raise CorruptAsset(f"unsupported version {version}", "version")
    start = _HEADER.size
    if start + mlen > len(data):
        raise CorruptAsset("manifest runs past end of file", "manifest")
    try:
        man = json.loads(data[start:start + mlen].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptAsset(f"manifest is not valid JSON: {exc}", "manifest") from None
    if man.get("version") != version:
        raise CorruptAsset("manifest version disagrees with header", "version")
    if kind is not None and man.get("kind") != kind:
        raise CorruptAsset(f"expected a {kind!r} asset, found {man.get('kind')!r}", "kind")
    base = start + mlen
    base += _pad(base)
    blobs = {}
    for e in man.get("blobs", []):
        name = e.get("name", "?")
        dt = e.get("dtype")
        if dt not in _ALLOWED:
            raise CorruptAsset(f"unsupported dtype {dt!r}", name)
        lo = base + int(e["offset"])
        hi = lo + int(e["nbytes"])
        if int(e["offset"]) % ALIGN or hi > len(data):
            raise CorruptAsset("blob out of bounds or misaligned", name)
        raw = bytes(data[lo:hi])
        if hashlib.sha256(raw).hexdigest() != e.get("sha256"):
            raise CorruptAsset("checksum mismatch", name)
        dtype = np.dtype(dt)
        shape = tuple(e["shape"])
        if int(np.prod(shape, dtype=np.int64)) * dtype.itemsize != len(raw):
            raise CorruptAsset("shape does not match byte count", name)
        blobs[name] = np.frombuffer(raw, dtype=dtype).reshape(shape).copy()
    return man["kind"], man.get("meta", {}), blobs


def write(path, kind, blobs, meta=None):
    with open(path, "wb") as fh:
        fh.write(pack(kind, blobs, meta))


def read(path, kind=None):
    with open(path, "rb") as fh:
        return unpack(fh.read(), kind)
