"""KTAN v1 checkpoint container.

Layout (all integers little-endian)::

    0..3      b"KTAN"
    4..7      uint32 version (1)
    8..15     uint64 header length H
    16..16+H  UTF-8 JSON: {name: {"dtype", "nbytes", "offset", "shape"}}
              with sorted keys and compact separators
    16+H..    data section; offsets are relative to its start

Tensor data is row-major little-endian f32 or f16. Writing is canonical:
entries are laid out in name order, so equal record sets give equal bytes.
"""

import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    CorruptHeader,
    DuplicateTensor,
    FormatError,
    IoError,
    NonFiniteData,
    NotFound,
    SizeMismatch,
)

MAGIC = b"KTAN"
VERSION = 1
PREAMBLE = struct.Struct("<4sIQ")

DTYPES = {"f32": np.dtype("<f4"), "f16": np.dtype("<f2")}


def _dtype_for(name):
    try:
        return DTYPES[name]
    except (KeyError, TypeError):
        raise FormatError(f"unknown dtype {name!r}; expected one of {sorted(DTYPES)}") from None


@dataclass(eq=False)
class TensorRecord:
    """A named tensor with its raw storage dtype preserved.

    ``data`` is a flat little-endian array in the storage dtype. Use
    :meth:`values` for the f32 view used by all numerics.
    """

    name: str
    dtype: str
    shape: tuple
    data: np.ndarray

    def __post_init__(self):
        if not isinstance(self.name, str) or not self.name:
            raise FormatError("tensor name must be a non-empty string")
        np_dtype = _dtype_for(self.dtype)
        shape = tuple(int(d) for d in self.shape)
        if len(shape) < 1 or any(d < 1 for d in shape):
            raise FormatError(f"{self.name}: shape must be >=1 positive dims, got {list(self.shape)}")
        self.shape = shape
        data = np.ascontiguousarray(self.data).reshape(-1)
        if data.dtype != np_dtype:
            data = data.astype(np_dtype)
        if data.size != int(np.prod(shape)):
            raise SizeMismatch(
                f"{self.name}: {data.size} elements for shape {list(shape)}"
            )
        self.data = data

    @classmethod
    def from_array(cls, name, array, dtype="f32"):
        array = np.asarray(array)
        return cls(name, dtype, array.shape, array.astype(DTYPES[dtype]).reshape(-1))

    @property
    def numel(self):
        return int(self.data.size)

    def values(self):
        """Data promoted to f32 and reshaped."""
        return self.data.astype(np.float32).reshape(self.shape)

    def tobytes(self):
        return self.data.tobytes()

    def __eq__(self, other):
        if not isinstance(other, TensorRecord):
            return NotImplemented
        return (
            self.name == other.name
            and self.dtype == other.dtype
            and self.shape == other.shape
            and self.tobytes() == other.tobytes()
        )

    def __repr__(self):
        return f"TensorRecord({self.name!r}, {self.dtype}, {list(self.shape)})"


@dataclass(frozen=True)
class Entry:
    dtype: str
    shape: tuple
    offset: int
    nbytes: int

    @property
    def numel(self):
        return int(np.prod(self.shape))


@dataclass(frozen=True)
class CheckpointView:
    """Validated, lazily-read view of a KTAN file.

    Only the header is held in memory; tensor bytes are read on demand by
    :func:`read_tensor`. Instances are immutable and safe to share.
    """

    path: Path
    data_start: int
    total_bytes: int
    entries: dict = field(default_factory=dict)

    def names(self):
        return list(self.entries)

    def __contains__(self, name):
        return name in self.entries

    def __len__(self):
        return len(self.entries)


def _reject_duplicates(pairs):
    out = {}
    for key, value in pairs:
        if key in out:
            raise DuplicateTensor(key)
        out[key] = value
    return out


def _parse_entry(name, raw):
    if not isinstance(raw, dict):
        raise CorruptHeader(f"{name}: entry must be an object")
    try:
        dtype = raw["dtype"]
        shape = raw["shape"]
        offset = raw["offset"]
        nbytes = raw["nbytes"]
    except KeyError as exc:
        raise CorruptHeader(f"{name}: missing field {exc.args[0]!r}") from None
    np_dtype = _dtype_for(dtype)
    ints = [offset, nbytes] + (list(shape) if isinstance(shape, list) else [None])
    if not all(isinstance(v, int) and not isinstance(v, bool) for v in ints):
        raise CorruptHeader(f"{name}: shape/offset/nbytes must be integers")
    if not shape or any(d < 1 for d in shape) or offset < 0 or nbytes < 0:
        raise CorruptHeader(f"{name}: invalid shape/offset/nbytes")
    if nbytes != int(np.prod(shape)) * np_dtype.itemsize:
        raise CorruptHeader(f"{name}: nbytes {nbytes} does not match shape {shape} of {dtype}")
    return Entry(dtype, tuple(shape), offset, nbytes)


def load_checkpoint(path):
    """Open ``path`` and validate its header without reading tensor data."""
    path = Path(path)
    try:
        size = os.path.getsize(path)
        with open(path, "rb") as fh:
            preamble = fh.read(PREAMBLE.size)
            if len(preamble) < PREAMBLE.size:
                raise FormatError(f"{path}: truncated preamble")
            magic, version, header_len = PREAMBLE.unpack(preamble)
            if magic != MAGIC:
                raise FormatError(f"{path}: bad magic {magic!r}")
            if version != VERSION:
                raise FormatError(f"{path}: unsupported version {version}")
            if PREAMBLE.size + header_len > size:
                raise CorruptHeader(f"{path}: header length {header_len} exceeds file size")
            header_bytes = fh.read(header_len)
    except OSError as exc:
        raise IoError(str(exc)) from exc

    try:
        header = json.loads(header_bytes.decode("utf-8"), object_pairs_hook=_reject_duplicates)
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptHeader(f"{path}: unreadable header ({exc})") from None
    if not isinstance(header, dict):
        raise CorruptHeader(f"{path}: header must be a JSON object")

    data_start = PREAMBLE.size + header_len
    total = size - data_start
    entries = {}
    for name, raw in header.items():
        if not name:
            raise CorruptHeader("empty tensor name")
        entries[name] = _parse_entry(name, raw)

    spans = sorted((e.offset, e.offset + e.nbytes, n) for n, e in entries.items())
    prev_end, prev_name = 0, None
    for start, end, name in spans:
        if end > total:
            raise CorruptHeader(f"{name}: bytes [{start}, {end}) beyond data section of {total}")
        if start < prev_end:
            raise CorruptHeader(f"{name} overlaps {prev_name}")
        prev_end, prev_name = end, name

    ordered = {name: entries[name] for _, _, name in spans}
    return CheckpointView(path=path, data_start=data_start, total_bytes=total, entries=ordered)


def read_tensor(view, name):
    """Read one tensor from ``view``; rejects NaN/Inf after f32 promotion."""
    try:
        entry = view.entries[name]
    except KeyError:
        raise NotFound(name) from None
    try:
        with open(view.path, "rb") as fh:
            fh.seek(view.data_start + entry.offset)
            raw = fh.read(entry.nbytes)
    except OSError as exc:
        raise IoError(str(exc)) from exc
    if len(raw) != entry.nbytes:
        raise CorruptHeader(f"{name}: short read")
    data = np.frombuffer(raw, dtype=DTYPES[entry.dtype]).copy()
    bad = np.flatnonzero(~np.isfinite(data.astype(np.float32)))
    if bad.size:
        raise NonFiniteData(name, int(bad[0]))
    return TensorRecord(name, entry.dtype, entry.shape, data)


def read_all(view):
    return [read_tensor(view, name) for name in view.entries]


def encode_checkpoint(records):
    """Canonical KTAN bytes for ``records`` (order-independent)."""
    by_name = {}
    for rec in records:
        if rec.name in by_name:
            raise DuplicateTensor(rec.name)
        by_name[rec.name] = rec

    header = {}
    chunks = []
    offset = 0
    for name in sorted(by_name):
        rec = by_name[name]
        blob = rec.tobytes()
        header[name] = {
            "dtype": rec.dtype,
            "nbytes": len(blob),
            "offset": offset,
            "shape": list(rec.shape),
        }
        chunks.append(blob)
        offset += len(blob)
    header_bytes = json.dumps(
        header, sort_keys=True, separators=(",", ":"), ensure_ascii=False
    ).encode("utf-8")
    return PREAMBLE.pack(MAGIC, VERSION, len(header_bytes)) + header_bytes + b"".join(chunks)


def write_checkpoint(records, path):
    payload = encode_checkpoint(records)
    try:
        with open(path, "wb") as fh:
            fh.write(payload)
    except OSError as exc:
        raise IoError(str(exc)) from exc


def ingest_raw(manifest_path, out_path):
    """Build a KTAN checkpoint from raw little-endian blobs listed in a manifest.

    The manifest is a JSON array of ``{"name", "dtype", "shape", "file"}``;
    relative ``file`` paths resolve against the manifest's directory.
    """
    manifest_path = Path(manifest_path)
    try:
        items = json.loads(manifest_path.read_text(encoding="utf-8"))
    except OSError as exc:
        raise IoError(str(exc)) from exc
    except json.JSONDecodeError as exc:
        raise FormatError(f"{manifest_path}: invalid JSON ({exc})") from None
    if not isinstance(items, list):
        raise FormatError("manifest must be a JSON array")

    records = []
    for i, item in enumerate(items):
        if not isinstance(item, dict) or not {"name", "dtype", "shape", "file"} <= set(item):
            raise FormatError(f"manifest entry {i} needs name, dtype, shape, file")
        np_dtype = _dtype_for(item["dtype"])
        shape = item["shape"]
        if not isinstance(shape, list) or not shape or not all(
            isinstance(d, int) and d >= 1 for d in shape
        ):
            raise FormatError(f"manifest entry {i}: bad shape {shape!r}")
        blob_path = manifest_path.parent / item["file"]
        try:
            blob = blob_path.read_bytes()
        except OSError as exc:
            raise IoError(str(exc)) from exc
        expected = int(np.prod(shape)) * np_dtype.itemsize
        if len(blob) != expected:
            raise SizeMismatch(
                f"{item['name']}: blob has {len(blob)} bytes, shape {shape} "
                f"of {item['dtype']} needs {expected}"
            )
        records.append(
            TensorRecord(item["name"], item["dtype"], shape, np.frombuffer(blob, dtype=np_dtype))
        )
    write_checkpoint(records, out_path)
    return Path(out_path)
