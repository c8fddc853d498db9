"""safetensors-compatible F32 checkpoints with provenance metadata.

Layout: 8-byte little-endian header length N, N bytes of JSON header, then
the raw little-endian float32 payloads back to back. The header maps each
tensor name to ``{"dtype": "F32", "shape": [...], "data_offsets": [begin,
end]}`` plus a ``__metadata__`` string-to-string map. Tensors are written in
lexicographic name order and the header is space-padded to a multiple of 8
bytes, as the reference safetensors writer does.
"""

from __future__ import annotations

import hashlib
import json
import os
import re
import struct
from dataclasses import dataclass, field

import numpy as np

KINDS = ("teacher", "student", "task_vector", "merged")
_NAME_RE = re.compile(r"^[A-Za-z0-9_]+(\.[A-Za-z0-9_]+)*$")


class CheckpointError(ValueError):
    """Base class for unreadable or unwritable checkpoints."""


class TruncatedHeaderError(CheckpointError):
    pass


class MalformedHeaderError(CheckpointError):
    pass


class OffsetError(CheckpointError):
    """Offsets overlap, leave gaps, or run past the payload."""


class UnsupportedDtypeError(CheckpointError):
    pass


class PayloadSizeError(CheckpointError):
    """Declared payload size differs from the bytes actually present."""


class NonFiniteError(CheckpointError):
    pass


@dataclass
class ParameterSet:
    """Name -> float32 array map, kept in lexicographic order, plus string metadata.

    Well-known metadata keys: ``arch_id``, ``init_digest``, ``steps``,
    ``kind``. Anything else (merge weights, source labels) rides along.
    """

    entries: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        # canonical order: lexicographic by name
        self.entries = {k: np.ascontiguousarray(self.entries[k], dtype=np.float32) for k in sorted(self.entries)}
        self.meta = {str(k): str(v) for k, v in self.meta.items()}

    def __getitem__(self, name):
        return self.entries[name]

    def __contains__(self, name):
        return name in self.entries

    def __len__(self):
        return len(self.entries)

    def keys(self):
        return self.entries.keys()

    def items(self):
        return self.entries.items()

    @property
    def kind(self):
        return self.meta.get("kind")

    @property
    def init_digest(self):
        return self.meta.get("init_digest")

    @property
    def steps(self):
        return int(self.meta.get("steps", 0))

    def num_parameters(self, prefix_filter=None) -> int:
        return sum(v.size for k, v in self.entries.items() if prefix_filter is None or prefix_filter(k))

    def with_meta(self, **updates):
        meta = dict(self.meta)
        meta.update({k: str(v) for k, v in updates.items()})
        return ParameterSet(dict(self.entries), meta)

    def validate(self):
        for name in self.entries:
            if not name.isascii() or not _NAME_RE.match(name):
                raise CheckpointError(f"invalid parameter name {name!r}")
        kind = self.meta.get("kind")
        if kind is not None and kind not in KINDS:
            raise CheckpointError(f"unknown kind {kind!r}")
        if kind in ("student", "task_vector", "merged") and not self.meta.get("init_digest"):
            raise CheckpointError(f"kind {kind!r} requires init_digest")
        if int(self.meta.get("steps", 0)) < 0:
            raise CheckpointError("steps must be non-negative")

    def equals(self, other) -> bool:
        """Bit-exact equality of entries (order included) and metadata."""
        if list(self.entries) != list(other.entries) or self.meta != other.meta:
            return False
        return all(
            a.shape == b.shape and a.tobytes() == b.tobytes() for a, b in zip(self.entries.values(), other.entries.values())
        )


# ---------------------------------------------------------------- encoding


def encode(tensors: dict, metadata: dict | None = None) -> bytes:
    """Serialize float32 tensors; names are emitted in lexicographic order."""
    header = {}
    if metadata is not None:
        header["__metadata__"] = {str(k): str(v) for k, v in sorted(metadata.items())}
    chunks, offset = [], 0
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name], dtype="<f4")
        if not np.all(np.isfinite(arr)):
            raise NonFiniteError(f"tensor {name!r} contains NaN or Inf")
        raw = arr.tobytes()
        header[name] = {"dtype": "F32", "shape": list(arr.shape), "data_offsets": [offset, offset + len(raw)]}
        chunks.append(raw)
        offset += len(raw)
    text = json.dumps(header, separators=(",", ":")).encode("ascii")
    text += b" " * (-len(text) % 8)
    return struct.pack("<Q", len(text)) + text + b"".join(chunks)


def decode(blob: bytes):
    """Inverse of :func:`encode`. Returns ``(tensors, metadata)``."""
    if len(blob) < 8:
        raise TruncatedHeaderError(f"file is {len(blob)} bytes, too short for the header length")
    (n,) = struct.unpack("<Q", blob[:8])
    if 8 + n > len(blob):
        raise TruncatedHeaderError(f"truncated header: declares {n} bytes, only {len(blob) - 8} present")
    try:
        header = json.loads(blob[8 : 8 + n].decode("ascii"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise MalformedHeaderError(f"malformed header: {exc}") from None
    if not isinstance(header, dict):
        raise MalformedHeaderError("malformed header: not a JSON object")
    metadata = header.pop("__metadata__", {})
    if not isinstance(metadata, dict) or not all(isinstance(v, str) for v in metadata.values()):
        raise MalformedHeaderError("malformed header: __metadata__ must map strings to strings")

    payload = memoryview(blob)[8 + n :]
    spans = []
    for name, info in header.items():
        if not isinstance(info, dict) or not {"dtype", "shape", "data_offsets"} <= set(info):
            raise MalformedHeaderError(f"malformed header entry for {name!r}")
        if info["dtype"] != "F32":
            raise UnsupportedDtypeError(f"unsupported dtype {info['dtype']!r} for {name!r}")
        shape, offsets = info["shape"], info["data_offsets"]
        if (
            not isinstance(shape, list)
            or not all(isinstance(s, int) and s >= 0 for s in shape)
            or not isinstance(offsets, list)
            or len(offsets) != 2
            or not all(isinstance(o, int) for o in offsets)
        ):
            raise MalformedHeaderError(f"malformed shape/offsets for {name!r}")
        begin, end = offsets
        if end < begin or end - begin != 4 * int(np.prod(shape, dtype=np.int64)):
            raise OffsetError(f"offsets {offsets} of {name!r} do not match shape {shape}")
        spans.append((begin, end, name, shape))

    spans.sort()
    cursor = 0
    for begin, end, name, _ in spans:
        if begin < cursor:
            raise OffsetError(f"offset overlap at {name!r}: begins at {begin}, previous tensor ends at {cursor}")
        if begin > cursor:
            raise OffsetError(f"gap before {name!r}: begins at {begin}, expected {cursor}")
        cursor = end
    if cursor > len(payload):
        raise OffsetError(f"offsets run to byte {cursor} but payload has {len(payload)}")
    if cursor != len(payload):
        raise PayloadSizeError(f"declared payload {cursor} bytes, file carries {len(payload)}")

    tensors = {}
    for begin, end, name, shape in spans:
        arr = np.frombuffer(payload[begin:end], dtype="<f4").reshape(shape)
        tensors[name] = arr.astype(np.float32)
    # header order, which encode() makes lexicographic
    ordered = {name: tensors[name] for name in header}
    return ordered, metadata


def write_tensors(path, tensors: dict, metadata: dict | None = None):
    blob = encode(tensors, metadata if metadata is not None else {})
    tmp = f"{os.fspath(path)}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(blob)
    os.replace(tmp, path)


def read_tensors(path):
    with open(path, "rb") as fh:
        return decode(fh.read())


def write_checkpoint(ps: ParameterSet, path):
    ps.validate()
    write_tensors(path, ps.entries, ps.meta)


def read_checkpoint(path) -> ParameterSet:
    tensors, metadata = read_tensors(path)
    return ParameterSet(tensors, metadata)


def canonical_bytes(ps: ParameterSet) -> bytes:
    """Header + payload without metadata; the identity of a parameter set."""
    return encode(ps.entries, None)


def init_digest(ps: ParameterSet) -> str:
    return hashlib.sha256(canonical_bytes(ps)).hexdigest()
