"""Weight container (.msw): fixed preamble, JSON manifest, aligned raw payload.

Layout::

    bytes 0..7     magic b"MSWEIGHT"
    bytes 8..15    manifest length n, uint64 little-endian
    bytes 16..16+n UTF-8 JSON manifest
    zero padding up to the next multiple of 64
    payload        raw little-endian values; every entry starts on a
                   64-byte boundary of the payload

The manifest is ``{"format_version": 1, "entries": [{"name", "shape",
"dtype", "byte_offset", "byte_length"}, ...]}`` with offsets relative to
the start of the payload.
"""

from __future__ import annotations

import json
import struct
from collections import OrderedDict
from typing import Dict, List

import numpy as np

from ..core.nn import Module

MAGIC = b"MSWEIGHT"
FORMAT_VERSION = 1
ALIGN = 64
_DTYPES = {"float32": "<f4", "float64": "<f8"}


class WeightFormatError(ValueError):
    """The file is not a well-formed container."""


class WeightMismatchError(KeyError):
    """The container does not match the target model; ``diff`` lists every difference."""

    def __init__(self, diff: List[str]):
        self.diff = diff
        super().__init__("weights do not match model:\n  " + "\n  ".join(diff))

    def __str__(self) -> str:
        return self.args[0]


def _align(n: int) -> int:
    return (n + ALIGN - 1) // ALIGN * ALIGN


def encode(state: Dict[str, np.ndarray]) -> bytes:
    entries, chunks, offset = [], [], 0
    for name, arr in state.items():
        arr = np.asarray(arr)
        key = arr.dtype.name
        if key not in _DTYPES:
            raise TypeError(f"{name}: unsupported dtype {arr.dtype}")
        raw = np.ascontiguousarray(arr, dtype=_DTYPES[key]).tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "dtype": key,
                        "byte_offset": offset, "byte_length": len(raw)})
        pad = _align(len(raw)) - len(raw)
        chunks.append(raw + b"\0" * pad)
        offset += len(raw) + pad
    manifest = json.dumps({"format_version": FORMAT_VERSION, "entries": entries},
                          sort_keys=True, separators=(",", ":")).encode("utf-8")
    head = MAGIC + struct.pack("<Q", len(manifest)) + manifest
    head += b"\0" * (_align(len(head)) - len(head))
    return head + b"".join(chunks)


def read_manifest(buf: bytes):
    """Validate the preamble and manifest; return ``(manifest, payload_start)``."""
    if len(buf) < 16 or buf[:8] != MAGIC:
        raise WeightFormatError("not a weight container (bad magic)")
    (n,) = struct.unpack("<Q", buf[8:16])
    if 16 + n > len(buf):
        raise WeightFormatError(f"truncated manifest: declares {n} bytes, file has {len(buf) - 16}")
    try:
        manifest = json.loads(buf[16:16 + n].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise WeightFormatError(f"manifest is not valid JSON: {exc}") from None
    if not isinstance(manifest, dict) or not isinstance(manifest.get("entries"), list):
        raise WeightFormatError("manifest must be an object with an 'entries' list")
    version = manifest.get("format_version")
    if version != FORMAT_VERSION:
        raise WeightFormatError(f"unsupported format version {version!r} (expected {FORMAT_VERSION})")
    start = _align(16 + n)
    payload = len(buf) - start
    spans, seen = [], set()
    for e in manifest["entries"]:
        try:
            name, shape, dtype = e["name"], e["shape"], e["dtype"]
            off, length = int(e["byte_offset"]), int(e["byte_length"])
        except (KeyError, TypeError, ValueError):
            raise WeightFormatError(f"malformed manifest entry {e!r}") from None
        if name in seen:
            raise WeightFormatError(f"duplicate entry {name}")
        seen.add(name)
        if dtype not in _DTYPES:
            raise WeightFormatError(f"{name}: unsupported dtype {dtype!r}")
        if off % ALIGN:
            raise WeightFormatError(f"{name}: offset {off} is not {ALIGN}-byte aligned")
        expect = int(np.prod(shape, dtype=np.int64)) * np.dtype(_DTYPES[dtype]).itemsize
        if length != expect:
            raise WeightFormatError(f"{name}: byte_length {length} but shape {shape} x {dtype} needs {expect}")
        if off < 0 or off + length > payload:
            raise WeightFormatError(f"{name}: bytes {off}..{off + length} exceed payload of {payload} (truncated?)")
        spans.append((off, off + length, name))
    spans.sort()
    for (a0, a1, an), (b0, _, bn) in zip(spans, spans[1:]):
        if b0 < a1:
            raise WeightFormatError(f"entries {an} and {bn} overlap")
    return manifest, start


def decode(buf: bytes) -> "OrderedDict[str, np.ndarray]":
    manifest, start = read_manifest(buf)
    out: "OrderedDict[str, np.ndarray]" = OrderedDict()
    for e in manifest["entries"]:
        lo = start + e["byte_offset"]
        arr = np.frombuffer(buf[lo:lo + e["byte_length"]], dtype=_DTYPES[e["dtype"]])
        out[e["name"]] = arr.reshape(e["shape"]).astype(e["dtype"])
    return out


def save_weights(model: Module, path) -> None:
    with open(path, "wb") as f:
        f.write(encode(model.state_dict()))


def read_weights(path) -> "OrderedDict[str, np.ndarray]":
    with open(path, "rb") as f:
        return decode(f.read())


def state_diff(own: Dict[str, np.ndarray], other: Dict[str, np.ndarray]) -> List[str]:
    diff = []
    for name in sorted(set(own) - set(other)):
        diff.append(f"missing: {name} {list(own[name].shape)}")
    for name in sorted(set(other) - set(own)):
        diff.append(f"unexpected: {name} {list(np.shape(other[name]))}")
    for name in sorted(set(own) & set(other)):
        if tuple(np.shape(other[name])) != own[name].shape:
            diff.append(f"shape: {name} file {list(np.shape(other[name]))} model {list(own[name].shape)}")
    return diff


def load_weights(path, model: Module) -> Module:
    state = read_weights(path)
    diff = state_diff(model.state_dict(), state)
    if diff:
        raise WeightMismatchError(diff)
    model.load_state_dict(state)
    return model
