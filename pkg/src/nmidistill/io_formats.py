"""Binary codecs for attention/feature dumps and checkpoints, and the corpus manifest.

All binary formats share one layout::

    magic (8 ASCII bytes) | header length (uint32, little-endian) | JSON header | payload

Payloads are little-endian, row-major. JSON headers are written with sorted keys
and compact separators so that encoding is byte-deterministic.
"""

from __future__ import annotations

import io
import json
import os
import struct
from dataclasses import dataclass, field
from typing import Any, BinaryIO, Iterable, Mapping

import numpy as np

from nmidistill.errors import CodecError

ATTENTION_MAGIC = b"ATND0001"
FEATURE_MAGIC = b"FETD0001"
CHECKPOINT_MAGIC = b"CKPT0001"

STOCHASTIC_ATOL = 1e-6

_DTYPES = {"float64": np.dtype("<f8"), "float32": np.dtype("<f4")}


def dtype_name(array: np.ndarray) -> str:
    for name, dt in _DTYPES.items():
        if array.dtype == dt or array.dtype == dt.newbyteorder("="):
            return name
    raise CodecError(f"unsupported element type {array.dtype}; expected float32 or float64")


def _require_finite(array: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(array)):
        raise CodecError(f"{what} contains non-finite values")


@dataclass(frozen=True)
class AttentionStack:
    """Per-layer, per-head row-stochastic attention for a single image: shape [L, M, N, N]."""

    data: np.ndarray

    def __post_init__(self):
        data = self.data
        if data.ndim != 4 or data.shape[2] != data.shape[3]:
            raise ValueError(f"attention stack must have shape [L, M, N, N], got {data.shape}")
        if min(data.shape) < 1:
            raise ValueError(f"attention stack has an empty axis: {data.shape}")

    @property
    def layers(self) -> int:
        return self.data.shape[0]

    @property
    def heads(self) -> int:
        return self.data.shape[1]

    @property
    def tokens(self) -> int:
        return self.data.shape[2]

    def check_stochastic(self, atol: float = STOCHASTIC_ATOL) -> None:
        d = self.data
        if np.any(d < 0) or np.any(d > 1):
            raise ValueError("attention entries must lie in [0, 1]")
        err = np.abs(d.sum(axis=-1) - 1.0).max()
        if err > atol:
            raise ValueError(f"attention rows are not stochastic (max row-sum error {err:.3g})")


@dataclass(frozen=True)
class FeatureStack:
    """Per-layer token features for a single image: shape [layers, N, D]."""

    data: np.ndarray

    def __post_init__(self):
        if self.data.ndim != 3 or min(self.data.shape) < 1:
            raise ValueError(f"feature stack must have shape [layers, N, D], got {self.data.shape}")

    @property
    def layers(self) -> int:
        return self.data.shape[0]

    @property
    def tokens(self) -> int:
        return self.data.shape[1]

    @property
    def dim(self) -> int:
        return self.data.shape[2]


# ---------------------------------------------------------------------------
# framing helpers


def _frame(magic: bytes, header: Mapping[str, Any], payload: bytes) -> bytes:
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return magic + struct.pack("<I", len(head)) + head + payload


def _unframe(blob: bytes, magic: bytes) -> tuple[dict, memoryview]:
    if len(blob) < 12:
        raise CodecError("truncated stream: missing magic/header length")
    if blob[:8] != magic:
        raise CodecError(f"bad magic {blob[:8]!r}, expected {magic!r}")
    (hlen,) = struct.unpack("<I", blob[8:12])
    if len(blob) < 12 + hlen:
        raise CodecError("truncated stream: header shorter than declared")
    try:
        header = json.loads(blob[12 : 12 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CodecError(f"malformed header: {exc}") from None
    if not isinstance(header, dict):
        raise CodecError("malformed header: expected a JSON object")
    return header, memoryview(blob)[12 + hlen :]


def _read_source(source) -> bytes:
    if isinstance(source, (bytes, bytearray, memoryview)):
        return bytes(source)
    if isinstance(source, (str, os.PathLike)):
        with open(source, "rb") as fh:
            return fh.read()
    return source.read()


def _emit(blob: bytes, destination) -> bytes:
    if destination is None:
        return blob
    if isinstance(destination, (str, os.PathLike)):
        with open(destination, "wb") as fh:
            fh.write(blob)
    else:
        destination.write(blob)
    return blob


def _positive_int(header: dict, key: str) -> int:
    value = header.get(key)
    if not isinstance(value, int) or isinstance(value, bool) or value < 1:
        raise CodecError(f"header field {key!r} must be a positive integer, got {value!r}")
    return value


def _header_dtype(header: dict) -> np.dtype:
    name = header.get("dtype")
    if name not in _DTYPES:
        raise CodecError(f"unsupported dtype {name!r}")
    return _DTYPES[name]


def _payload_array(payload: memoryview, dtype: np.dtype, shape: tuple[int, ...]) -> np.ndarray:
    expected = int(np.prod(shape)) * dtype.itemsize
    if len(payload) != expected:
        raise CodecError(f"payload has {len(payload)} bytes but header shape {list(shape)} needs {expected}")
    arr = np.frombuffer(payload, dtype=dtype).reshape(shape).astype(dtype.newbyteorder("="))
    _require_finite(arr, "payload")
    return arr


# ---------------------------------------------------------------------------
# attention / feature dumps


def encode_attention_dump(stack: AttentionStack, destination: str | os.PathLike | BinaryIO | None = None) -> bytes:
    """Serialize an attention stack; also writes to ``destination`` when given."""
    data = stack.data
    _require_finite(data, "attention stack")
    try:
        stack.check_stochastic()
    except ValueError as exc:
        raise CodecError(str(exc)) from None
    name = dtype_name(data)
    header = {"layers": stack.layers, "heads": stack.heads, "tokens": stack.tokens, "dtype": name}
    payload = np.ascontiguousarray(data, dtype=_DTYPES[name]).tobytes()
    return _emit(_frame(ATTENTION_MAGIC, header, payload), destination)


def decode_attention_dump(source) -> AttentionStack:
    header, payload = _unframe(_read_source(source), ATTENTION_MAGIC)
    shape = (_positive_int(header, "layers"), _positive_int(header, "heads"))
    n = _positive_int(header, "tokens")
    arr = _payload_array(payload, _header_dtype(header), shape + (n, n))
    stack = AttentionStack(arr)
    try:
        stack.check_stochastic()
    except ValueError as exc:
        raise CodecError(str(exc)) from None
    return stack


def encode_feature_dump(stack: FeatureStack, destination=None) -> bytes:
    data = stack.data
    _require_finite(data, "feature stack")
    name = dtype_name(data)
    header = {"layers": stack.layers, "tokens": stack.tokens, "dim": stack.dim, "dtype": name}
    payload = np.ascontiguousarray(data, dtype=_DTYPES[name]).tobytes()
    return _emit(_frame(FEATURE_MAGIC, header, payload), destination)


def decode_feature_dump(source) -> FeatureStack:
    header, payload = _unframe(_read_source(source), FEATURE_MAGIC)
    shape = tuple(_positive_int(header, k) for k in ("layers", "tokens", "dim"))
    return FeatureStack(_payload_array(payload, _header_dtype(header), shape))


# ---------------------------------------------------------------------------
# checkpoints


def encode_checkpoint(params: Mapping[str, np.ndarray] | Iterable[tuple[str, np.ndarray]],
                      config: Mapping[str, Any] | None = None, destination=None) -> bytes:
    """Serialize named tensors plus a JSON-able config.

    ``params`` may be a mapping or a sequence of ``(name, array)`` pairs; pairs
    are checked for duplicate names. Tensors are laid out sorted by name.
    """
    items = list(params.items()) if isinstance(params, Mapping) else list(params)
    seen = set()
    for name, _ in items:
        if name in seen:
            raise CodecError(f"duplicate tensor name {name!r}")
        seen.add(name)
    entries, chunks, offset = [], [], 0
    for name, value in sorted(items, key=lambda kv: kv[0]):
        arr = np.asarray(value)
        _require_finite(arr, f"tensor {name!r}")
        dname = dtype_name(arr)
        raw = np.ascontiguousarray(arr, dtype=_DTYPES[dname]).tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "dtype": dname, "offset": offset})
        chunks.append(raw)
        offset += len(raw)
    header = {"config": dict(config or {}), "tensors": entries}
    return _emit(_frame(CHECKPOINT_MAGIC, header, b"".join(chunks)), destination)


def decode_checkpoint(source) -> tuple[dict[str, np.ndarray], dict]:
    """Inverse of :func:`encode_checkpoint`; returns ``(params, config)``."""
    header, payload = _unframe(_read_source(source), CHECKPOINT_MAGIC)
    entries = header.get("tensors")
    if not isinstance(entries, list):
        raise CodecError("checkpoint header lacks a tensor table")
    params: dict[str, np.ndarray] = {}
    offset = 0
    for entry in entries:
        try:
            name, shape, dname, start = entry["name"], entry["shape"], entry["dtype"], entry["offset"]
        except (KeyError, TypeError):
            raise CodecError(f"malformed tensor entry {entry!r}") from None
        if name in params:
            raise CodecError(f"duplicate tensor name {name!r}")
        if dname not in _DTYPES:
            raise CodecError(f"unsupported dtype {dname!r} for {name!r}")
        if start != offset:
            raise CodecError(f"tensor {name!r} offset {start} does not follow previous tensor ({offset})")
        dt = _DTYPES[dname]
        nbytes = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
        if offset + nbytes > len(payload):
            raise CodecError(f"truncated stream: tensor {name!r} extends past end of payload")
        params[name] = _payload_array(payload[offset : offset + nbytes], dt, tuple(shape))
        offset += nbytes
    if offset != len(payload):
        raise CodecError(f"payload has {len(payload) - offset} trailing bytes")
    config = header.get("config", {})
    if not isinstance(config, dict):
        raise CodecError("checkpoint config must be a JSON object")
    return params, config


# ---------------------------------------------------------------------------
# corpus manifest

MODALITIES = ("rgb", "infrared")


class ManifestError(CodecError):
    def __init__(self, line: int, message: str):
        super().__init__(f"line {line}: {message}")
        self.line = line


@dataclass(frozen=True, slots=True)
class Record:
    path: str
    source_dataset: str
    modality: str = "rgb"
    sequence_id: str | None = None
    frame_index: int | None = None
    class_label: str | None = None

    def __post_init__(self):
        if not isinstance(self.path, str) or not self.path:
            raise ValueError("record path must be a non-empty string")
        if self.modality not in MODALITIES:
            raise ValueError(f"modality must be one of {MODALITIES}, got {self.modality!r}")
        if (self.sequence_id is None) != (self.frame_index is None):
            raise ValueError("frame_index must be present exactly when sequence_id is present")

    def to_json(self) -> str:
        obj = {"path": self.path, "source_dataset": self.source_dataset, "modality": self.modality}
        if self.sequence_id is not None:
            obj["sequence_id"] = self.sequence_id
            obj["frame_index"] = self.frame_index
        if self.class_label is not None:
            obj["class_label"] = self.class_label
        return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False)


@dataclass
class CorpusManifest:
    records: list[Record] = field(default_factory=list)
    provenance: list[dict] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.records)

    def check_unique_paths(self) -> None:
        seen = set()
        for i, rec in enumerate(self.records, start=1):
            if rec.path in seen:
                raise ManifestError(i, f"duplicate path {rec.path!r}")
            seen.add(rec.path)


_RECORD_KEYS = {"path", "source_dataset", "modality", "sequence_id", "frame_index", "class_label"}


def _record_from_obj(obj: Any, lineno: int) -> Record:
    if not isinstance(obj, dict):
        raise ManifestError(lineno, "record must be a JSON object")
    extra = set(obj) - _RECORD_KEYS
    if extra:
        raise ManifestError(lineno, f"unknown field(s) {sorted(extra)}")
    if "path" not in obj or "source_dataset" not in obj:
        raise ManifestError(lineno, "record needs 'path' and 'source_dataset'")
    frame = obj.get("frame_index")
    if frame is not None and (not isinstance(frame, int) or isinstance(frame, bool)):
        raise ManifestError(lineno, f"frame_index must be an integer, got {frame!r}")
    for key in ("path", "source_dataset", "sequence_id", "class_label"):
        if obj.get(key) is not None and not isinstance(obj[key], str):
            raise ManifestError(lineno, f"{key} must be a string")
    try:
        return Record(**obj)
    except (TypeError, ValueError) as exc:
        raise ManifestError(lineno, str(exc)) from None


def parse_manifest(text: str) -> CorpusManifest:
    """Parse JSON-lines manifest text. Blank lines are skipped; the first bad line aborts."""
    records: list[Record] = []
    seen: set[str] = set()
    for lineno, line in enumerate(io.StringIO(text), start=1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ManifestError(lineno, f"malformed record: {exc.msg}") from None
        rec = _record_from_obj(obj, lineno)
        if rec.path in seen:
            raise ManifestError(lineno, f"duplicate path {rec.path!r}")
        seen.add(rec.path)
        records.append(rec)
    return CorpusManifest(records)


def dump_manifest(manifest: CorpusManifest) -> str:
    return "".join(rec.to_json() + "\n" for rec in manifest.records)


def read_manifest(path: str | os.PathLike) -> CorpusManifest:
    with open(path, encoding="utf-8") as fh:
        return parse_manifest(fh.read())
