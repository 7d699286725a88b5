"""NTC1 checkpoint container, task vectors and layer selection.

Layout (little-endian)::

    b"NTC1" | u64 header length H | H bytes of UTF-8 JSON | payloads

The JSON header maps tensor names to ``{"dtype", "shape", "offset", "nbytes"}``
with offsets relative to the first payload byte, plus a ``"__meta__"`` entry.
Keys are written sorted; payloads are written in checkpoint order, so the
original order is recovered by sorting on offset.
"""
from __future__ import annotations

import fnmatch
import hashlib
import json
import os
import struct
import tempfile
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

from .errors import CorruptFile, FormatError, IncompatibleCheckpoints, InvalidInput

MAGIC = b"NTC1"
META_KEY = "__meta__"
FORMAT_VERSION = "1"
ALIGN = 8
_STORE_DTYPE = np.dtype("<f4")


def _pad(n: int) -> int:
    return (-n) % ALIGN


@dataclass
class Checkpoint:
    """Ordered name -> tensor map plus string metadata.

    Tensors may be held in any float dtype in memory; they are stored as
    32-bit floats.
    """

    tensors: "OrderedDict[str, np.ndarray]" = field(default_factory=OrderedDict)
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.tensors = OrderedDict(self.tensors)
        for name in self.tensors:
            _check_name(name)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self.tensors

    def names(self) -> list[str]:
        return list(self.tensors)

    def shapes(self) -> dict[str, tuple]:
        return {k: tuple(v.shape) for k, v in self.tensors.items()}

    def num_parameters(self) -> int:
        return int(sum(v.size for v in self.tensors.values()))

    def copy(self) -> "Checkpoint":
        return Checkpoint(OrderedDict((k, v.copy()) for k, v in self.tensors.items()), dict(self.meta))

    def as_float64(self) -> "Checkpoint":
        return Checkpoint(
            OrderedDict((k, np.asarray(v, dtype=np.float64).copy()) for k, v in self.tensors.items()),
            dict(self.meta),
        )


def _check_name(name) -> None:
    if not isinstance(name, str) or not name or "\x00" in name:
        raise FormatError(f"invalid tensor name {name!r}")
    if name == META_KEY:
        raise FormatError(f"tensor name {META_KEY!r} is reserved")


def encode_checkpoint(c: Checkpoint) -> bytes:
    index = {}
    chunks = []
    offset = 0
    for name, arr in c.tensors.items():
        _check_name(name)
        data = np.ascontiguousarray(arr, dtype=_STORE_DTYPE).tobytes()
        index[name] = {
            "dtype": "f32",
            "shape": [int(s) for s in np.shape(arr)],
            "offset": offset,
            "nbytes": len(data),
        }
        chunks.append(data)
        # an empty tensor still takes one aligned slot, so offsets alone recover insertion order
        pad = _pad(len(data)) if data else ALIGN
        if pad:
            chunks.append(b"\x00" * pad)
        offset += len(data) + pad
    index[META_KEY] = {str(k): str(v) for k, v in c.meta.items()}
    header = json.dumps(index, sort_keys=True, separators=(",", ":"), ensure_ascii=False).encode("utf-8")
    # pad with spaces (valid JSON whitespace) so payloads start 8-byte aligned in the file
    header += b" " * _pad(len(MAGIC) + 8 + len(header))
    return MAGIC + struct.pack("<Q", len(header)) + header + b"".join(chunks)


def decode_checkpoint(buf: bytes, source: str = "<bytes>") -> Checkpoint:
    if len(buf) < 12:
        if buf[:4] != MAGIC[: len(buf[:4])]:
            raise FormatError(f"{source}: bad magic {buf[:4]!r}")
        raise CorruptFile(f"{source}: file too short ({len(buf)} bytes)")
    if buf[:4] != MAGIC:
        raise FormatError(f"{source}: bad magic {buf[:4]!r}")
    (hlen,) = struct.unpack("<Q", buf[4:12])
    if 12 + hlen > len(buf):
        raise CorruptFile(f"{source}: header length {hlen} exceeds file size {len(buf)}")
    try:
        pairs = json.loads(buf[12:12 + hlen].decode("utf-8"), object_pairs_hook=_reject_duplicates)
    except UnicodeDecodeError as e:
        raise FormatError(f"{source}: header is not UTF-8: {e}") from None
    except json.JSONDecodeError as e:
        raise FormatError(f"{source}: header is not valid JSON: {e}") from None
    if not isinstance(pairs, dict):
        raise FormatError(f"{source}: header must be a JSON object")
    meta = pairs.pop(META_KEY, {})
    if not isinstance(meta, dict):
        raise FormatError(f"{source}: {META_KEY} must be an object")
    payload = memoryview(buf)[12 + hlen:]
    entries = []
    for name, info in pairs.items():
        _check_name(name)
        try:
            dtype, shape, off, nbytes = info["dtype"], info["shape"], int(info["offset"]), int(info["nbytes"])
        except (KeyError, TypeError, ValueError):
            raise FormatError(f"{source}: malformed index entry for {name!r}") from None
        if dtype != "f32":
            raise FormatError(f"{source}: unsupported dtype {dtype!r} for {name!r}")
        count = int(np.prod(shape, dtype=np.int64)) if shape else 1
        if nbytes != count * 4:
            raise FormatError(f"{source}: {name!r} nbytes {nbytes} does not match shape {shape}")
        if off < 0 or off + nbytes > len(payload):
            raise CorruptFile(f"{source}: payload for {name!r} is truncated")
        entries.append((off, nbytes, name, shape))
    entries.sort(key=lambda e: (e[0], e[2]))
    tensors = OrderedDict()
    for off, nbytes, name, shape in entries:
        arr = np.frombuffer(payload[off:off + nbytes], dtype=_STORE_DTYPE).reshape(shape).copy()
        tensors[name] = arr
    return Checkpoint(tensors, {str(k): str(v) for k, v in meta.items()})


def _reject_duplicates(pairs):
    seen = {}
    for k, v in pairs:
        if k in seen:
            raise FormatError(f"duplicate key {k!r} in header")
        seen[k] = v
    return seen


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    try:
        buf = path.read_bytes()
    except OSError as e:
        raise OSError(f"cannot read checkpoint {path}: {e}") from e
    return decode_checkpoint(buf, str(path))


def atomic_write_bytes(path, data: bytes) -> None:
    """Write via a temp file in the same directory, fsync, then rename."""
    path = Path(path)
    parent = path.parent if str(path.parent) else Path(".")
    try:
        fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", suffix=".tmp", dir=parent)
    except OSError as e:
        raise OSError(f"cannot write {path}: {e}") from e
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        try:
            os.unlink(tmp)
        except OSError:
            pass
        raise


def save_checkpoint(c: Checkpoint, path) -> None:
    atomic_write_bytes(path, encode_checkpoint(c))


@dataclass(frozen=True)
class LayerSelector:
    """Glob-based choice of mergeable layers; only 2-D tensors are ever selected."""

    include_patterns: tuple = ("*",)
    exclude_patterns: tuple = ("*embed*", "*head*", "*classifier*", "*norm*")
    require_2d: bool = True

    def matches(self, name: str) -> bool:
        if not any(fnmatch.fnmatchcase(name, p) for p in self.include_patterns):
            return False
        return not any(fnmatch.fnmatchcase(name, p) for p in self.exclude_patterns)

    def select(self, c: Checkpoint) -> list[str]:
        return [n for n, t in c.tensors.items() if np.ndim(t) == 2 and self.matches(n)]


DEFAULT_SELECTOR = LayerSelector()


@dataclass
class TaskVector:
    """Per-layer weight deltas ``theta_t - theta_0`` in float64."""

    layers: "OrderedDict[str, np.ndarray]"
    base_id: str = ""

    def __post_init__(self):
        self.layers = OrderedDict(self.layers)

    def names(self) -> list[str]:
        return list(self.layers)

    def __getitem__(self, name):
        return self.layers[name]

    def map(self, fn) -> "TaskVector":
        return TaskVector(OrderedDict((k, fn(v)) for k, v in self.layers.items()), self.base_id)

    def zeros_like(self) -> "TaskVector":
        return self.map(np.zeros_like)

    def scale(self, s: float) -> "TaskVector":
        return self.map(lambda v: s * v)

    def __add__(self, other: "TaskVector") -> "TaskVector":
        _same_layout(self, other)
        return TaskVector(OrderedDict((k, v + other.layers[k]) for k, v in self.layers.items()), self.base_id)

    def __sub__(self, other: "TaskVector") -> "TaskVector":
        _same_layout(self, other)
        return TaskVector(OrderedDict((k, v - other.layers[k]) for k, v in self.layers.items()), self.base_id)


def _same_layout(a: TaskVector, b: TaskVector) -> None:
    if list(a.layers) != list(b.layers):
        raise IncompatibleCheckpoints(f"task vectors cover different layers: {list(a.layers)} vs {list(b.layers)}")
    for k, v in a.layers.items():
        if v.shape != b.layers[k].shape:
            raise IncompatibleCheckpoints(f"layer {k!r}: shape {v.shape} vs {b.layers[k].shape}")


def checkpoint_id(c: Checkpoint) -> str:
    return c.meta.get("model_id", "")


def compute_task_vector(theta_t: Checkpoint, theta_0: Checkpoint, sel: LayerSelector = DEFAULT_SELECTOR,
                        layers: list[str] | None = None) -> TaskVector:
    """``theta_t - theta_0`` on the layers chosen by ``sel`` (from ``theta_0``'s order)."""
    names = layers if layers is not None else sel.select(theta_0)
    out = OrderedDict()
    for name in names:
        if name not in theta_0:
            raise IncompatibleCheckpoints(f"layer {name!r} missing from base checkpoint")
        if name not in theta_t:
            raise IncompatibleCheckpoints(f"layer {name!r} missing from task checkpoint")
        a, b = theta_t[name], theta_0[name]
        if a.shape != b.shape:
            raise IncompatibleCheckpoints(f"layer {name!r}: task shape {a.shape} != base shape {b.shape}")
        if a.ndim != 2:
            raise IncompatibleCheckpoints(f"layer {name!r} is not 2-D")
        out[name] = np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)
    return TaskVector(out, checkpoint_id(theta_0))


def apply_update(state: Checkpoint, layer_updates: Mapping[str, np.ndarray]) -> Checkpoint:
    """New checkpoint with ``W + dW`` on the updated layers (float64); others copied."""
    for name, upd in layer_updates.items():
        if name not in state:
            raise IncompatibleCheckpoints(f"update targets unknown layer {name!r}")
        if np.shape(upd) != state[name].shape:
            raise IncompatibleCheckpoints(
                f"layer {name!r}: update shape {np.shape(upd)} != weight shape {state[name].shape}")
    tensors = OrderedDict()
    for name, w in state.tensors.items():
        if name in layer_updates:
            tensors[name] = np.asarray(w, dtype=np.float64) + np.asarray(layer_updates[name], dtype=np.float64)
        else:
            tensors[name] = w.copy()
    return Checkpoint(tensors, dict(state.meta))


def check_compatible(base: Checkpoint, other: Checkpoint, names=None) -> None:
    names = base.names() if names is None else names
    for name in names:
        if name not in other:
            raise IncompatibleCheckpoints(f"layer {name!r} missing from {checkpoint_id(other) or 'checkpoint'}")
        if other[name].shape != base[name].shape:
            raise IncompatibleCheckpoints(f"layer {name!r}: shape {other[name].shape} != {base[name].shape}")


def tensor_checksum(arr: np.ndarray) -> str:
    return hashlib.sha256(np.ascontiguousarray(arr, dtype=_STORE_DTYPE).tobytes()).hexdigest()[:16]
