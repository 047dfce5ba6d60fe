"""Tensor-bundle checkpoint format, delta extraction, and adapter materialization.

File layout (little-endian throughout)::

    bytes 0..3    magic  "DRMB"
    bytes 4..7    u32    format version (currently 1)
    bytes 8..15   u64    header length H in bytes
    bytes 16..    H bytes of UTF-8 JSON:
                  {"tensors": [{"name": str, "dtype": "f32"|"f64",
                                "shape": [int, ...], "offset": int,
                                "nbytes": int}, ...],
                   "metadata": {str: str}}
    then          raw row-major tensor data; offsets are relative to the
                  first byte after the header, 8-byte aligned, gaps zeroed.

Writing is bit-deterministic for identical bundle content: tensors are
serialized in insertion order and the header JSON is canonical (sorted
keys, no whitespace).
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    BadMagic,
    CorruptHeader,
    ExtraTensor,
    IoFailure,
    MissingTensor,
    NonFiniteValue,
    OffsetOutOfRange,
    ShapeMismatch,
    UnsupportedVersion,
)

MAGIC = b"DRMB"
VERSION = 1
ALIGN = 8

_DTYPE_FROM_NAME = {"f32": np.dtype("<f4"), "f64": np.dtype("<f8")}
_NAME_FROM_KIND = {("f", 4): "f32", ("f", 8): "f64"}


def canonical_json(obj) -> str:
    """Serialize to the compact, key-sorted JSON dialect used by bundle headers."""
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False)


def dtype_name(dtype) -> str:
    """Return "f32"/"f64" for a supported numpy dtype."""
    dt = np.dtype(dtype)
    key = (dt.kind, dt.itemsize)
    if key not in _NAME_FROM_KIND:
        raise ValueError(f"unsupported dtype {dt}; only f32 and f64 tensors are allowed")
    return _NAME_FROM_KIND[key]


class TensorBundle:
    """Ordered, validated collection of named float tensors plus string metadata.

    Tensors are rank-1 or rank-2 numpy arrays of float32/float64 with all
    entries finite. Iteration order is insertion order and is preserved by
    the file format.
    """

    def __init__(self, tensors=None, metadata=None):
        self._entries: dict[str, np.ndarray] = {}
        self.metadata: dict[str, str] = {}
        if metadata:
            for key, value in metadata.items():
                if not isinstance(key, str) or not isinstance(value, str):
                    raise ValueError("metadata keys and values must be strings")
                self.metadata[key] = value
        if tensors:
            items = tensors.items() if hasattr(tensors, "items") else tensors
            for name, array in items:
                self.add(name, array)

    def add(self, name: str, array) -> None:
        """Insert a tensor, enforcing the bundle invariants."""
        if not isinstance(name, str) or not name:
            raise ValueError("tensor name must be a non-empty string")
        if name in self._entries:
            raise ValueError(f"duplicate tensor name {name!r}")
        arr = np.ascontiguousarray(array)
        dtype_name(arr.dtype)  # rejects non-float32/64
        if arr.ndim not in (1, 2):
            raise ValueError(f"tensor {name!r} has rank {arr.ndim}; only rank 1 or 2 is supported")
        if any(extent <= 0 for extent in arr.shape):
            raise ValueError(f"tensor {name!r} has a non-positive extent in shape {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise NonFiniteValue(f"tensor {name!r} contains NaN or infinity")
        self._entries[name] = arr

    def names(self) -> list[str]:
        return list(self._entries)

    def items(self):
        return self._entries.items()

    def __getitem__(self, name: str) -> np.ndarray:
        return self._entries[name]

    def __contains__(self, name: str) -> bool:
        return name in self._entries

    def __len__(self) -> int:
        return len(self._entries)

    def __eq__(self, other) -> bool:
        if not isinstance(other, TensorBundle):
            return NotImplemented
        if self.metadata != other.metadata or self.names() != other.names():
            return False
        return all(
            a.dtype == b.dtype and a.shape == b.shape and np.array_equal(a, b)
            for (_, a), (_, b) in zip(self.items(), other.items())
        )

    def __repr__(self) -> str:
        return f"TensorBundle({len(self)} tensors, {len(self.metadata)} metadata keys)"


def _align_up(n: int) -> int:
    return (n + ALIGN - 1) // ALIGN * ALIGN


def write_bundle(bundle: TensorBundle, path) -> None:
    """Write a bundle; byte-deterministic for identical bundle content."""
    records = []
    offset = 0
    payloads = []
    for name, arr in bundle.items():
        data = np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<")).tobytes()
        records.append(
            {
                "name": name,
                "dtype": dtype_name(arr.dtype),
                "shape": [int(s) for s in arr.shape],
                "offset": offset,
                "nbytes": len(data),
            }
        )
        payloads.append((offset, data))
        offset = _align_up(offset + len(data))
    header = {"tensors": records, "metadata": dict(sorted(bundle.metadata.items()))}
    header_bytes = canonical_json(header).encode("utf-8")

    region = bytearray(offset if not payloads else max(o + len(d) for o, d in payloads))
    for off, data in payloads:
        region[off : off + len(data)] = data

    try:
        with open(path, "wb") as fh:
            fh.write(MAGIC)
            fh.write(struct.pack("<I", VERSION))
            fh.write(struct.pack("<Q", len(header_bytes)))
            fh.write(header_bytes)
            fh.write(region)
    except OSError as exc:
        raise IoFailure(f"cannot write bundle to {path}: {exc}") from exc


def read_bundle(path) -> TensorBundle:
    """Read and validate a bundle file written by :func:`write_bundle`."""
    try:
        with open(path, "rb") as fh:
            blob = fh.read()
    except OSError as exc:
        raise IoFailure(f"cannot read bundle from {path}: {exc}") from exc

    if len(blob) < 4 or blob[:4] != MAGIC:
        raise BadMagic(f"{path}: not a bundle file (bad magic)")
    if len(blob) < 16:
        raise CorruptHeader(f"{path}: truncated fixed header")
    (version,) = struct.unpack_from("<I", blob, 4)
    if version != VERSION:
        raise UnsupportedVersion(f"{path}: format version {version} (expected {VERSION})")
    (header_len,) = struct.unpack_from("<Q", blob, 8)
    if 16 + header_len > len(blob):
        raise CorruptHeader(f"{path}: header length {header_len} exceeds file size")
    try:
        header = json.loads(blob[16 : 16 + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptHeader(f"{path}: header is not valid JSON ({exc})") from exc

    if not isinstance(header, dict) or not isinstance(header.get("tensors"), list):
        raise CorruptHeader(f"{path}: header must be an object with a 'tensors' list")
    metadata = header.get("metadata", {})
    if not isinstance(metadata, dict) or not all(
        isinstance(k, str) and isinstance(v, str) for k, v in metadata.items()
    ):
        raise CorruptHeader(f"{path}: metadata must map strings to strings")

    region = blob[16 + header_len :]
    bundle = TensorBundle(metadata=metadata)
    for rec in header["tensors"]:
        if not isinstance(rec, dict):
            raise CorruptHeader(f"{path}: tensor record is not an object")
        name = rec.get("name")
        if not isinstance(name, str) or not name:
            raise CorruptHeader(f"{path}: tensor record with missing or empty name")
        if name in bundle:
            raise CorruptHeader(f"{path}: duplicate tensor name {name!r}")
        if rec.get("dtype") not in _DTYPE_FROM_NAME:
            raise CorruptHeader(f"{path}: tensor {name!r} has unknown dtype {rec.get('dtype')!r}")
        dtype = _DTYPE_FROM_NAME[rec["dtype"]]
        shape = rec.get("shape")
        if (
            not isinstance(shape, list)
            or not shape
            or len(shape) > 2
            or not all(isinstance(s, int) and s > 0 for s in shape)
        ):
            raise CorruptHeader(f"{path}: tensor {name!r} has invalid shape {shape!r}")
        offset, nbytes = rec.get("offset"), rec.get("nbytes")
        if not isinstance(offset, int) or not isinstance(nbytes, int) or offset % ALIGN != 0:
            raise CorruptHeader(f"{path}: tensor {name!r} has invalid offset/nbytes")
        expected = int(np.prod(shape)) * dtype.itemsize
        if nbytes != expected:
            raise CorruptHeader(
                f"{path}: tensor {name!r} declares {nbytes} bytes, shape implies {expected}"
            )
        if offset < 0 or offset + nbytes > len(region):
            raise OffsetOutOfRange(
                f"{path}: tensor {name!r} spans [{offset}, {offset + nbytes}) "
                f"outside the {len(region)}-byte data region"
            )
        arr = np.frombuffer(region, dtype=dtype, count=int(np.prod(shape)), offset=offset)
        arr = arr.reshape(shape).astype(dtype.newbyteorder("="), copy=True)
        if not np.all(np.isfinite(arr)):
            raise NonFiniteValue(f"{path}: tensor {name!r} contains NaN or infinity")
        bundle.add(name, arr)
    return bundle


@dataclass
class DeltaSet:
    """Per-layer stack of N task weight deltas sharing one shape.

    Deltas are held as float64 regardless of the stored checkpoint dtype;
    all merging arithmetic happens in float64.
    """

    layer_name: str
    base_shape: tuple[int, int]
    deltas: list[np.ndarray]
    task_names: list[str]

    def __post_init__(self):
        if len(self.deltas) < 1:
            raise ValueError("a DeltaSet needs at least one task delta")
        if len(self.task_names) != len(self.deltas):
            raise ValueError("task_names and deltas must have equal length")
        if len(set(self.task_names)) != len(self.task_names):
            raise ValueError("task names must be unique")
        self.base_shape = (int(self.base_shape[0]), int(self.base_shape[1]))
        self.deltas = [np.asarray(d, dtype=np.float64) for d in self.deltas]
        for name, d in zip(self.task_names, self.deltas):
            if d.shape != self.base_shape:
                raise ShapeMismatch(
                    f"layer {self.layer_name!r}: delta for task {name!r} has shape "
                    f"{d.shape}, expected {self.base_shape}"
                )

    @property
    def n_tasks(self) -> int:
        return len(self.deltas)

    def transposed(self) -> "DeltaSet":
        """Same layer with every delta transposed (rows and columns swapped)."""
        m, n = self.base_shape
        return DeltaSet(self.layer_name, (n, m), [d.T for d in self.deltas], list(self.task_names))


@dataclass
class BiasEntry:
    """One rank-1 tensor routed around the decomposition path."""

    name: str
    base: np.ndarray
    task_values: list[np.ndarray]


@dataclass
class BiasGroup:
    """All rank-1 tensors of an aligned bundle family, in base-bundle order."""

    entries: list[BiasEntry] = field(default_factory=list)

    def __iter__(self):
        return iter(self.entries)

    def __len__(self) -> int:
        return len(self.entries)


def extract_deltas(
    base: TensorBundle, tasks: list[TensorBundle], task_names: list[str] | None = None
) -> tuple[list[DeltaSet], BiasGroup]:
    """Split aligned bundles into per-layer delta stacks and a bias group.

    Every rank-2 tensor becomes one :class:`DeltaSet` holding task - base in
    float64; rank-1 tensors go to the :class:`BiasGroup` for weighted
    averaging. Task bundles must carry exactly the base bundle's tensor
    names and shapes.
    """
    if not tasks:
        raise ValueError("need at least one task bundle")
    if task_names is None:
        task_names = [f"task{i}" for i in range(len(tasks))]
    if len(task_names) != len(tasks):
        raise ValueError("task_names and tasks must have equal length")

    base_names = set(base.names())
    for tname, task in zip(task_names, tasks):
        for missing in base_names - set(task.names()):
            raise MissingTensor(f"task {tname!r} is missing tensor {missing!r}")
        for extra in set(task.names()) - base_names:
            raise ExtraTensor(f"task {tname!r} has unexpected tensor {extra!r}")
        for name, arr in base.items():
            if task[name].shape != arr.shape:
                raise ShapeMismatch(
                    f"tensor {name!r}: task {tname!r} shape {task[name].shape} "
                    f"!= base shape {arr.shape}"
                )

    delta_sets: list[DeltaSet] = []
    biases = BiasGroup()
    for name, arr in base.items():
        base64 = arr.astype(np.float64)
        task64 = [task[name].astype(np.float64) for task in tasks]
        if arr.ndim == 2:
            delta_sets.append(
                DeltaSet(name, arr.shape, [t - base64 for t in task64], list(task_names))
            )
        else:
            biases.entries.append(BiasEntry(name, base64, task64))
    return delta_sets, biases


def materialize_low_rank(down: np.ndarray, up: np.ndarray, scale: float) -> np.ndarray:
    """Densify an adapter pair: ``scale * up @ down`` with shape (m, n).

    ``down`` is r x n, ``up`` is m x r; the result is the dense delta the
    adapter contributes, ready for :class:`DeltaSet` construction.
    """
    down = np.asarray(down, dtype=np.float64)
    up = np.asarray(up, dtype=np.float64)
    if down.ndim != 2 or up.ndim != 2 or up.shape[1] != down.shape[0]:
        raise ShapeMismatch(
            f"inner dimensions disagree: up is {up.shape}, down is {down.shape}"
        )
    return float(scale) * (up @ down)
