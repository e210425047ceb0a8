"""Named float32 tensor containers and the TVC1 wire format.

A :class:`ParameterSet` is an ordered collection of named float32 tensors.
Element ``p`` of the global flat index enumerates tensors in declaration
order, row-major within each tensor, so every downstream result is
reproducible from the container alone.

Wire format (TVC1, little-endian throughout, no padding):

====================  =======================================
bytes 0-3             magic ``b"TVC1"``
byte 4                version, currently 1
bytes 5-8             tensor count (u32)
per tensor            name length (u16), UTF-8 name,
                      dtype code (u8), ndim (u8),
                      dims (ndim x u64), raw payload
====================  =======================================

Dtype code 0 is float32 and is the only code a :class:`ParameterSet` may
carry. Code 1 (u16) exists solely for assignment side-files written by
:mod:`tvmerge.merging`. NaN payloads are rejected on both encode and
decode; selection by absolute magnitude is undefined with NaN present.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import BinaryIO, Iterable, Iterator, Mapping, Sequence, Union

import numpy as np

from .errors import CodecError, ShapeMismatchError, ValidationError

MAGIC = b"TVC1"
VERSION = 1

DTYPE_F32 = 0
DTYPE_U16 = 1

_NUMPY_DTYPES = {DTYPE_F32: np.dtype("<f4"), DTYPE_U16: np.dtype("<u2")}

Source = Union[str, Path, BinaryIO]
TensorInput = Union[Mapping[str, np.ndarray], Iterable[tuple[str, np.ndarray]]]


@dataclass(frozen=True)
class TensorSpec:
    """Name and shape of one tensor inside a container."""

    name: str
    dims: tuple[int, ...]

    def __post_init__(self) -> None:
        if not self.name:
            raise ValidationError("tensor name must be non-empty")
        if len(self.name.encode("utf-8")) > 0xFFFF:
            raise ValidationError("tensor name longer than 65535 bytes")
        if not self.dims:
            raise ValidationError(f"tensor {self.name!r}: dims must be non-empty")
        if len(self.dims) > 0xFF:
            raise ValidationError(f"tensor {self.name!r}: too many dimensions")
        if any(d < 1 for d in self.dims):
            raise ValidationError(f"tensor {self.name!r}: dims must be positive")

    @property
    def num_elements(self) -> int:
        n = 1
        for d in self.dims:
            n *= d
        return n


class ParameterSet:
    """Ordered, named float32 tensors with a global flat-index view."""

    __slots__ = ("_names", "_tensors")

    def __init__(self, tensors: TensorInput):
        items = list(tensors.items()) if isinstance(tensors, Mapping) else list(tensors)
        if not items:
            raise ValidationError("empty container")
        names: list[str] = []
        arrays: list[np.ndarray] = []
        seen: set[str] = set()
        for name, values in items:
            if name in seen:
                raise ValidationError(f"duplicate tensor name {name!r}")
            seen.add(name)
            arr = np.asarray(values, dtype=np.float32)
            if arr.ndim < 1 or 0 in arr.shape:
                raise ValidationError(f"tensor {name!r}: dims must be non-empty and positive")
            arr = np.ascontiguousarray(arr)
            TensorSpec(name, arr.shape)  # runs the shared invariant checks
            names.append(name)
            arrays.append(arr)
        self._names = tuple(names)
        self._tensors = tuple(arrays)

    @property
    def names(self) -> tuple[str, ...]:
        return self._names

    @property
    def specs(self) -> tuple[TensorSpec, ...]:
        return tuple(TensorSpec(n, a.shape) for n, a in zip(self._names, self._tensors))

    @property
    def num_elements(self) -> int:
        return sum(a.size for a in self._tensors)

    def tensor(self, name: str) -> np.ndarray:
        try:
            return self._tensors[self._names.index(name)]
        except ValueError:
            raise KeyError(name) from None

    def items(self) -> Iterator[tuple[str, np.ndarray]]:
        return iter(zip(self._names, self._tensors))

    def flat(self) -> np.ndarray:
        """All values as one float32 vector in flat-index order."""
        return np.concatenate([a.ravel(order="C") for a in self._tensors])

    def same_layout(self, other: "ParameterSet") -> bool:
        return self.specs == other.specs

    def bitwise_equal(self, other: "ParameterSet") -> bool:
        if not self.same_layout(other):
            return False
        return all(
            a.tobytes() == b.tobytes() for (_, a), (_, b) in zip(self.items(), other.items())
        )

    def with_flat(self, flat: np.ndarray) -> "ParameterSet":
        """New set with this layout and values taken from ``flat``."""
        flat = np.asarray(flat, dtype=np.float32)
        if flat.ndim != 1 or flat.size != self.num_elements:
            raise ShapeMismatchError(
                f"flat vector has {flat.size} elements, layout needs {self.num_elements}"
            )
        out = []
        offset = 0
        for name, arr in self.items():
            out.append((name, flat[offset : offset + arr.size].reshape(arr.shape)))
            offset += arr.size
        return type(self)(out)

    def __len__(self) -> int:
        return len(self._names)

    def __repr__(self) -> str:
        inner = ", ".join(f"{n}{a.shape}" for n, a in self.items())
        return f"{type(self).__name__}({inner})"


class TaskVector(ParameterSet):
    """A parameter delta with the same layout as the set it came from."""


def compute_task_vector(theta_t: ParameterSet, theta_0: ParameterSet) -> TaskVector:
    """Element-wise ``theta_t - theta_0`` in float32, exact per IEEE-754."""
    _require_same_layout(theta_t, theta_0)
    return TaskVector(
        [(name, a - b) for (name, a), (_, b) in zip(theta_t.items(), theta_0.items())]
    )


def apply_task_vector(
    theta_0: ParameterSet, tau: ParameterSet, lambda_merge: float
) -> ParameterSet:
    """Return ``theta_0 + lambda_merge * tau`` in float32.

    ``lambda_merge`` must lie in [0, 1]; 1.0 reproduces a fine-tuned model
    bit-exactly when the subtraction that produced ``tau`` was exact.
    """
    if not (0.0 <= lambda_merge <= 1.0):
        raise ValidationError(f"lambda_merge {lambda_merge} outside [0, 1]")
    _require_same_layout(theta_0, tau)
    lam = np.float32(lambda_merge)
    return ParameterSet(
        [(name, a + lam * b) for (name, a), (_, b) in zip(theta_0.items(), tau.items())]
    )


def encode_container(pset: ParameterSet, destination: Source) -> None:
    """Write ``pset`` as a TVC1 stream; decode gives back identical bits."""
    records = [(name, DTYPE_F32, arr) for name, arr in pset.items()]
    _write_records(records, destination)


def decode_container(source: Source) -> ParameterSet:
    """Read a TVC1 stream of float32 tensors."""
    records = _read_records(source, allowed_dtypes=(DTYPE_F32,))
    return ParameterSet([(name, arr) for name, _, arr in records])


# Low-level record I/O, shared with the assignment side-file writer.


def _write_records(
    records: Sequence[tuple[str, int, np.ndarray]], destination: Source
) -> None:
    if not records:
        raise CodecError("empty container")
    stream, close = _open(destination, "wb")
    try:
        stream.write(MAGIC)
        stream.write(bytes([VERSION]))
        stream.write(struct.pack("<I", len(records)))
        for name, code, arr in records:
            dtype = _NUMPY_DTYPES[code]
            data = np.ascontiguousarray(arr, dtype=dtype)
            if code == DTYPE_F32 and np.isnan(data).any():
                raise CodecError(f"tensor {name!r}: NaN payload rejected")
            name_bytes = name.encode("utf-8")
            stream.write(struct.pack("<H", len(name_bytes)))
            stream.write(name_bytes)
            stream.write(bytes([code, data.ndim]))
            stream.write(struct.pack(f"<{data.ndim}Q", *data.shape))
            stream.write(data.tobytes(order="C"))
    finally:
        if close:
            stream.close()


def _read_records(
    source: Source, allowed_dtypes: tuple[int, ...]
) -> list[tuple[str, int, np.ndarray]]:
    stream, close = _open(source, "rb")
    try:
        magic = _read_exact(stream, 4, "magic")
        if magic != MAGIC:
            raise CodecError(f"bad magic {magic!r}")
        version = _read_exact(stream, 1, "version")[0]
        if version != VERSION:
            raise CodecError(f"unsupported version {version}")
        (count,) = struct.unpack("<I", _read_exact(stream, 4, "tensor count"))
        if count == 0:
            raise CodecError("empty container")
        records: list[tuple[str, int, np.ndarray]] = []
        seen: set[str] = set()
        for _ in range(count):
            (name_len,) = struct.unpack("<H", _read_exact(stream, 2, "name length"))
            name = _read_exact(stream, name_len, "name").decode("utf-8")
            if name in seen:
                raise CodecError(f"duplicate tensor name {name!r}")
            seen.add(name)
            code, ndim = _read_exact(stream, 2, "dtype/ndim")
            if code not in allowed_dtypes:
                raise CodecError(f"tensor {name!r}: unsupported dtype code {code}")
            if ndim == 0:
                raise CodecError(f"tensor {name!r}: zero-dimensional tensor")
            dims = struct.unpack(f"<{ndim}Q", _read_exact(stream, 8 * ndim, "dims"))
            if any(d == 0 for d in dims):
                raise CodecError(f"tensor {name!r}: zero-sized dimension")
            dtype = _NUMPY_DTYPES[code]
            n = 1
            for d in dims:
                n *= d
            payload = _read_exact(stream, n * dtype.itemsize, f"payload of {name!r}")
            arr = np.frombuffer(payload, dtype=dtype).reshape(dims).copy()
            if code == DTYPE_F32 and np.isnan(arr).any():
                raise CodecError(f"tensor {name!r}: NaN payload rejected")
            records.append((name, code, arr))
        if stream.read(1):
            raise CodecError("trailing data after last record")
        return records
    finally:
        if close:
            stream.close()


def _read_exact(stream: BinaryIO, n: int, what: str) -> bytes:
    data = stream.read(n)
    if len(data) != n:
        raise CodecError(f"unexpected end of stream while reading {what}")
    return data


def _open(target: Source, mode: str) -> tuple[BinaryIO, bool]:
    if isinstance(target, (str, Path)):
        return open(target, mode), True
    return target, False


def _require_same_layout(a: ParameterSet, b: ParameterSet) -> None:
    if not a.same_layout(b):
        raise ShapeMismatchError(
            f"shape mismatch: layouts differ ({a!r} vs {b!r})"
        )
