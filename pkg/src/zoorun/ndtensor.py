"""Named-axes N-D tensors and the ZRT1 container format.

A :class:`Tensor` is an immutable value: a name, an axes string drawn from
``bizcyxt``, and a C-ordered numpy buffer. All module boundaries in the
package (processing, tiling, the worker protocol) pass these around.
"""

from __future__ import annotations

import enum
import json
import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import BadAxes, DTypeMismatch, OutOfBounds, ParseError, ShapeMismatch

AXIS_LETTERS = "bizcyxt"
SPATIAL_AXES = "zyx"
ZRT_MAGIC = b"ZRT1"

_U32 = struct.Struct("<I")


class DType(enum.Enum):
    I8 = "i8"
    U8 = "u8"
    I16 = "i16"
    U16 = "u16"
    I32 = "i32"
    U32 = "u32"
    I64 = "i64"
    F32 = "f32"
    F64 = "f64"

    @property
    def numpy(self) -> np.dtype:
        return _NUMPY[self]

    @property
    def byte_width(self) -> int:
        return _NUMPY[self].itemsize

    @property
    def is_float(self) -> bool:
        return self in (DType.F32, DType.F64)

    @property
    def long_name(self) -> str:
        """Descriptor spelling, e.g. ``float32``."""
        return _LONG[self]

    @classmethod
    def parse(cls, text) -> "DType":
        if isinstance(text, DType):
            return text
        key = str(text).strip().lower()
        if key in _BY_NAME:
            return _BY_NAME[key]
        raise ValueError(f"unknown dtype {text!r}")

    @classmethod
    def from_numpy(cls, dt) -> "DType":
        dt = np.dtype(dt)
        for tag, np_dt in _NUMPY.items():
            if np_dt.kind == dt.kind and np_dt.itemsize == dt.itemsize:
                return tag
        raise DTypeMismatch(f"unsupported numpy dtype {dt}")


_NUMPY = {
    DType.I8: np.dtype("<i1"),
    DType.U8: np.dtype("<u1"),
    DType.I16: np.dtype("<i2"),
    DType.U16: np.dtype("<u2"),
    DType.I32: np.dtype("<i4"),
    DType.U32: np.dtype("<u4"),
    DType.I64: np.dtype("<i8"),
    DType.F32: np.dtype("<f4"),
    DType.F64: np.dtype("<f8"),
}
_LONG = {
    DType.I8: "int8",
    DType.U8: "uint8",
    DType.I16: "int16",
    DType.U16: "uint16",
    DType.I32: "int32",
    DType.U32: "uint32",
    DType.I64: "int64",
    DType.F32: "float32",
    DType.F64: "float64",
}
_BY_NAME = {d.value: d for d in DType} | {v: k for k, v in _LONG.items()}


def check_axes(axes: str) -> str:
    if not isinstance(axes, str) or not axes:
        raise BadAxes(f"axes must be a non-empty string, got {axes!r}")
    for letter in axes:
        if letter not in AXIS_LETTERS:
            raise BadAxes(f"unknown axis letter {letter!r} in {axes!r}")
    if len(set(axes)) != len(axes):
        raise BadAxes(f"duplicate axis letter in {axes!r}")
    return axes


@dataclass(frozen=True, eq=False)
class Tensor:
    name: str
    axes: str
    data: np.ndarray

    def __post_init__(self):
        check_axes(self.axes)
        if self.data.ndim != len(self.axes):
            raise ShapeMismatch(
                f"tensor {self.name!r}: {len(self.axes)} axes {self.axes!r} "
                f"but data has rank {self.data.ndim}"
            )

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(self.data.shape)

    @property
    def dtype(self) -> DType:
        return DType.from_numpy(self.data.dtype)

    @property
    def nbytes(self) -> int:
        return self.data.nbytes

    def element(self, *index):
        return self.data[index].item()

    def axis(self, letter: str) -> int:
        return self.axes.index(letter)

    def size_of(self, letter: str) -> int | None:
        return self.data.shape[self.axes.index(letter)] if letter in self.axes else None

    def tobytes(self) -> bytes:
        return self.data.tobytes(order="C")

    def renamed(self, name: str) -> "Tensor":
        return Tensor(name, self.axes, self.data)

    def __eq__(self, other):
        if not isinstance(other, Tensor):
            return NotImplemented
        return (
            self.name == other.name
            and self.axes == other.axes
            and self.shape == other.shape
            and self.dtype == other.dtype
            and self.tobytes() == other.tobytes()
        )

    __hash__ = None

    def __repr__(self):
        return f"Tensor({self.name!r}, axes={self.axes!r}, shape={self.shape}, dtype={self.dtype.value})"


def _frozen(array: np.ndarray) -> np.ndarray:
    array = np.ascontiguousarray(array)
    array.setflags(write=False)
    return array


def from_array(name: str, axes: str, array, dtype: DType | str | None = None) -> Tensor:
    """Wrap a numpy array (copied) as a tensor."""
    array = np.asarray(array)
    dt = DType.parse(dtype) if dtype is not None else DType.from_numpy(array.dtype)
    return Tensor(name, check_axes(axes), _frozen(np.array(array, dtype=dt.numpy, order="C", copy=True)))


def new_tensor(name: str, axes: str, shape: Sequence[int], dtype, data) -> Tensor:
    """Build a tensor from a flat row-major buffer (sequence, ndarray or raw bytes)."""
    check_axes(axes)
    shape = tuple(int(s) for s in shape)
    if any(s < 0 for s in shape):
        raise ShapeMismatch(f"negative size in shape {shape}")
    if len(shape) != len(axes):
        raise BadAxes(f"axes {axes!r} do not match rank of shape {list(shape)}")
    dt = DType.parse(dtype)
    if isinstance(data, (bytes, bytearray, memoryview)):
        raw = bytes(data)
        if len(raw) % dt.byte_width:
            raise ShapeMismatch(f"{len(raw)} bytes is not a whole number of {dt.value} elements")
        flat = np.frombuffer(raw, dtype=dt.numpy)
    else:
        flat = np.asarray(data, dtype=dt.numpy).reshape(-1)
    count = math.prod(shape)
    if flat.size != count:
        raise ShapeMismatch(f"buffer has {flat.size} elements, shape {list(shape)} needs {count}")
    return Tensor(name, axes, _frozen(flat.reshape(shape).copy()))


def reorder_axes(t: Tensor, target: str) -> Tensor:
    check_axes(target)
    if sorted(target) != sorted(t.axes):
        raise BadAxes(f"{target!r} is not a permutation of {t.axes!r}")
    if target == t.axes:
        return t
    perm = [t.axes.index(a) for a in target]
    return Tensor(t.name, target, _frozen(np.transpose(t.data, perm).copy()))


def _int_limits(dt: DType) -> tuple[float, float]:
    """Lower bound, and exclusive upper bound as an exact power of two."""
    info = np.iinfo(dt.numpy)
    return float(info.min), float(info.max) + 1.0


def cast(t: Tensor, to) -> Tensor:
    """Elementwise conversion.

    Float to integer rounds half to even and saturates; NaN becomes 0.
    Integer to integer saturates. Anything to float is a plain conversion.
    """
    to = DType.parse(to)
    src = t.dtype
    if to == src:
        return t
    x = t.data
    if to.is_float:
        out = x.astype(to.numpy)
    elif src.is_float:
        r = np.rint(x.astype(np.float64))
        lo, hi_excl = _int_limits(to)
        info = np.iinfo(to.numpy)
        out = np.zeros(x.shape, dtype=to.numpy)
        ok = (r >= lo) & (r < hi_excl)
        out[ok] = r[ok].astype(to.numpy)
        out[r >= hi_excl] = info.max
        out[r < lo] = info.min
    else:
        info = np.iinfo(to.numpy)
        out = np.clip(x.astype(np.int64), info.min, info.max).astype(to.numpy)
    return Tensor(t.name, t.axes, _frozen(out))


def _check_ranges(shape, ranges) -> list[tuple[int, int]]:
    if len(ranges) != len(shape):
        raise OutOfBounds(f"{len(ranges)} ranges for rank-{len(shape)} tensor")
    out = []
    for axis, ((start, stop), size) in enumerate(zip(ranges, shape)):
        start, stop = int(start), int(stop)
        if not 0 <= start <= stop <= size:
            raise OutOfBounds(f"range [{start},{stop}) outside [0,{size}) on axis {axis}")
        out.append((start, stop))
    return out


def normalize_ranges(t: Tensor, ranges) -> list[tuple[int, int]]:
    """Accept a list of (start, stop) per axis, or a mapping letter -> (start, stop)."""
    if isinstance(ranges, dict):
        for letter in ranges:
            if letter not in t.axes:
                raise BadAxes(f"axis {letter!r} not in {t.axes!r}")
        return [tuple(ranges.get(a, (0, n))) for a, n in zip(t.axes, t.shape)]
    return list(ranges)


def slice_tensor(t: Tensor, ranges) -> Tensor:
    """Copy out the half-open per-axis region ``ranges``."""
    bounds = _check_ranges(t.shape, normalize_ranges(t, ranges))
    index = tuple(slice(a, b) for a, b in bounds)
    return Tensor(t.name, t.axes, _frozen(t.data[index].copy()))


def blit(dst: np.ndarray, src: np.ndarray, offsets: Sequence[int]) -> None:
    """In-place region copy on a caller-owned buffer; bounds are checked."""
    if dst.ndim != src.ndim or len(offsets) != dst.ndim:
        raise OutOfBounds(f"rank mismatch: dst {dst.ndim}, src {src.ndim}, offsets {len(offsets)}")
    index = []
    for axis, (off, n, size) in enumerate(zip(offsets, src.shape, dst.shape)):
        off = int(off)
        if off < 0 or off + n > size:
            raise OutOfBounds(f"block [{off},{off + n}) exceeds size {size} on axis {axis}")
        index.append(slice(off, off + n))
    dst[tuple(index)] = src


def write_block(dst: Tensor, src: Tensor, offsets: Sequence[int]) -> Tensor:
    """Return a copy of ``dst`` with ``src`` written at ``offsets``."""
    if src.axes != dst.axes:
        raise BadAxes(f"axes differ: {src.axes!r} vs {dst.axes!r}")
    if src.dtype != dst.dtype:
        raise DTypeMismatch(f"dtype {src.dtype.value} written into {dst.dtype.value}")
    out = dst.data.copy()
    blit(out, src.data, offsets)
    return Tensor(dst.name, dst.axes, _frozen(out))


def pad_edge(t: Tensor, ranges) -> Tensor:
    """Slice with intervals that may extend past the tensor; outside samples
    replicate the nearest edge sample."""
    ranges = normalize_ranges(t, ranges)
    if len(ranges) != len(t.shape):
        raise OutOfBounds(f"{len(ranges)} ranges for rank-{len(t.shape)} tensor")
    index = []
    for (start, stop), size in zip(ranges, t.shape):
        if stop < start:
            raise OutOfBounds(f"empty-reversed interval [{start},{stop})")
        if size == 0 and stop > start:
            raise OutOfBounds("cannot replicate edges of an empty axis")
        index.append(np.clip(np.arange(start, stop), 0, max(size - 1, 0)))
    return Tensor(t.name, t.axes, _frozen(t.data[np.ix_(*index)]))


# -- serialization ----------------------------------------------------------

def tensor_header(t: Tensor) -> dict:
    return {"name": t.name, "axes": t.axes, "shape": list(t.shape), "dtype": t.dtype.value}


def encode_tensor_block(t: Tensor) -> bytes:
    header = json.dumps(tensor_header(t), separators=(",", ":"), sort_keys=True).encode()
    return _U32.pack(len(header)) + header + t.tobytes()


def decode_tensor_block(buf, offset: int = 0, error=ParseError) -> tuple[Tensor, int]:
    """Decode one block at ``offset``; returns the tensor and the offset after it."""
    view = memoryview(buf)
    if offset + 4 > len(view):
        raise error("truncated tensor header length")
    (hlen,) = _U32.unpack_from(view, offset)
    offset += 4
    if offset + hlen > len(view):
        raise error("truncated tensor header")
    try:
        header = json.loads(bytes(view[offset:offset + hlen]))
        name, axes = header["name"], header["axes"]
        shape = [int(s) for s in header["shape"]]
        dtype = DType.parse(header["dtype"])
        if not isinstance(name, str) or any(s < 0 for s in shape):
            raise ValueError("bad name or shape")
        check_axes(axes)
    except error:
        raise
    except Exception as exc:
        raise error(f"bad tensor header: {exc}") from None
    offset += hlen
    nbytes = math.prod(shape) * dtype.byte_width
    if offset + nbytes > len(view):
        raise error(f"truncated tensor data: need {nbytes} bytes, have {len(view) - offset}")
    try:
        t = new_tensor(name, axes, shape, dtype, view[offset:offset + nbytes])
    except Exception as exc:
        raise error(f"bad tensor payload: {exc}") from None
    return t, offset + nbytes


def dumps_zrt(t: Tensor) -> bytes:
    return ZRT_MAGIC + encode_tensor_block(t)


def loads_zrt(buf: bytes) -> Tensor:
    if bytes(buf[:4]) != ZRT_MAGIC:
        raise ParseError("not a ZRT1 tensor file (bad magic)")
    t, end = decode_tensor_block(buf, 4)
    if end != len(buf):
        raise ParseError(f"{len(buf) - end} trailing bytes after tensor data")
    return t


def write_zrt(path, t: Tensor) -> Path:
    path = Path(path)
    path.write_bytes(dumps_zrt(t))
    return path


def read_zrt(path) -> Tensor:
    return loads_zrt(Path(path).read_bytes())


def spatial_axes(axes: str) -> list[str]:
    return [a for a in axes if a in SPATIAL_AXES]

