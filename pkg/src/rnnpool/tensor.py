"""Dense H x W x C activation maps, patch extraction and byte accounting."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ShapeError

DTYPE_SIZES = {"float32": 4, "float64": 8, "int8": 1}
MIB = 1 << 20
KIB = 1 << 10

_NP_DTYPES = {"float32": np.float32, "float64": np.float64, "int8": np.uint8}


def dtype_name(dtype) -> str:
    """Normalize a dtype spelling ('f32', np.float32, 'int8', ...) to a key of DTYPE_SIZES."""
    aliases = {"f32": "float32", "f64": "float64", "i8": "int8", "uint8": "int8"}
    if isinstance(dtype, str):
        name = aliases.get(dtype, dtype)
    else:
        name = np.dtype(dtype).name
        name = aliases.get(name, name)
    if name not in DTYPE_SIZES:
        raise ValueError(f"unsupported dtype {dtype!r}")
    return name


def byte_size(h: int, w: int, c: int, dtype="float32") -> int:
    """Bytes needed to hold an h x w x c map."""
    if min(h, w, c) < 0:
        raise ValueError("dimensions must be non-negative")
    return int(h) * int(w) * int(c) * DTYPE_SIZES[dtype_name(dtype)]


def to_mib(nbytes: int) -> float:
    return nbytes / MIB


def to_kib(nbytes: int) -> float:
    return nbytes / KIB


@dataclass(frozen=True)
class TensorMap:
    """Immutable row-major, channel-last activation map."""

    data: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.data)
        if arr.ndim != 3:
            raise ShapeError(f"TensorMap needs a 3-d array, got shape {arr.shape}")
        if min(arr.shape) < 1:
            raise ShapeError(f"TensorMap dimensions must be >= 1, got {arr.shape}")
        dtype_name(arr.dtype)
        arr = np.array(arr, copy=True, order="C")
        arr.flags.writeable = False
        object.__setattr__(self, "data", arr)

    @classmethod
    def zeros(cls, h: int, w: int, c: int, dtype="float32") -> "TensorMap":
        return cls(np.zeros((h, w, c), dtype=_NP_DTYPES[dtype_name(dtype)]))

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape

    @property
    def dtype(self) -> str:
        return dtype_name(self.data.dtype)

    @property
    def nbytes(self) -> int:
        return byte_size(*self.shape, self.dtype)


@dataclass(frozen=True)
class PatchSpec:
    top: int
    left: int
    rows: int
    cols: int
    pad_policy: str = "zero"

    def __post_init__(self):
        if self.rows < 1 or self.cols < 1:
            raise ValueError("patch rows and cols must be >= 1")
        if self.pad_policy not in ("zero", "reject"):
            raise ValueError(f"unknown pad policy {self.pad_policy!r}")


def patch_view(arr: np.ndarray, top: int, left: int, rows: int, cols: int) -> np.ndarray:
    """Return arr[top:top+rows, left:left+cols] with zeros outside the array.

    No copy is made when the window lies inside `arr`.
    """
    h, w = arr.shape[:2]
    if top >= 0 and left >= 0 and top + rows <= h and left + cols <= w:
        return arr[top:top + rows, left:left + cols]
    out = np.zeros((rows, cols) + arr.shape[2:], dtype=arr.dtype)
    r0, r1 = max(top, 0), min(top + rows, h)
    c0, c1 = max(left, 0), min(left + cols, w)
    if r0 < r1 and c0 < c1:
        out[r0 - top:r1 - top, c0 - left:c1 - left] = arr[r0:r1, c0:c1]
    return out


def extract_patch(tmap: TensorMap, spec: PatchSpec) -> TensorMap:
    """Copy an r x c x C window out of `tmap`."""
    inside = (spec.top >= 0 and spec.left >= 0
              and spec.top + spec.rows <= tmap.height
              and spec.left + spec.cols <= tmap.width)
    if not inside and spec.pad_policy == "reject":
        raise IndexError(
            f"patch at ({spec.top}, {spec.left}) of size {spec.rows}x{spec.cols} "
            f"leaves the {tmap.height}x{tmap.width} map")
    return TensorMap(patch_view(tmap.data, spec.top, spec.left, spec.rows, spec.cols))


def write_patch(tmap: TensorMap, spec: PatchSpec, patch: TensorMap) -> TensorMap:
    """Return a copy of `tmap` with the in-bounds cells of `patch` written at `spec`."""
    if patch.shape != (spec.rows, spec.cols, tmap.channels):
        raise ShapeError(f"patch shape {patch.shape} does not match spec")
    out = np.array(tmap.data)
    r0, r1 = max(spec.top, 0), min(spec.top + spec.rows, tmap.height)
    c0, c1 = max(spec.left, 0), min(spec.left + spec.cols, tmap.width)
    if r0 < r1 and c0 < c1:
        out[r0:r1, c0:c1] = patch.data[r0 - spec.top:r1 - spec.top, c0 - spec.left:c1 - spec.left]
    return TensorMap(out)
