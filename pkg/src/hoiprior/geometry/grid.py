"""Regular voxel lattices in the hand-centric frame and the HOPG file format.

Arrays are indexed ``[c, i, j, k]`` with ``i`` along x.  On disk the data is
channel-major with x varying fastest, i.e. Fortran order within a channel.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path

import numpy as np

from ..errors import BadResolution, IoFailure, ShapeMismatch

HOPG_MAGIC = b"HOPG"
HOPG_VERSION = 1
_HEADER = struct.Struct("<4sI3IIf")

DEFAULT_RESOLUTION = 64
DEFAULT_HALF_EXTENT = 0.15


@dataclass(frozen=True)
class GridSpec:
    resolution: tuple[int, int, int] = (DEFAULT_RESOLUTION,) * 3
    half_extent: float = DEFAULT_HALF_EXTENT

    def __post_init__(self):
        res = self.resolution
        if isinstance(res, (int, np.integer)):
            res = (int(res),) * 3
        res = tuple(int(r) for r in res)
        if len(res) != 3 or min(res) < 2:
            raise BadResolution(f"resolution must be >= 2 per axis, got {res}")
        if not self.half_extent > 0:
            raise BadResolution(f"half extent must be positive, got {self.half_extent}")
        object.__setattr__(self, "resolution", res)
        object.__setattr__(self, "half_extent", float(self.half_extent))

    @classmethod
    def cube(cls, n: int = DEFAULT_RESOLUTION, half_extent: float = DEFAULT_HALF_EXTENT) -> "GridSpec":
        return cls((n, n, n), half_extent)

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.resolution

    @property
    def num_voxels(self) -> int:
        return int(np.prod(self.resolution))

    @property
    def voxel_size(self) -> float:
        """Voxel pitch in meters along x (all axes share it for cubic grids)."""
        return 2.0 * self.half_extent / self.resolution[0]

    @property
    def voxel_size_normalized(self) -> float:
        return 2.0 / self.resolution[0]

    def axis_normalized(self, axis: int) -> np.ndarray:
        n = self.resolution[axis]
        return -1.0 + (np.arange(n) + 0.5) * (2.0 / n)

    @cached_property
    def _centers_normalized(self) -> np.ndarray:
        xs, ys, zs = (self.axis_normalized(a) for a in range(3))
        X, Y, Z = np.meshgrid(xs, ys, zs, indexing="ij")
        pts = np.stack([X.ravel(), Y.ravel(), Z.ravel()], axis=1)
        pts.flags.writeable = False
        return pts

    def centers_normalized(self) -> np.ndarray:
        """Voxel centers, (N, 3), in units of the half-extent; C order over (i, j, k)."""
        return self._centers_normalized

    def centers(self) -> np.ndarray:
        """Voxel centers in meters."""
        return self._centers_normalized * self.half_extent

    def index_of(self, point_m) -> tuple[int, int, int]:
        """Index of the voxel containing a metric point (clamped to the lattice)."""
        p = np.asarray(point_m, dtype=float) / self.half_extent
        idx = np.floor((p + 1.0) * np.array(self.resolution) / 2.0).astype(int)
        return tuple(int(v) for v in np.clip(idx, 0, np.array(self.resolution) - 1))


def truncate(values: np.ndarray) -> np.ndarray:
    return np.clip(values, -1.0, 1.0)


@dataclass
class SdfGrid:
    """Truncated signed distance in normalized units (1 == half-extent)."""

    spec: GridSpec
    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.shape != self.spec.shape:
            raise ShapeMismatch(f"values {v.shape} do not match grid {self.spec.shape}")
        if not np.all(np.isfinite(v)):
            raise ValueError("SDF values must be finite")
        self.values = truncate(v)

    def metric(self) -> np.ndarray:
        """Values in meters."""
        return self.values * self.spec.half_extent

    def copy(self) -> "SdfGrid":
        return SdfGrid(self.spec, self.values.copy())


# --------------------------------------------------------------------------
# HOPG serialization
# --------------------------------------------------------------------------

def write_hopg(path, data: np.ndarray, half_extent: float) -> None:
    """Write a (C, X, Y, Z) or (X, Y, Z) array."""
    arr = np.asarray(data)
    if arr.ndim == 3:
        arr = arr[None]
    if arr.ndim != 4:
        raise ShapeMismatch(f"expected 3 or 4 dims, got {arr.shape}")
    c, nx, ny, nz = arr.shape
    header = _HEADER.pack(HOPG_MAGIC, HOPG_VERSION, nx, ny, nz, c, float(half_extent))
    body = np.ascontiguousarray(arr.astype("<f4").transpose(0, 3, 2, 1)).tobytes()
    try:
        Path(path).write_bytes(header + body)
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}") from exc


def read_hopg(path) -> tuple[np.ndarray, float]:
    """Return ``(data[C, X, Y, Z] as float64, half_extent)``."""
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise IoFailure(f"cannot read {path}: {exc}") from exc
    if len(raw) < _HEADER.size:
        raise IoFailure(f"{path}: truncated header")
    magic, version, nx, ny, nz, c, half = _HEADER.unpack_from(raw)
    if magic != HOPG_MAGIC:
        raise IoFailure(f"{path}: bad magic {magic!r}")
    if version != HOPG_VERSION:
        raise IoFailure(f"{path}: unsupported version {version}")
    count = c * nx * ny * nz
    if len(raw) != _HEADER.size + 4 * count:
        raise IoFailure(f"{path}: expected {count} floats, file size {len(raw)}")
    flat = np.frombuffer(raw, dtype="<f4", offset=_HEADER.size)
    data = flat.reshape(c, nz, ny, nx).transpose(0, 3, 2, 1).astype(np.float64)
    # shortest decimal that maps back to the same f32, so 0.15 stays 0.15
    return data, float(str(np.float32(half)))


def save_sdf(path, grid: SdfGrid) -> None:
    write_hopg(path, grid.values, grid.spec.half_extent)


def load_sdf(path) -> SdfGrid:
    data, half = read_hopg(path)
    if data.shape[0] != 1:
        raise ShapeMismatch(f"{path}: SDF grid must have 1 channel, found {data.shape[0]}")
    return SdfGrid(GridSpec(data.shape[1:], half), data[0])
